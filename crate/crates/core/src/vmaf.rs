//! Vessel multi-attention fusion: channel (VCAB), spatial (VSAB) and
//! structural (VSTAB) gates, mixed by three softmax-normalized scalars and
//! passed through a zero-initialized enhancement with a residual.

use candle_core::Tensor;

use crate::blocks::DepthwiseSeparable;
use crate::error::{BlockError, Result};
use crate::layers::{Conv2d, ConvSpec, GroupNorm};
use crate::params::Init;
use crate::tensor::{global_avg_pool, global_max_pool, rot90, rot90_inv, sigmoid, softmax};

/// Side of the square regions averaged for the VCAB local descriptor.
pub const LOCAL_REGION: usize = 4;
/// Length of the VSAB directional kernels.
pub const DIRECTIONAL_KERNEL: usize = 9;
pub const VCAB_REDUCTION: usize = 4;

/// Channel attention over global-average, global-max and local descriptors.
#[derive(Debug, Clone)]
pub struct Vcab {
    reduce: Conv2d,
    separable: DepthwiseSeparable,
    expand: Conv2d,
}

impl Vcab {
    pub fn new(channels: usize, init: Init) -> Result<Self> {
        let hidden = (channels / VCAB_REDUCTION).max(1);
        Ok(Self {
            reduce: Conv2d::new(ConvSpec::new(3 * channels, hidden, 1), init.pp("reduce"))?,
            separable: DepthwiseSeparable::new(hidden, hidden, init.pp("separable"))?,
            expand: Conv2d::new(ConvSpec::new(hidden, channels, 1), init.pp("expand"))?,
        })
    }

    /// The three `(B, C, 1, 1)` descriptors: global average, global max, and
    /// the strongest 4x4 regional average.
    pub fn descriptors(x: &Tensor) -> Result<[Tensor; 3]> {
        let (_, _, h, w) = x.dims4()?;
        let ph = (LOCAL_REGION - h % LOCAL_REGION) % LOCAL_REGION;
        let pw = (LOCAL_REGION - w % LOCAL_REGION) % LOCAL_REGION;
        let xp = x.pad_with_same(2, 0, ph)?.pad_with_same(3, 0, pw)?;
        let regional = xp.avg_pool2d(LOCAL_REGION)?;
        Ok([global_avg_pool(x)?, global_max_pool(x)?, global_max_pool(&regional)?])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [avg, max, local] = Self::descriptors(x)?;
        let d = Tensor::cat(&[&avg, &max, &local], 1)?;
        let h = self.reduce.forward(&d)?.relu()?;
        let h = self.separable.forward(&h)?;
        sigmoid(&self.expand.forward(&h)?)
    }
}

/// Pre-sigmoid maps of the four VSAB branches, each `(B, 1, H, W)`.
#[derive(Debug, Clone)]
pub struct VsabBranches {
    pub base: Tensor,
    pub horizontal: Tensor,
    pub vertical: Tensor,
    pub diagonal: Option<Tensor>,
}

/// Spatial attention over the channel-pooled map with horizontal, vertical
/// and rotated directional branches.
#[derive(Debug, Clone)]
pub struct Vsab {
    base: Conv2d,
    horizontal: Conv2d,
    vertical: Conv2d,
    diagonal: Option<Conv2d>,
    fuse: Conv2d,
}

impl Vsab {
    pub fn new(diagonal: bool, init: Init) -> Result<Self> {
        let k = DIRECTIONAL_KERNEL;
        let branches = if diagonal { 4 } else { 3 };
        Ok(Self {
            base: Conv2d::new(ConvSpec::new(2, 1, 7), init.pp("base"))?,
            horizontal: Conv2d::new(ConvSpec::rect(2, 1, 1, k), init.pp("horizontal"))?,
            vertical: Conv2d::new(ConvSpec::rect(2, 1, k, 1), init.pp("vertical"))?,
            diagonal: if diagonal {
                Some(Conv2d::new(ConvSpec::rect(2, 1, 1, k), init.pp("diagonal"))?)
            } else {
                None
            },
            fuse: Conv2d::new(ConvSpec::new(branches, 1, 1), init.pp("fuse"))?,
        })
    }

    /// `concat(channel mean, channel max)`.
    pub fn pooled(x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::cat(&[&x.mean_keepdim(1)?, &x.max_keepdim(1)?], 1)?)
    }

    pub fn branches(&self, x: &Tensor) -> Result<VsabBranches> {
        let (_, _, h, w) = x.dims4()?;
        if self.diagonal.is_some() && h != w {
            return Err(BlockError::NonSquareInput { h, w }.into());
        }
        let p = Self::pooled(x)?;
        let diagonal = match &self.diagonal {
            Some(conv) => Some(rot90_inv(&conv.forward(&rot90(&p)?)?)?),
            None => None,
        };
        Ok(VsabBranches {
            base: self.base.forward(&p)?,
            horizontal: self.horizontal.forward(&p)?,
            vertical: self.vertical.forward(&p)?,
            diagonal,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.branches(x)?;
        let mut maps = vec![b.base, b.horizontal, b.vertical];
        maps.extend(b.diagonal);
        let cat = Tensor::cat(&maps, 1)?;
        sigmoid(&self.fuse.forward(&cat)?)
    }
}

/// Structural attention: centre-line, bifurcation and width-variation maps.
#[derive(Debug, Clone)]
pub struct Vstab {
    centerline: Conv2d,
    bifurcation: Conv2d,
    width: Conv2d,
    fuse: Conv2d,
}

impl Vstab {
    pub fn new(channels: usize, init: Init) -> Result<Self> {
        Ok(Self {
            centerline: Conv2d::new(ConvSpec::new(channels, 1, 3), init.pp("centerline"))?,
            bifurcation: Conv2d::new(
                ConvSpec::new(channels, 1, 3).dilation(2),
                init.pp("bifurcation"),
            )?,
            width: Conv2d::new(ConvSpec::new(channels, 1, 5).dilation(2), init.pp("width"))?,
            fuse: Conv2d::new(ConvSpec::new(3, 1, 1), init.pp("fuse"))?,
        })
    }

    pub fn maps(&self, x: &Tensor) -> Result<[Tensor; 3]> {
        Ok([
            sigmoid(&self.centerline.forward(x)?)?,
            sigmoid(&self.bifurcation.forward(x)?)?,
            sigmoid(&self.width.forward(x)?)?,
        ])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [c, b, w] = self.maps(x)?;
        sigmoid(&self.fuse.forward(&Tensor::cat(&[&c, &b, &w], 1)?)?)
    }
}

/// Gate maps produced by one VMAF pass, kept for debug dumps.
#[derive(Debug, Clone)]
pub struct VmafGates {
    pub channel: Tensor,
    pub spatial: Tensor,
    pub structural: Tensor,
    pub weights: Tensor,
}

#[derive(Debug, Clone)]
pub struct Vmaf {
    vcab: Vcab,
    vsab: Vsab,
    vstab: Vstab,
    logits: Tensor,
    enhance: Conv2d,
    norm: GroupNorm,
}

impl Vmaf {
    pub fn new(channels: usize, init: Init) -> Result<Self> {
        Ok(Self {
            vcab: Vcab::new(channels, init.pp("vcab"))?,
            vsab: Vsab::new(true, init.pp("vsab"))?,
            vstab: Vstab::new(channels, init.pp("vstab"))?,
            logits: init.zeros("fusion_logits", 3)?,
            enhance: Conv2d::new(
                ConvSpec::new(channels, channels, 3).zero_init(),
                init.pp("enhance"),
            )?,
            norm: GroupNorm::new(channels, init.pp("enhance_norm"))?,
        })
    }

    /// Softmax-normalized branch weights.
    pub fn fusion_weights(&self) -> Result<Tensor> {
        softmax(&self.logits)
    }

    pub fn gates(&self, x: &Tensor) -> Result<VmafGates> {
        Ok(VmafGates {
            channel: self.vcab.forward(x)?,
            spatial: self.vsab.forward(x)?,
            structural: self.vstab.forward(x)?,
            weights: self.fusion_weights()?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_gates(x).map(|(y, _)| y)
    }

    pub fn forward_with_gates(&self, x: &Tensor) -> Result<(Tensor, VmafGates)> {
        let g = self.gates(x)?;
        let w = g.weights.reshape((3, 1, 1, 1, 1))?;
        let a = (x.broadcast_mul(&g.channel)?.broadcast_mul(&w.get(0)?)?
            + x.broadcast_mul(&g.spatial)?.broadcast_mul(&w.get(1)?)?)?;
        let a = (a + x.broadcast_mul(&g.structural)?.broadcast_mul(&w.get(2)?)?)?;
        let e = self.norm.forward(&self.enhance.forward(&a)?)?.silu()?;
        Ok(((x + e)?, g))
    }
}
