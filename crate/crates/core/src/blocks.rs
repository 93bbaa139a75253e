//! Reusable sub-blocks: squeeze-excitation, efficient channel attention, the
//! Ghost module, depthwise-separable and directional snake convolutions,
//! attentional feature fusion, and the compact multi-branch fusion stem.

use candle_core::Tensor;

use crate::config::DsConvMode;
use crate::error::{BlockError, Result};
use crate::kernels::{channel_add, perpendicular_sample, ConvGeometry, Orientation};
use crate::layers::{conv2d, Conv2d, ConvSpec};
use crate::params::Init;
use crate::tensor::{
    avg_pool3_same, expect_same_shape, global_avg_pool, max_pool3_same, sigmoid,
};

/// Squeeze-and-excitation: `x * sigmoid(W2 relu(W1 gap(x)))`.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl SqueezeExcite {
    pub const DEFAULT_REDUCTION: usize = 16;

    pub fn new(channels: usize, reduction: usize, init: Init) -> Result<Self> {
        if channels < reduction {
            return Err(BlockError::ChannelTooSmall {
                channels,
                reduction,
            }
            .into());
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Conv2d::new(ConvSpec::new(channels, hidden, 1), init.pp("fc1"))?,
            fc2: Conv2d::new(ConvSpec::new(hidden, channels, 1), init.pp("fc2"))?,
        })
    }

    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let s = global_avg_pool(x)?;
        let s = self.fc1.forward(&s)?.relu()?;
        sigmoid(&self.fc2.forward(&s)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.gate(x)?)?)
    }
}

/// Kernel size of the ECA channel convolution for `channels` channels
/// (gamma = 2, b = 1): the odd number nearest above `|log2(C) / 2 + 1 / 2|`.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = ((channels as f64).log2() / 2.0 + 0.5).abs().floor() as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

/// Efficient channel attention: a 1-D convolution across the pooled channel
/// descriptor replaces the SE bottleneck.
#[derive(Debug, Clone)]
pub struct Eca {
    weight: Tensor,
    kernel: usize,
}

impl Eca {
    pub fn new(channels: usize, init: Init) -> Result<Self> {
        let kernel = eca_kernel_size(channels);
        Ok(Self {
            weight: init.kaiming("weight", kernel, kernel)?,
            kernel,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel
    }

    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let pooled = global_avg_pool(x)?.reshape((b, c))?;
        let half = self.kernel / 2;
        let padded = pooled.pad_with_zeros(1, half, half)?;
        let mut acc: Option<Tensor> = None;
        for k in 0..self.kernel {
            let term = padded
                .narrow(1, k, c)?
                .broadcast_mul(&self.weight.narrow(0, k, 1)?.reshape((1, 1))?)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        let logits = acc.expect("kernel has at least one tap");
        sigmoid(&logits.reshape((b, c, 1, 1))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.gate(x)?)?)
    }
}

/// Ghost module: a 1x1 primary convolution producing half the outputs and a
/// cheap depthwise 3x3 convolution deriving the other half from them.
#[derive(Debug, Clone)]
pub struct Ghost {
    primary: Conv2d,
    cheap: Conv2d,
}

impl Ghost {
    pub fn new(in_channels: usize, out_channels: usize, init: Init) -> Result<Self> {
        if out_channels % 2 != 0 {
            return Err(BlockError::OddChannels(out_channels).into());
        }
        let half = out_channels / 2;
        Ok(Self {
            primary: Conv2d::new(ConvSpec::new(in_channels, half, 1), init.pp("primary"))?,
            cheap: Conv2d::new(ConvSpec::depthwise(half, 3), init.pp("cheap"))?,
        })
    }

    pub fn num_params(in_channels: usize, out_channels: usize) -> usize {
        let half = out_channels / 2;
        ConvSpec::new(in_channels, half, 1).num_params() + ConvSpec::depthwise(half, 3).num_params()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.primary.forward(x)?;
        let g = self.cheap.forward(&p)?;
        Ok(Tensor::cat(&[&p, &g], 1)?)
    }
}

/// Depthwise 3x3 followed by a pointwise 1x1 convolution.
#[derive(Debug, Clone)]
pub struct DepthwiseSeparable {
    depthwise: Conv2d,
    pointwise: Conv2d,
}

impl DepthwiseSeparable {
    pub fn new(in_channels: usize, out_channels: usize, init: Init) -> Result<Self> {
        Ok(Self {
            depthwise: Conv2d::new(ConvSpec::depthwise(in_channels, 3), init.pp("dw"))?,
            pointwise: Conv2d::new(ConvSpec::new(in_channels, out_channels, 1), init.pp("pw"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pointwise.forward(&self.depthwise.forward(x)?)
    }
}

/// Number of taps of the directional snake convolutions.
pub const SNAKE_TAPS: usize = 7;

/// Directional 1x7 / 7x1 convolution. In [`DsConvMode::Offset`] every tap is
/// displaced perpendicular to the kernel axis by an offset field predicted by
/// a zero-initialized 3x3 convolution, so both modes agree at initialization.
#[derive(Debug, Clone)]
pub struct DsConvDirectional {
    orientation: Orientation,
    mode: DsConvMode,
    weight: Tensor,
    bias: Tensor,
    offset: Option<Conv2d>,
    channels: usize,
}

impl DsConvDirectional {
    pub fn new(
        channels: usize,
        orientation: Orientation,
        mode: DsConvMode,
        init: Init,
    ) -> Result<Self> {
        let shape = match orientation {
            Orientation::Horizontal => (channels, channels, 1, SNAKE_TAPS),
            Orientation::Vertical => (channels, channels, SNAKE_TAPS, 1),
        };
        let weight = init.kaiming("weight", shape, channels * SNAKE_TAPS)?;
        let bias = init.zeros("bias", channels)?;
        let offset = match mode {
            DsConvMode::Plain => None,
            DsConvMode::Offset => Some(Conv2d::new(
                ConvSpec::new(channels, SNAKE_TAPS, 3).zero_init(),
                init.pp("offset"),
            )?),
        };
        Ok(Self {
            orientation,
            mode,
            weight,
            bias,
            offset,
            channels,
        })
    }

    pub fn mode(&self) -> DsConvMode {
        self.mode
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.offset {
            None => self.forward_plain(x),
            Some(offset_conv) => {
                let offsets = offset_conv.forward(x)?;
                self.forward_with_offsets(x, &offsets)
            }
        }
    }

    /// Standard zero-padded convolution along the kernel axis.
    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let half = SNAKE_TAPS / 2;
        let (kh, kw, pad) = match self.orientation {
            Orientation::Horizontal => (1, SNAKE_TAPS, (0, 0, half, half)),
            Orientation::Vertical => (SNAKE_TAPS, 1, (half, half, 0, 0)),
        };
        let g = ConvGeometry {
            kernel: (kh, kw),
            stride: 1,
            dilation: 1,
            pad,
        };
        channel_add(&conv2d(x, &self.weight, g, 1)?, &self.bias)
    }

    /// Convolution over taps sampled at the given perpendicular offsets
    /// (`[B, 7, H, W]`).
    pub fn forward_with_offsets(&self, x: &Tensor, offsets: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let taps = perpendicular_sample(x, offsets, self.orientation)?;
        let taps = taps.reshape((b, c * SNAKE_TAPS, h, w))?;
        let kernel = self.weight.reshape((self.channels, c * SNAKE_TAPS, 1, 1))?;
        let y = conv2d(&taps, &kernel, ConvGeometry::pointwise(), 1)?;
        channel_add(&y, &self.bias)
    }
}

/// Attentional feature fusion with a two-scale (global + local) channel
/// attention: `m * skip + (1 - m) * up`.
#[derive(Debug, Clone)]
pub struct Aff {
    local1: Conv2d,
    local2: Conv2d,
    global1: Conv2d,
    global2: Conv2d,
}

impl Aff {
    pub const REDUCTION: usize = 4;

    pub fn new(channels: usize, init: Init) -> Result<Self> {
        let hidden = (channels / Self::REDUCTION).max(1);
        Ok(Self {
            local1: Conv2d::new(ConvSpec::new(channels, hidden, 1), init.pp("local1"))?,
            local2: Conv2d::new(ConvSpec::new(hidden, channels, 1), init.pp("local2"))?,
            global1: Conv2d::new(ConvSpec::new(channels, hidden, 1), init.pp("global1"))?,
            global2: Conv2d::new(ConvSpec::new(hidden, channels, 1), init.pp("global2"))?,
        })
    }

    /// The fusion weight `m` in (0, 1), shaped like the inputs.
    pub fn gate(&self, skip: &Tensor, up: &Tensor) -> Result<Tensor> {
        expect_same_shape(skip, up)?;
        let s = (skip + up)?;
        let local = self.local2.forward(&self.local1.forward(&s)?.relu()?)?;
        let global = self
            .global2
            .forward(&self.global1.forward(&global_avg_pool(&s)?)?.relu()?)?;
        sigmoid(&local.broadcast_add(&global)?)
    }

    pub fn combine(skip: &Tensor, up: &Tensor, gate: &Tensor) -> Result<Tensor> {
        expect_same_shape(skip, up)?;
        let keep = (skip * gate)?;
        let rest = (up * gate.affine(-1.0, 1.0)?)?;
        Ok((keep + rest)?)
    }

    pub fn forward(&self, skip: &Tensor, up: &Tensor) -> Result<Tensor> {
        let m = self.gate(skip, up)?;
        Self::combine(skip, up, &m)
    }
}

/// Width of the CMBF expansion and of each of its four branches.
pub const CMBF_WIDTH: usize = 32;
pub const CMBF_BRANCH: usize = CMBF_WIDTH / 4;
/// SE reduction inside the 8-channel CMBF branch.
pub const CMBF_SE_REDUCTION: usize = 4;

/// Compact multi-branch fusion stem.
///
/// Expands the input to 32 channels, splits them into four 8-channel groups
/// handled by max pooling, average pooling, a depthwise-separable convolution
/// and SE recalibration, then fuses the concatenation with a 1x1 convolution.
/// All branches preserve the spatial size.
#[derive(Debug, Clone)]
pub struct Cmbf {
    expand: Conv2d,
    separable: DepthwiseSeparable,
    se: SqueezeExcite,
    fuse: Conv2d,
}

impl Cmbf {
    pub fn new(in_channels: usize, out_channels: usize, init: Init) -> Result<Self> {
        Ok(Self {
            expand: Conv2d::new(ConvSpec::new(in_channels, CMBF_WIDTH, 1), init.pp("expand"))?,
            separable: DepthwiseSeparable::new(CMBF_BRANCH, CMBF_BRANCH, init.pp("separable"))?,
            se: SqueezeExcite::new(CMBF_BRANCH, CMBF_SE_REDUCTION, init.pp("se"))?,
            fuse: Conv2d::new(ConvSpec::new(CMBF_WIDTH, out_channels, 1), init.pp("fuse"))?,
        })
    }

    /// The four branch outputs before concatenation.
    pub fn branches(&self, x: &Tensor) -> Result<[Tensor; 4]> {
        let e = self.expand.forward(x)?;
        let parts = e.chunk(4, 1)?;
        Ok([
            max_pool3_same(&parts[0])?,
            avg_pool3_same(&parts[1])?,
            self.separable.forward(&parts[2].contiguous()?)?,
            self.se.forward(&parts[3].contiguous()?)?,
        ])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.branches(x)?;
        let cat = Tensor::cat(&[&b[0], &b[1], &b[2], &b[3]], 1)?;
        self.fuse.forward(&cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::scalar;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(11, DType::F64, &Device::Cpu)
    }

    fn randn(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        scalar(&t.abs().unwrap().max_all().unwrap()).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn cmbf_shapes() {
        let s = store();
        let c = Cmbf::new(1, 32, s.root().pp("cmbf")).unwrap();
        assert_eq!(c.forward(&randn((2, 1, 64, 64))).unwrap().dims(), &[2, 32, 64, 64]);
        let c16 = Cmbf::new(1, 16, s.root().pp("cmbf16")).unwrap();
        assert_eq!(c16.forward(&randn((1, 1, 24, 20))).unwrap().dims(), &[1, 16, 24, 20]);
    }

    #[test]
    fn cmbf_zero_input_gives_bias_pattern() {
        let s = store();
        let c = Cmbf::new(1, 32, s.root().pp("cmbf")).unwrap();
        let x = Tensor::zeros((1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let [maxp, ..] = c.branches(&x).unwrap();
        assert_eq!(max_abs(&maxp), 0.0);
        let y = c.forward(&x).unwrap();
        let v = values(&y);
        assert!(v.iter().all(|x| x.is_finite()));
        // Spatially constant per channel.
        let first = values(&y.narrow(1, 0, 1).unwrap());
        assert!(first.iter().all(|&x| x == first[0]));
    }

    #[test]
    fn se_requires_enough_channels() {
        let s = store();
        let err = SqueezeExcite::new(8, 16, s.root().pp("se")).unwrap_err();
        assert!(matches!(
            err,
            crate::Error::Block(BlockError::ChannelTooSmall {
                channels: 8,
                reduction: 16
            })
        ));
    }

    #[test]
    fn se_shrinks_and_keeps_zero_channels() {
        let s = store();
        let se = SqueezeExcite::new(32, 16, s.root().pp("se")).unwrap();
        let x = randn((2, 32, 16, 16));
        let mask = Tensor::ones((1, 32, 1, 1), DType::F64, &Device::Cpu)
            .unwrap()
            .slice_assign(
                &[0..1, 5..6, 0..1, 0..1],
                &Tensor::zeros((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap(),
            )
            .unwrap();
        let x = x.broadcast_mul(&mask).unwrap();
        let y = se.forward(&x).unwrap();
        assert_eq!(y.dims(), x.dims());
        let (xv, yv) = (values(&x), values(&y));
        assert!(xv.iter().zip(&yv).all(|(a, b)| b.abs() <= a.abs()));
        assert_eq!(max_abs(&y.narrow(1, 5, 1).unwrap()), 0.0);
        let g = values(&se.gate(&x).unwrap());
        assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn eca_kernel_sizes() {
        assert_eq!(eca_kernel_size(32), 3);
        assert_eq!(eca_kernel_size(64), 3);
        assert_eq!(eca_kernel_size(128), 5);
        assert_eq!(eca_kernel_size(256), 5);
        assert_eq!(eca_kernel_size(8), 3);
    }

    #[test]
    fn eca_gates_in_open_interval() {
        let s = store();
        let eca = Eca::new(32, s.root().pp("eca")).unwrap();
        assert_eq!(eca.kernel_size(), 3);
        let x = randn((2, 32, 6, 6));
        let g = values(&eca.gate(&x).unwrap());
        assert_eq!(g.len(), 64);
        assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
        let zero = Tensor::zeros((1, 32, 6, 6), DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::cat(&[&zero.narrow(1, 0, 1).unwrap(), &randn((1, 31, 6, 6))], 1).unwrap();
        assert_eq!(max_abs(&eca.forward(&x).unwrap().narrow(1, 0, 1).unwrap()), 0.0);
    }

    #[test]
    fn ghost_splits_output_and_is_cheaper_than_dense() {
        let s = store();
        let g = Ghost::new(16, 32, s.root().pp("ghost")).unwrap();
        let y = g.forward(&randn((2, 16, 8, 8))).unwrap();
        assert_eq!(y.dims(), &[2, 32, 8, 8]);
        assert_eq!(s.num_scalars(), Ghost::num_params(16, 32));
        assert!(Ghost::new(16, 7, s.root().pp("odd")).is_err());
        for cin in [8usize, 16, 64] {
            for cout in [8usize, 32, 128] {
                let dense = cin * cout * 9 + cout;
                let ghost = cin * (cout / 2) + cout / 2 + (cout / 2) * 9 + cout / 2;
                assert_eq!(Ghost::num_params(cin, cout), ghost);
                assert!(ghost < dense);
            }
        }
    }

    #[test]
    fn snake_offset_mode_matches_plain_at_init() {
        let s = store();
        for orientation in [Orientation::Horizontal, Orientation::Vertical] {
            let conv = DsConvDirectional::new(
                3,
                orientation,
                DsConvMode::Offset,
                s.root().pp(format!("{orientation:?}")),
            )
            .unwrap();
            let x = randn((2, 3, 9, 11));
            let a = conv.forward(&x).unwrap();
            let b = conv.forward_plain(&x).unwrap();
            assert_eq!(a.dims(), &[2, 3, 9, 11]);
            assert!(max_abs(&(a - b).unwrap()) < 1e-6);
        }
    }

    #[test]
    fn horizontal_snake_keeps_row_constant_images_row_constant() {
        let s = store();
        let conv = DsConvDirectional::new(
            2,
            Orientation::Horizontal,
            DsConvMode::Plain,
            s.root().pp("h"),
        )
        .unwrap();
        // Constant along each row, varying down the columns; keep away from
        // the left/right padding by checking interior columns.
        let col = Tensor::arange(0f64, 10.0, &Device::Cpu).unwrap().reshape((1, 1, 10, 1)).unwrap();
        let x = col.broadcast_as((1, 2, 10, 16)).unwrap().contiguous().unwrap();
        let y = conv.forward(&x).unwrap();
        let inner = y.narrow(3, 3, 10).unwrap();
        for r in 0..10 {
            let row = values(&inner.narrow(2, r, 1).unwrap().narrow(1, 0, 1).unwrap());
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn aff_convex_combination() {
        let s = store();
        let aff = Aff::new(8, s.root().pp("aff")).unwrap();
        let a = randn((1, 8, 5, 5));
        let b = randn((1, 8, 5, 5));
        let same = aff.forward(&a, &a).unwrap();
        assert!(max_abs(&(same - &a).unwrap()) < 1e-12);
        let ones = Tensor::ones((1, 8, 5, 5), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        assert_eq!(max_abs(&(Aff::combine(&a, &b, &ones).unwrap() - &a).unwrap()), 0.0);
        assert_eq!(max_abs(&(Aff::combine(&a, &b, &zeros).unwrap() - &b).unwrap()), 0.0);
        let m = values(&aff.gate(&a, &b).unwrap());
        assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
        let other = randn((1, 8, 4, 5));
        assert!(aff.forward(&a, &other).is_err());
    }
}
