//! Selective state-space machinery: the 1-D selective scan with its
//! input-dependent projections, the four-direction 2-D cross scan, the gated
//! V-SS2D block, the local spatial attention stand-in, the compact FAZ
//! enhancement block, and the two Mamba blocks built from them.

use candle_core::{DType, Device, Tensor};

use crate::blocks::SqueezeExcite;
use crate::config::{DsConvMode, CFEB_RESIDUAL_SCALE};
use crate::error::Result;
use crate::hdfe::FeatureExtractor;
use crate::kernels::selective_scan_op;
use crate::layers::{ChannelLayerNorm, Conv2d, ConvSpec, GroupNorm};
use crate::params::Init;
use crate::tensor::{sigmoid, softplus};
use crate::vmaf::Vmaf;

/// Inner width of V-SS2D relative to the block width.
pub const VSS_EXPAND: usize = 1;
/// Groups of the CFEB 7x7 dilated convolution.
pub const CFEB_GROUPS: usize = 8;
pub const CFEB_DILATION: usize = 2;

/// `y = scan(x) + d * x` for `x`, `dt`: `[B, L, D]`, `a`: `[D, N]` (negative),
/// `b`, `c`: `[B, L, N]`, `d`: `[D]`.
pub fn selective_scan(
    x: &Tensor,
    dt: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Result<Tensor> {
    let y = selective_scan_op(x, dt, a, b, c)?;
    Ok((y + x.broadcast_mul(d)?)?)
}

/// `ceil(width / 16)`, the rank of the step-size projection.
pub fn dt_rank(width: usize) -> usize {
    width.div_ceil(16)
}

/// Input-dependent projections of one scan direction.
#[derive(Debug, Clone)]
pub struct ScanBranch {
    x_proj: Tensor,
    dt_proj: Tensor,
    dt_bias: Tensor,
    a_log: Tensor,
    d: Tensor,
    width: usize,
    state: usize,
    rank: usize,
}

impl ScanBranch {
    pub const DT_MIN: f64 = 1e-3;
    pub const DT_MAX: f64 = 0.1;

    pub fn new(width: usize, state: usize, init: Init) -> Result<Self> {
        let rank = dt_rank(width);
        let x_proj = init.kaiming("x_proj", (width, rank + 2 * state), width)?;
        let dt_proj = init.kaiming("dt_proj", (rank, width), rank)?;
        // Step sizes start log-uniform in [DT_MIN, DT_MAX]; the bias holds
        // their inverse softplus.
        let u = init.draw(width, 0.5);
        let bias: Vec<f64> = u
            .iter()
            .map(|v| {
                let t = v + 0.5;
                let dt = (Self::DT_MIN.ln() + t * (Self::DT_MAX.ln() - Self::DT_MIN.ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let dt_bias = init.from_values("dt_bias", width, bias)?;
        let a_log: Vec<f64> = (0..width)
            .flat_map(|_| (1..=state).map(|n| (n as f64).ln()))
            .collect();
        let a_log = init.from_values("a_log", (width, state), a_log)?;
        let d = init.ones("d", width)?;
        Ok(Self {
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            d,
            width,
            state,
            rank,
        })
    }

    /// `A = -exp(A_log)`, strictly negative.
    pub fn a(&self) -> Result<Tensor> {
        Ok(self.a_log.exp()?.neg()?)
    }

    /// Positive step sizes, B and C for a `[B, L, D]` sequence.
    pub fn project(&self, seq: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let p = seq.broadcast_matmul(&self.x_proj)?;
        let dt_low = p.narrow(2, 0, self.rank)?;
        let b = p.narrow(2, self.rank, self.state)?.contiguous()?;
        let c = p.narrow(2, self.rank + self.state, self.state)?.contiguous()?;
        let dt = dt_low.broadcast_matmul(&self.dt_proj)?.broadcast_add(&self.dt_bias)?;
        Ok((softplus(&dt)?.contiguous()?, b, c))
    }

    pub fn forward(&self, seq: &Tensor) -> Result<Tensor> {
        let seq = seq.contiguous()?;
        let (dt, b, c) = self.project(&seq)?;
        selective_scan(&seq, &dt, &self.a()?, &b, &c, &self.d)
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// The four traversal orders of a 2-D grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    RowMajor,
    RowMajorReversed,
    ColumnMajor,
    ColumnMajorReversed,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        Self::RowMajor,
        Self::RowMajorReversed,
        Self::ColumnMajor,
        Self::ColumnMajorReversed,
    ];

    fn column_major(self) -> bool {
        matches!(self, Self::ColumnMajor | Self::ColumnMajorReversed)
    }

    fn reversed(self) -> bool {
        matches!(self, Self::RowMajorReversed | Self::ColumnMajorReversed)
    }

    /// `[B, D, H, W]` -> `[B, H*W, D]` in this traversal order.
    pub fn unfold(self, x: &Tensor) -> Result<Tensor> {
        let (b, d, h, w) = x.dims4()?;
        let seq = if self.column_major() {
            x.permute((0, 3, 2, 1))?
        } else {
            x.permute((0, 2, 3, 1))?
        };
        let seq = seq.contiguous()?.reshape((b, h * w, d))?;
        Ok(if self.reversed() { seq.flip(&[1])? } else { seq })
    }

    /// Inverse of [`ScanDirection::unfold`].
    pub fn fold(self, seq: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, _, d) = seq.dims3()?;
        let seq = if self.reversed() {
            seq.contiguous()?.flip(&[1])?
        } else {
            seq.clone()
        };
        Ok(if self.column_major() {
            seq.reshape((b, w, h, d))?.permute((0, 3, 2, 1))?
        } else {
            seq.reshape((b, h, w, d))?.permute((0, 3, 1, 2))?
        }
        .contiguous()?)
    }
}

/// Depthwise conv + SiLU, four directional selective scans summed, then a
/// layer norm over channels.
#[derive(Debug, Clone)]
pub struct CrossScan2d {
    conv: Conv2d,
    branches: Vec<ScanBranch>,
    norm: ChannelLayerNorm,
}

impl CrossScan2d {
    pub fn new(width: usize, state: usize, init: Init) -> Result<Self> {
        let branches = (0..4)
            .map(|i| ScanBranch::new(width, state, init.pp(format!("dir{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            conv: Conv2d::new(ConvSpec::depthwise(width, 3), init.pp("dwconv"))?,
            branches,
            norm: ChannelLayerNorm::new(width, init.pp("norm"))?,
        })
    }

    /// Sum of the four folded scan outputs, before normalization.
    pub fn scan_sum(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let u = self.conv.forward(x)?.silu()?;
        let mut acc: Option<Tensor> = None;
        for (dir, branch) in ScanDirection::ALL.iter().zip(&self.branches) {
            let y = dir.fold(&branch.forward(&dir.unfold(&u)?)?, h, w)?;
            acc = Some(match acc {
                None => y,
                Some(a) => (a + y)?,
            });
        }
        Ok(acc.expect("four directions"))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&self.scan_sum(x)?)
    }
}

/// The gate path of V-SS2D.
#[derive(Debug, Clone)]
pub enum GatePath {
    Plain,
    Vmaf(Box<Vmaf>),
}

/// `proj_out(cross_scan(proj_in(x)) * SiLU([VMAF](proj_gate(x)))) + x`.
#[derive(Debug, Clone)]
pub struct Vss2d {
    proj_in: Conv2d,
    proj_gate: Conv2d,
    gate: GatePath,
    scan: CrossScan2d,
    proj_out: Conv2d,
}

impl Vss2d {
    pub fn new(channels: usize, state: usize, use_vmaf_gate: bool, init: Init) -> Result<Self> {
        let inner = VSS_EXPAND * channels;
        Ok(Self {
            proj_in: Conv2d::new(ConvSpec::new(channels, inner, 1), init.pp("proj_in"))?,
            proj_gate: Conv2d::new(ConvSpec::new(channels, inner, 1), init.pp("proj_gate"))?,
            gate: if use_vmaf_gate {
                GatePath::Vmaf(Box::new(Vmaf::new(inner, init.pp("vmaf"))?))
            } else {
                GatePath::Plain
            },
            scan: CrossScan2d::new(inner, state, init.pp("scan"))?,
            proj_out: Conv2d::new(
                ConvSpec::new(inner, channels, 1).zero_init(),
                init.pp("proj_out"),
            )?,
        })
    }

    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.proj_gate.forward(x)?;
        let g = match &self.gate {
            GatePath::Plain => g,
            GatePath::Vmaf(v) => v.forward(&g)?,
        };
        Ok(g.silu()?)
    }

    pub fn main(&self, x: &Tensor) -> Result<Tensor> {
        self.scan.forward(&self.proj_in.forward(x)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = (self.main(x)? * self.gate(x)?)?;
        Ok((self.proj_out.forward(&y)? + x)?)
    }
}

/// Local spatial attention stand-in: `x + x * sigmoid(dwconv3x3(x))` with a
/// zero-initialized convolution.
#[derive(Debug, Clone)]
pub struct Lsa {
    conv: Conv2d,
}

impl Lsa {
    pub fn new(channels: usize, init: Init) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ConvSpec::depthwise(channels, 3).zero_init(), init.pp("conv"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = sigmoid(&self.conv.forward(x)?)?;
        Ok((x + (x * g)?)?)
    }
}

/// Pixels with `(i - H/2)^2 + (j - W/2)^2 <= (min(H, W) / 4)^2`, all
/// divisions flooring.
pub fn circle_mask(h: usize, w: usize) -> Vec<bool> {
    let r = (h.min(w) / 4) as i64;
    let (ci, cj) = ((h / 2) as i64, (w / 2) as i64);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            out.push((i - ci).pow(2) + (j - cj).pow(2) <= r * r);
        }
    }
    out
}

pub fn circle_mask_tensor(h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = circle_mask(h, w)
        .into_iter()
        .map(|m| if m { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(v, (1, 1, h, w), device)?.to_dtype(dtype)?)
}

/// Compact FAZ enhancement block:
/// `x + 0.3 * SE(gconv7x7_d2(x)) * (1 + circle)`.
#[derive(Debug, Clone)]
pub struct Cfeb {
    conv: Conv2d,
    se: SqueezeExcite,
    mask: bool,
}

impl Cfeb {
    pub fn new(channels: usize, mask: bool, init: Init) -> Result<Self> {
        let groups = if channels % CFEB_GROUPS == 0 { CFEB_GROUPS } else { 1 };
        let reduction = SqueezeExcite::DEFAULT_REDUCTION.min(channels);
        Ok(Self {
            conv: Conv2d::new(
                ConvSpec::new(channels, channels, 7)
                    .dilation(CFEB_DILATION)
                    .groups(groups),
                init.pp("conv"),
            )?,
            se: SqueezeExcite::new(channels, reduction, init.pp("se"))?,
            mask,
        })
    }

    /// The update `f` before the residual scale.
    pub fn update(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.se.forward(&self.conv.forward(x)?)?;
        if !self.mask {
            return Ok(f);
        }
        let (_, _, h, w) = x.dims4()?;
        let m = circle_mask_tensor(h, w, x.dtype(), x.device())?;
        Ok(f.broadcast_mul(&(m + 1.0)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + (self.update(x)? * CFEB_RESIDUAL_SCALE)?)?)
    }
}

/// Options shared by both Mamba block variants.
#[derive(Debug, Clone, Copy)]
pub struct BlockOptions {
    pub hdfe: bool,
    pub vmaf: bool,
    pub cfeb: bool,
    pub cfeb_mask: bool,
    pub state: usize,
    pub dsconv: DsConvMode,
}

/// `x + SiLU(norm(LSA(VSS2D(extractor(x)))))` with a VMAF-gated V-SS2D.
#[derive(Debug, Clone)]
pub struct RvMambaBlock {
    extractor: FeatureExtractor,
    vss: Vss2d,
    lsa: Lsa,
    norm: GroupNorm,
}

impl RvMambaBlock {
    pub fn new(channels: usize, opts: BlockOptions, init: Init) -> Result<Self> {
        Ok(Self {
            extractor: FeatureExtractor::new(opts.hdfe, channels, opts.dsconv, init.clone())?,
            vss: Vss2d::new(channels, opts.state, opts.vmaf, init.pp("vss"))?,
            lsa: Lsa::new(channels, init.pp("lsa"))?,
            norm: GroupNorm::new(channels, init.pp("norm"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.extractor.forward(x)?;
        let y = self.vss.forward(&y)?;
        let y = self.lsa.forward(&y)?;
        Ok((x + self.norm.forward(&y)?.silu()?)?)
    }
}

/// `x + SiLU(norm(LSA(CFEB(VSS2D(extractor(x))))))` with a plain SiLU gate.
#[derive(Debug, Clone)]
pub struct FazMambaBlock {
    extractor: FeatureExtractor,
    vss: Vss2d,
    cfeb: Option<Cfeb>,
    lsa: Lsa,
    norm: GroupNorm,
}

impl FazMambaBlock {
    pub fn new(channels: usize, opts: BlockOptions, init: Init) -> Result<Self> {
        Ok(Self {
            extractor: FeatureExtractor::new(opts.hdfe, channels, opts.dsconv, init.clone())?,
            vss: Vss2d::new(channels, opts.state, false, init.pp("vss"))?,
            cfeb: if opts.cfeb {
                Some(Cfeb::new(channels, opts.cfeb_mask, init.pp("cfeb"))?)
            } else {
                None
            },
            lsa: Lsa::new(channels, init.pp("lsa"))?,
            norm: GroupNorm::new(channels, init.pp("norm"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.extractor.forward(x)?;
        let y = self.vss.forward(&y)?;
        let y = match &self.cfeb {
            Some(c) => c.forward(&y)?,
            None => y,
        };
        let y = self.lsa.forward(&y)?;
        Ok((x + self.norm.forward(&y)?.silu()?)?)
    }
}
