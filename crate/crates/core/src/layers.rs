//! Convolution, normalization and activation layers over NCHW tensors.

use candle_core::{DType, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::{channel_add, channel_mul, depthwise_conv, unfold_patches, ConvGeometry};
use crate::params::Init;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvInit {
    Kaiming,
    Zeros,
}

/// Geometry of a 2-D convolution. Padding defaults to "same" for stride 1.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
    pub init: ConvInit,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            dilation: 1,
            groups: 1,
            bias: true,
            init: ConvInit::Kaiming,
        }
    }

    pub fn rect(in_channels: usize, out_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            kernel: (kh, kw),
            ..Self::new(in_channels, out_channels, 1)
        }
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel)
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn zero_init(mut self) -> Self {
        self.init = ConvInit::Zeros;
        self
    }

    pub fn num_params(&self) -> usize {
        let w = self.out_channels * (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1;
        w + if self.bias { self.out_channels } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
    /// (top, bottom, left, right)
    pad: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(spec: ConvSpec, init: Init) -> Result<Self> {
        assert!(
            spec.in_channels % spec.groups == 0 && spec.out_channels % spec.groups == 0,
            "channels {}->{} not divisible by groups {}",
            spec.in_channels,
            spec.out_channels,
            spec.groups
        );
        let (kh, kw) = spec.kernel;
        let cin_g = spec.in_channels / spec.groups;
        let shape = (spec.out_channels, cin_g, kh, kw);
        let weight = match spec.init {
            ConvInit::Kaiming => init.kaiming("weight", shape, cin_g * kh * kw)?,
            ConvInit::Zeros => init.zeros("weight", shape)?,
        };
        let bias = if spec.bias {
            Some(init.zeros("bias", spec.out_channels)?)
        } else {
            None
        };
        let ph = spec.dilation * (kh - 1);
        let pw = spec.dilation * (kw - 1);
        let pad = if spec.stride == 1 {
            (ph / 2, ph - ph / 2, pw / 2, pw - pw / 2)
        } else {
            // Stride-2 downsampling: pad so that H_out = ceil(H / stride).
            (ph / 2, ph / 2, pw / 2, pw / 2)
        };
        Ok(Self {
            weight,
            bias,
            spec,
            pad,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    fn is_depthwise(&self) -> bool {
        self.spec.groups > 1
            && self.spec.groups == self.spec.in_channels
            && self.spec.groups == self.spec.out_channels
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.spec.kernel,
            stride: self.spec.stride,
            dilation: self.spec.dilation,
            pad: self.pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.is_depthwise() {
            depthwise_conv(x, &self.weight, self.geometry())?
        } else {
            conv2d(x, &self.weight, self.geometry(), self.spec.groups)?
        };
        match &self.bias {
            Some(bias) => channel_add(&y, bias),
            None => Ok(y),
        }
    }
}

/// Grouped convolution without bias. `weight`: `[Co, C / groups, kh, kw]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, g: ConvGeometry, groups: usize) -> Result<Tensor> {
    let (b, ci, h, w) = x.dims4()?;
    let (ho, wo) = g.output_size(h, w);
    let co = weight.dim(0)?;
    if g.kernel == (1, 1) && g.stride == 1 && groups == 1 && g.pad == (0, 0, 0, 0) {
        let k = weight.reshape((co, ci))?;
        return Ok(k
            .broadcast_matmul(&x.reshape((b, ci, h * w))?)?
            .reshape((b, co, ho, wo))?);
    }
    let cols = unfold_patches(x, g)?;
    let rows = cols.dim(1)? / groups;
    let cols = cols.reshape((b, groups, rows, ho * wo))?;
    let k = weight.reshape((groups, co / groups, rows))?;
    Ok(k.broadcast_matmul(&cols)?.reshape((b, co, ho, wo))?)
}

/// Group normalization over (channels / groups, H, W) with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

/// Largest divisor of `channels` not exceeding 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(channels: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: init.ones("weight", channels)?,
            bias: init.zeros("bias", channels)?,
            groups: norm_groups(channels),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = self.groups;
        let xs = x.contiguous()?.reshape((b, g, (c / g) * h * w))?;
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        channel_add(&channel_mul(&normed, &self.weight)?, &self.bias)
    }
}

/// Layer normalization across channels at every pixel.
#[derive(Debug, Clone)]
pub struct ChannelLayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl ChannelLayerNorm {
    pub fn new(channels: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: init.ones("weight", channels)?,
            bias: init.zeros("bias", channels)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        channel_add(&channel_mul(&normed, &self.weight)?, &self.bias)
    }
}

/// PReLU with one learnable slope per channel.
#[derive(Debug, Clone)]
pub struct PRelu {
    slope: Tensor,
}

impl PRelu {
    pub fn new(channels: usize, init: Init) -> Result<Self> {
        Ok(Self {
            slope: init.constant("slope", channels, 0.25)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let neg = channel_mul(&x.neg()?.relu()?, &self.slope)?;
        Ok((x.relu()? - neg)?)
    }
}

/// Inverted dropout driven by an explicit RNG so training is reproducible.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let n = x.elem_count();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Forward-pass context: training mode carries the dropout RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
        }
    }
}

/// Scalar-valued tensor helper for tests and losses.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    fn store() -> ParamStore {
        ParamStore::new(7, DType::F64, &Device::Cpu)
    }

    fn rand_input(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn depthwise_path_matches_grouped_conv() {
        let s = store();
        let conv = Conv2d::new(ConvSpec::depthwise(4, 3).dilation(2), s.root().pp("dw")).unwrap();
        let x = rand_input((2, 4, 9, 7));
        let fast = conv.forward(&x).unwrap();
        let xp = x.pad_with_zeros(2, 2, 2).unwrap().pad_with_zeros(3, 2, 2).unwrap();
        let slow = xp.conv2d(conv.weight(), 0, 1, 2, 4).unwrap();
        let diff = (fast - slow).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&diff).unwrap() < 1e-12);
    }

    #[test]
    fn rectangular_kernels_keep_shape() {
        let s = store();
        let h = Conv2d::new(ConvSpec::rect(3, 5, 1, 7), s.root().pp("h")).unwrap();
        let v = Conv2d::new(ConvSpec::rect(3, 5, 9, 1), s.root().pp("v")).unwrap();
        let x = rand_input((1, 3, 10, 12));
        assert_eq!(h.forward(&x).unwrap().dims(), &[1, 5, 10, 12]);
        assert_eq!(v.forward(&x).unwrap().dims(), &[1, 5, 10, 12]);
    }

    #[test]
    fn strided_conv_halves_even_sizes() {
        let s = store();
        let c = Conv2d::new(ConvSpec::new(2, 4, 3).stride(2), s.root().pp("down")).unwrap();
        let x = rand_input((1, 2, 16, 16));
        assert_eq!(c.forward(&x).unwrap().dims(), &[1, 4, 8, 8]);
    }

    #[test]
    fn param_count_matches_spec() {
        let s = store();
        let spec = ConvSpec::new(8, 16, 3).groups(2);
        Conv2d::new(spec, s.root().pp("g")).unwrap();
        assert_eq!(s.num_scalars(), spec.num_params());
        assert_eq!(spec.num_params(), 16 * 4 * 9 + 16);
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let s = store();
        let gn = GroupNorm::new(6, s.root().pp("gn")).unwrap();
        assert_eq!(norm_groups(6), 6);
        let x = rand_input((2, 6, 5, 5)).affine(3.0, 1.0).unwrap();
        let y = gn.forward(&x).unwrap();
        let m = scalar(&y.mean_all().unwrap()).unwrap();
        assert!(m.abs() < 1e-10);
    }

    #[test]
    fn prelu_scales_negative_side() {
        let s = store();
        let p = PRelu::new(1, s.root().pp("p")).unwrap();
        let x = Tensor::new(&[[[[-4f64, 2.0]]]], &Device::Cpu).unwrap();
        let y = p.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![-1.0, 2.0]);
    }

    #[test]
    fn dropout_is_reproducible() {
        use rand::SeedableRng;
        let x = Tensor::ones((1, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let a = dropout(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = dropout(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
