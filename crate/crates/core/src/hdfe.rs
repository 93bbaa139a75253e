//! Hybrid directional feature extractor: a stem, a direction-aware stream of
//! snake convolutions and a multi-scale dilated stream, fused by two softmax
//! weights, re-weighted by ECA and added back to the input.

use candle_core::Tensor;

use crate::blocks::{DsConvDirectional, Eca, Ghost};
use crate::config::DsConvMode;
use crate::error::Result;
use crate::kernels::Orientation;
use crate::layers::{Conv2d, ConvSpec, PRelu};
use crate::params::Init;
use crate::tensor::{expect_same_shape, softmax};

pub const DILATION_RATES: [usize; 3] = [2, 4, 6];

/// Top-down refinement over same-resolution scales:
/// `p3 = conv(s3)`, `p2 = conv(s2 + p3)`, `p1 = conv(s1 + p2)`.
#[derive(Debug, Clone)]
pub struct PyramidEnhance {
    p1: Conv2d,
    p2: Conv2d,
    p3: Conv2d,
}

impl PyramidEnhance {
    pub fn new(channels: usize, init: Init) -> Result<Self> {
        Ok(Self {
            p1: Conv2d::new(ConvSpec::new(channels, channels, 1).zero_init(), init.pp("p1"))?,
            p2: Conv2d::new(ConvSpec::new(channels, channels, 1), init.pp("p2"))?,
            p3: Conv2d::new(ConvSpec::new(channels, channels, 1), init.pp("p3"))?,
        })
    }

    pub fn forward(&self, scales: [&Tensor; 3]) -> Result<Tensor> {
        let [s1, s2, s3] = scales;
        expect_same_shape(s1, s2)?;
        expect_same_shape(s1, s3)?;
        let p3 = self.p3.forward(s3)?;
        let p2 = self.p2.forward(&(s2 + p3)?)?;
        self.p1.forward(&(s1 + p2)?)
    }
}

/// Intermediate results of one HDFE pass.
#[derive(Debug, Clone)]
pub struct HdfeTrace {
    pub directional: Tensor,
    pub multiscale: Tensor,
    pub alpha_beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct Hdfe {
    stem_conv: Conv2d,
    stem_act: PRelu,
    stem_ghost: Ghost,
    snake_h: DsConvDirectional,
    snake_v: DsConvDirectional,
    interaction: Conv2d,
    dilated: Vec<Conv2d>,
    pyramid: PyramidEnhance,
    fusion_logits: Tensor,
    eca: Eca,
}

impl Hdfe {
    pub fn new(channels: usize, mode: DsConvMode, init: Init) -> Result<Self> {
        let stem = init.pp("stem");
        let dilated = DILATION_RATES
            .iter()
            .map(|&r| {
                Conv2d::new(
                    ConvSpec::new(channels, channels, 3).dilation(r),
                    init.pp(format!("dilated{r}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem_conv: Conv2d::new(ConvSpec::new(channels, channels, 1), stem.pp("conv"))?,
            stem_act: PRelu::new(channels, stem.pp("prelu"))?,
            stem_ghost: Ghost::new(channels, channels, stem.pp("ghost"))?,
            snake_h: DsConvDirectional::new(
                channels,
                Orientation::Horizontal,
                mode,
                init.pp("snake_h"),
            )?,
            snake_v: DsConvDirectional::new(channels, Orientation::Vertical, mode, init.pp("snake_v"))?,
            interaction: Conv2d::new(
                ConvSpec::new(2 * channels, channels, 1).zero_init(),
                init.pp("interaction"),
            )?,
            dilated,
            pyramid: PyramidEnhance::new(channels, init.pp("pyramid"))?,
            fusion_logits: init.zeros("fusion_logits", 2)?,
            eca: Eca::new(channels, init.pp("eca"))?,
        })
    }

    pub fn dilated_branch(&self, i: usize) -> &Conv2d {
        &self.dilated[i]
    }

    pub fn pyramid(&self) -> &PyramidEnhance {
        &self.pyramid
    }

    pub fn fusion_weights(&self) -> Result<Tensor> {
        softmax(&self.fusion_logits)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_traced(x).map(|(y, _)| y)
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, HdfeTrace)> {
        let s = self.stem_act.forward(&self.stem_conv.forward(x)?)?;
        let s = self.stem_ghost.forward(&s)?;

        let h = self.snake_h.forward(&s)?;
        let v = self.snake_v.forward(&s)?;
        let d = self.interaction.forward(&Tensor::cat(&[&h, &v], 1)?)?;

        let scales = self
            .dilated
            .iter()
            .map(|c| c.forward(&s))
            .collect::<Result<Vec<_>>>()?;
        let m = self.pyramid.forward([&scales[0], &scales[1], &scales[2]])?;

        let ab = self.fusion_weights()?;
        let fused = (d.broadcast_mul(&ab.get(0)?)? + m.broadcast_mul(&ab.get(1)?)?)?;
        let y = (self.eca.forward(&fused)? + x)?;
        Ok((
            y,
            HdfeTrace {
                directional: d,
                multiscale: m,
                alpha_beta: ab,
            },
        ))
    }
}

/// Stand-in used when the HDFE toggle is off: `x + conv3x3(x)` with a
/// zero-initialized convolution.
#[derive(Debug, Clone)]
pub struct PlainExtractor {
    conv: Conv2d,
}

impl PlainExtractor {
    pub fn new(channels: usize, init: Init) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ConvSpec::new(channels, channels, 3).zero_init(), init.pp("conv"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.conv.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
pub enum FeatureExtractor {
    Hdfe(Box<Hdfe>),
    Plain(PlainExtractor),
}

impl FeatureExtractor {
    pub fn new(enabled: bool, channels: usize, mode: DsConvMode, init: Init) -> Result<Self> {
        Ok(if enabled {
            Self::Hdfe(Box::new(Hdfe::new(channels, mode, init.pp("hdfe"))?))
        } else {
            Self::Plain(PlainExtractor::new(channels, init.pp("plain"))?)
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::Hdfe(h) => h.forward(x),
            Self::Plain(p) => p.forward(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn identity_kernel(c: usize) -> Tensor {
        Tensor::eye(c, DType::F64, &Device::Cpu).unwrap().reshape((c, c, 1, 1)).unwrap()
    }

    #[test]
    fn identity_at_init_with_even_fusion() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let h = Hdfe::new(32, DsConvMode::Plain, s.root()).unwrap();
        let x = randn((2, 32, 48, 48), 1);
        let (y, trace) = h.forward_traced(&x).unwrap();
        assert_eq!(y.dims(), &[2, 32, 48, 48]);
        assert_eq!(values(&y), values(&x));
        assert_eq!(values(&trace.alpha_beta), vec![0.5, 0.5]);
    }

    #[test]
    fn zeroed_streams_give_identity_after_perturbation() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let h = Hdfe::new(8, DsConvMode::Offset, s.root()).unwrap();
        s.perturb("", 2, 0.2).unwrap();
        let x = randn((1, 8, 12, 12), 3);
        assert_ne!(values(&h.forward(&x).unwrap()), values(&x));
        for p in ["snake_h", "snake_v", "interaction", "dilated", "pyramid"] {
            s.zero_prefix(p).unwrap();
        }
        assert_eq!(values(&h.forward(&x).unwrap()), values(&x));
    }

    #[test]
    fn pyramid_with_identity_convs_sums_scales() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let p = PyramidEnhance::new(3, s.root()).unwrap();
        for name in ["p1", "p2", "p3"] {
            s.set(&format!("{name}/weight"), &identity_kernel(3)).unwrap();
        }
        let x = randn((2, 3, 5, 5), 4);
        let y = p.forward([&x, &x, &x]).unwrap();
        let (vx, vy) = (values(&x), values(&y));
        assert!(vx.iter().zip(&vy).all(|(a, b)| (3.0 * a - b).abs() < 1e-12));
        let zero = x.zeros_like().unwrap();
        let z = p.forward([&zero, &zero, &zero]).unwrap();
        assert!(values(&z).iter().all(|v| *v == 0.0));
        assert!(p.forward([&x, &x, &randn((2, 3, 5, 4), 5)]).is_err());
    }

    #[test]
    fn rate_six_branch_reaches_exactly_radius_six() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let h = Hdfe::new(4, DsConvMode::Plain, s.root()).unwrap();
        s.set("dilated6/weight", &Tensor::ones((4, 4, 3, 3), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let n = 21;
        let c = n / 2;
        let impulse = Tensor::zeros((1, 4, n, n), DType::F64, &Device::Cpu)
            .unwrap()
            .slice_assign(
                &[0..1, 0..1, c..c + 1, c..c + 1],
                &Tensor::ones((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap(),
            )
            .unwrap();
        let r = h.dilated_branch(2).forward(&impulse).unwrap();
        let v = r.get(0).unwrap().get(0).unwrap().to_vec2::<f64>().unwrap();
        for (i, row) in v.iter().enumerate() {
            for (j, &val) in row.iter().enumerate() {
                let di = (i as i64 - c as i64).abs();
                let dj = (j as i64 - c as i64).abs();
                let on_grid = (di == 0 || di == 6) && (dj == 0 || dj == 6);
                assert_eq!(val != 0.0, on_grid, "({i},{j})");
                if di.max(dj) > 6 {
                    assert_eq!(val, 0.0);
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let h = Hdfe::new(4, DsConvMode::Offset, s.root()).unwrap();
        s.perturb("", 6, 0.3).unwrap();
        let x = randn((1, 4, 8, 8), 7);
        let r = gradcheck::check(|t| h.forward(t), &x, 1e-6).unwrap();
        assert!(r.rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn plain_extractor_is_identity_at_init() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let p = FeatureExtractor::new(false, 6, DsConvMode::Plain, s.root()).unwrap();
        let x = randn((1, 6, 9, 9), 8);
        assert_eq!(values(&p.forward(&x).unwrap()), values(&x));
        assert_eq!(s.num_scalars(), 6 * 6 * 9 + 6);
    }
}
