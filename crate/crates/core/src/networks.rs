//! The two U-Net stages and the cascade joining them.
//!
//! Both stages share one skeleton: a stem, three encoder levels (block, then a
//! strided 3x3 convolution doubling the width), a bottleneck, three decoder
//! levels (bilinear 2x + 1x1 convolution, attentional fusion with the skip,
//! block) and a small head. Inputs are zero-padded to a square whose side is
//! a multiple of 8 and the output is cropped back.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};

use crate::blocks::{Aff, Cmbf};
use crate::config::{ModelConfig, ENCODER_DEPTH};
use crate::error::Result;
use crate::layers::{dropout, Conv2d, ConvSpec, GroupNorm};
pub use crate::layers::Mode;
use crate::params::{Init, ParamStore};
use crate::ssm::{BlockOptions, FazMambaBlock, RvMambaBlock};
use crate::tensor::{center_crop, paste_center, sigmoid, upsample2x_bilinear};
use crate::vmaf::{Vmaf, VmafGates};

/// Binarization threshold for predictions.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    pub logits: Tensor,
    pub prob: Tensor,
}

impl SegmentationOutput {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let prob = sigmoid(&logits)?;
        Ok(Self { logits, prob })
    }

    /// `prob >= 0.5` as 0/1 in the same dtype.
    pub fn binary(&self) -> Result<Tensor> {
        Ok(self.prob.ge(THRESHOLD)?.to_dtype(self.prob.dtype())?)
    }
}

#[derive(Debug, Clone)]
pub struct JointOutput {
    pub rv: SegmentationOutput,
    pub faz_roi: SegmentationOutput,
    /// FAZ probabilities on the full canvas, zero outside the ROI window.
    pub faz_full: Tensor,
}

/// Side length the networks pad an `h x w` input to.
pub fn padded_side(h: usize, w: usize) -> usize {
    let m = 1 << ENCODER_DEPTH;
    h.max(w).div_ceil(m) * m
}

fn pad_to_square(x: &Tensor, side: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == side && w == side {
        return Ok(x.clone());
    }
    paste_center(x, side, side)
}

fn crop_back(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, s, _) = x.dims4()?;
    if h == s && w == s {
        return Ok(x.clone());
    }
    let top = (s - h) / 2;
    let left = (s - w) / 2;
    Ok(x.narrow(2, top, h)?.narrow(3, left, w)?.contiguous()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Rv,
    Faz,
}

#[derive(Debug, Clone)]
enum Block {
    Rv(Box<RvMambaBlock>),
    Faz(Box<FazMambaBlock>),
}

impl Block {
    fn new(variant: Variant, channels: usize, opts: BlockOptions, init: Init) -> Result<Self> {
        Ok(match variant {
            Variant::Rv => Self::Rv(Box::new(RvMambaBlock::new(channels, opts, init)?)),
            Variant::Faz => Self::Faz(Box::new(FazMambaBlock::new(channels, opts, init)?)),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::Rv(b) => b.forward(x),
            Self::Faz(b) => b.forward(x),
        }
    }
}

#[derive(Debug, Clone)]
enum Stem {
    Cmbf(Box<Cmbf>),
    Plain(Conv2d),
}

#[derive(Debug, Clone)]
struct Decoder {
    up: Conv2d,
    fuse: Aff,
    block: Block,
}

#[derive(Debug, Clone)]
struct Head {
    conv: Conv2d,
    norm: GroupNorm,
    out: Conv2d,
}

/// One U-Net stage.
#[derive(Debug, Clone)]
pub struct SegNet {
    variant: Variant,
    stem: Stem,
    encoders: Vec<(Block, Conv2d)>,
    bottleneck: Block,
    vmaf: Option<Vmaf>,
    decoders: Vec<Decoder>,
    head: Head,
    dropout_rate: f64,
    dtype: DType,
}

impl SegNet {
    pub fn new(variant: Variant, in_channels: usize, cfg: &ModelConfig, init: Init) -> Result<Self> {
        let t = cfg.toggles;
        let opts = BlockOptions {
            hdfe: t.hdfe,
            vmaf: variant == Variant::Rv && t.vmaf,
            cfeb: t.cfeb,
            cfeb_mask: cfg.cfeb_mask,
            state: cfg.ssm_state_dim,
            dsconv: cfg.dsconv_mode,
        };
        let base = cfg.base_channels;
        let stem = if t.cmbf {
            Stem::Cmbf(Box::new(Cmbf::new(in_channels, base, init.pp("stem"))?))
        } else {
            Stem::Plain(Conv2d::new(ConvSpec::new(in_channels, base, 1), init.pp("stem"))?)
        };
        let mut encoders = Vec::new();
        for i in 0..cfg.encoder_depth {
            let c = cfg.stage_channels(i);
            let e = init.pp(format!("enc{i}"));
            encoders.push((
                Block::new(variant, c, opts, e.pp("block"))?,
                Conv2d::new(ConvSpec::new(c, 2 * c, 3).stride(2), e.pp("down"))?,
            ));
        }
        let cb = cfg.stage_channels(cfg.encoder_depth);
        let bottleneck = Block::new(variant, cb, opts, init.pp("bottleneck").pp("block"))?;
        let vmaf = if opts.vmaf {
            Some(Vmaf::new(cb, init.pp("bottleneck").pp("vmaf"))?)
        } else {
            None
        };
        let mut decoders = Vec::new();
        for i in (0..cfg.encoder_depth).rev() {
            let c = cfg.stage_channels(i);
            let d = init.pp(format!("dec{i}"));
            decoders.push(Decoder {
                up: Conv2d::new(ConvSpec::new(2 * c, c, 1), d.pp("up"))?,
                fuse: Aff::new(c, d.pp("aff"))?,
                block: Block::new(variant, c, opts, d.pp("block"))?,
            });
        }
        let h = init.pp("head");
        let head = Head {
            conv: Conv2d::new(ConvSpec::new(base, base, 3), h.pp("conv"))?,
            norm: GroupNorm::new(base, h.pp("norm"))?,
            out: Conv2d::new(ConvSpec::new(base, 1, 1), h.pp("out"))?,
        };
        Ok(Self {
            variant,
            stem,
            encoders,
            bottleneck,
            vmaf,
            decoders,
            head,
            dropout_rate: cfg.dropout_rate,
            dtype: init.dtype(),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<SegmentationOutput> {
        self.run(x, mode, false).map(|(o, _)| o)
    }

    /// Forward pass that also returns the bottleneck VMAF gates, if any.
    pub fn forward_with_gates(
        &self,
        x: &Tensor,
        mode: &mut Mode,
    ) -> Result<(SegmentationOutput, Option<VmafGates>)> {
        self.run(x, mode, true)
    }

    fn run(
        &self,
        x: &Tensor,
        mode: &mut Mode,
        capture: bool,
    ) -> Result<(SegmentationOutput, Option<VmafGates>)> {
        let (_, _, h, w) = x.dims4()?;
        let side = padded_side(h, w);
        let x = pad_to_square(&x.to_dtype(self.dtype)?, side)?;

        let mut f = match &self.stem {
            Stem::Cmbf(c) => c.forward(&x)?,
            Stem::Plain(c) => c.forward(&x)?,
        };
        let mut skips = Vec::with_capacity(self.encoders.len());
        for (block, down) in &self.encoders {
            let s = block.forward(&f)?;
            f = down.forward(&s)?;
            skips.push(s);
        }
        f = self.bottleneck.forward(&f)?;
        if let Mode::Train(rng) = mode {
            f = dropout(&f, self.dropout_rate, rng)?;
        }
        let mut gates = None;
        if let Some(v) = &self.vmaf {
            let (y, g) = v.forward_with_gates(&f)?;
            f = y;
            if capture {
                gates = Some(g);
            }
        }
        for (dec, skip) in self.decoders.iter().zip(skips.iter().rev()) {
            let up = dec.up.forward(&upsample2x_bilinear(&f)?)?;
            let fused = dec.fuse.forward(skip, &up)?;
            f = dec.block.forward(&fused)?;
        }
        let hd = self.head.norm.forward(&self.head.conv.forward(&f)?)?.silu()?;
        let logits = crop_back(&self.head.out.forward(&hd)?, h, w)?;
        Ok((SegmentationOutput::from_logits(logits)?, gates))
    }
}

/// RV stage, FAZ stage and the cascade between them, sharing one store.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub rv: SegNet,
    pub faz: SegNet,
    cfg: ModelConfig,
    store: ParamStore,
}

impl JointModel {
    pub fn new(cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(cfg.seed, dtype, device);
        let root = store.root();
        let rv = SegNet::new(Variant::Rv, cfg.in_channels, cfg, root.pp("rv"))?;
        let faz = SegNet::new(Variant::Faz, cfg.faz_in_channels(), cfg, root.pp("faz"))?;
        Ok(Self {
            rv,
            faz,
            cfg: cfg.clone(),
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn forward(&self, image: &Tensor, mode: &mut Mode) -> Result<JointOutput> {
        let image = image.to_dtype(self.dtype())?;
        let rv = self.rv.forward(&image, mode)?;
        self.faz_stage(&image, rv, mode)
    }

    /// FAZ stage given an already computed RV output.
    pub fn faz_stage(
        &self,
        image: &Tensor,
        rv: SegmentationOutput,
        mode: &mut Mode,
    ) -> Result<JointOutput> {
        let t = self.cfg.toggles;
        let (_, _, h, w) = image.dims4()?;
        let mut x2 = image.clone();
        if t.rv_prior {
            let prior = if self.cfg.stop_rv_gradient {
                rv.prob.detach()
            } else {
                rv.prob.clone()
            };
            x2 = Tensor::cat(&[&x2, &prior], 1)?;
        }
        if t.roi {
            x2 = center_crop(&x2, self.cfg.roi_size)?.contiguous()?;
        }
        let faz_roi = self.faz.forward(&x2, mode)?;
        let faz_full = if t.roi {
            paste_center(&faz_roi.prob, h, w)?
        } else {
            faz_roi.prob.clone()
        };
        Ok(JointOutput {
            rv,
            faz_roi,
            faz_full,
        })
    }

    /// Bottleneck VMAF gates of the RV stage (eval mode).
    pub fn rv_gates(&self, image: &Tensor) -> Result<Option<VmafGates>> {
        let image = image.to_dtype(self.dtype())?;
        Ok(self.rv.forward_with_gates(&image, &mut Mode::Eval)?.1)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport {
            total: self.num_params(),
            by_module: self.store.breakdown(2),
        }
    }
}

/// Trainable-scalar counts per top-level module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    pub by_module: BTreeMap<String, usize>,
}

impl std::fmt::Display for ParamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, n) in &self.by_module {
            writeln!(f, "{name:<24} {n:>12}")?;
        }
        write!(
            f,
            "{:<24} {:>12}  ({:.2} M)",
            "total",
            self.total,
            self.total as f64 / 1e6
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Toggles;
    use rand::SeedableRng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            base_channels: 8,
            ssm_state_dim: 4,
            roi_size: 16,
            ..ModelConfig::default()
        }
    }

    fn image(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(v, (b, 1, h, w), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn padded_sides() {
        assert_eq!(padded_side(100, 100), 104);
        assert_eq!(padded_side(304, 304), 304);
        assert_eq!(padded_side(20, 13), 24);
    }

    #[test]
    fn indivisible_input_round_trips() {
        let m = JointModel::new(&small_cfg(), DType::F32, &Device::Cpu).unwrap();
        let out = m.rv.forward(&image(1, 20, 20, 1), &mut Mode::Eval).unwrap();
        assert_eq!(out.prob.dims(), &[1, 1, 20, 20]);
        assert!(values(&out.prob).iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn joint_roi_paste_has_zero_border() {
        let m = JointModel::new(&small_cfg(), DType::F32, &Device::Cpu).unwrap();
        let out = m.forward(&image(2, 24, 24, 2), &mut Mode::Eval).unwrap();
        assert_eq!(out.rv.prob.dims(), &[2, 1, 24, 24]);
        assert_eq!(out.faz_roi.prob.dims(), &[2, 1, 16, 16]);
        assert_eq!(out.faz_full.dims(), &[2, 1, 24, 24]);
        let full = out.faz_full.get(0).unwrap().get(0).unwrap().to_vec2::<f32>().unwrap();
        let roi = out.faz_roi.prob.get(0).unwrap().get(0).unwrap().to_vec2::<f32>().unwrap();
        for (i, row) in full.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if (4..20).contains(&i) && (4..20).contains(&j) {
                    assert_eq!(v, roi[i - 4][j - 4]);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn roi_and_prior_off_sees_image_only() {
        let cfg = ModelConfig {
            toggles: Toggles {
                roi: false,
                rv_prior: false,
                ..Toggles::default()
            },
            ..small_cfg()
        };
        assert_eq!(cfg.faz_in_channels(), 1);
        let m = JointModel::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let out = m.forward(&image(1, 16, 16, 3), &mut Mode::Eval).unwrap();
        assert_eq!(out.faz_full.dims(), &[1, 1, 16, 16]);
        assert_eq!(values(&out.faz_full), values(&out.faz_roi.prob));
    }

    #[test]
    fn stop_gradient_isolates_rv_parameters() {
        let cfg = ModelConfig {
            stop_rv_gradient: true,
            ..small_cfg()
        };
        let m = JointModel::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let out = m.forward(&image(1, 16, 16, 4), &mut Mode::Eval).unwrap();
        let grads = out.faz_roi.prob.sum_all().unwrap().backward().unwrap();
        for v in m.store().vars_with_prefix("rv/") {
            assert!(grads.get(v.as_tensor()).is_none());
        }
        assert!(m
            .store()
            .vars_with_prefix("faz/")
            .iter()
            .any(|v| grads.get(v.as_tensor()).is_some()));

        let coupled = JointModel::new(&small_cfg(), DType::F32, &Device::Cpu).unwrap();
        let out = coupled.forward(&image(1, 16, 16, 4), &mut Mode::Eval).unwrap();
        let grads = out.faz_roi.prob.sum_all().unwrap().backward().unwrap();
        assert!(coupled
            .store()
            .vars_with_prefix("rv/")
            .iter()
            .any(|v| grads.get(v.as_tensor()).is_some()));
    }

    #[test]
    fn construction_is_deterministic_and_toggles_shrink() {
        let a = JointModel::new(&small_cfg(), DType::F32, &Device::Cpu).unwrap();
        let b = JointModel::new(&small_cfg(), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        assert_eq!(a.store().digest().unwrap(), b.store().digest().unwrap());
        let no_vmaf = ModelConfig {
            toggles: Toggles {
                vmaf: false,
                ..Toggles::default()
            },
            ..small_cfg()
        };
        let c = JointModel::new(&no_vmaf, DType::F32, &Device::Cpu).unwrap();
        assert!(c.num_params() < a.num_params());
        let report = a.param_report();
        assert_eq!(report.by_module.values().sum::<usize>(), report.total);
    }

    #[test]
    fn dropout_only_in_training() {
        let m = JointModel::new(&small_cfg(), DType::F32, &Device::Cpu).unwrap();
        let x = image(1, 16, 16, 5);
        let a = m.rv.forward(&x, &mut Mode::Eval).unwrap();
        let b = m.rv.forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(values(&a.prob), values(&b.prob));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let c = m.rv.forward(&x, &mut Mode::Train(&mut rng)).unwrap();
        assert_ne!(values(&a.prob), values(&c.prob));
    }
}
