//! The joint training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use octaseg_core::checkpoint;
use octaseg_core::dataio::{augment, AugmentationPolicy, Mask, OctaSample};
use octaseg_core::error::DataError;
use octaseg_core::networks::{JointModel, Mode};
use octaseg_core::objective::{metrics_csv, summarize, total_loss, LossBreakdown, SampleMetrics};
use octaseg_core::tensor::center_crop;
use octaseg_core::util::derive_seed;
use octaseg_core::LossWeights;

use crate::error::{io_err, HarnessError, Result};
use crate::policy::{CheckpointKind, CheckpointPolicy, CheckpointRecord};
use crate::schedule::{lr_at, TrainConfig};

/// Where a run writes its artifacts. `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn to(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
        }
    }

    fn path(&self, rel: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(rel))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub val_rv_dice: Option<f64>,
    pub val_faz_dice: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<CheckpointRecord>,
    pub epochs: Vec<EpochLog>,
    /// Per-sample validation metrics from the last evaluated epoch.
    pub last_metrics: Vec<SampleMetrics>,
    pub param_digest: u64,
    pub steps: usize,
}

/// Stacks a batch into `[B, C, H, W]` images and `[B, 1, H, W]` masks.
pub fn collate(
    samples: &[OctaSample],
    dtype: DType,
    device: &candle_core::Device,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dims = samples[0].dims();
    for s in samples {
        if s.dims() != dims {
            return Err(octaseg_core::Error::Data(DataError::ShapeMismatch {
                id: s.id.clone(),
                what: "batch member",
                expected: dims,
                got: s.dims(),
            })
            .into());
        }
    }
    let cat = |f: &dyn Fn(&OctaSample) -> octaseg_core::Result<Tensor>| -> Result<Tensor> {
        let parts = samples.iter().map(f).collect::<octaseg_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    Ok((
        cat(&|s| s.image.to_tensor(dtype, device))?,
        cat(&|s| s.rv_mask.to_tensor(dtype, device))?,
        cat(&|s| s.faz_mask.to_tensor(dtype, device))?,
    ))
}

/// Joint loss for one batch. The FAZ term compares the ROI-sized prediction
/// with the equally cropped ground truth when the ROI is enabled.
pub fn batch_loss(
    model: &JointModel,
    batch: &[OctaSample],
    lw: &LossWeights,
    mode: &mut Mode,
) -> Result<(Tensor, LossBreakdown)> {
    let (x, y_rv, y_faz) = collate(batch, model.dtype(), model.device())?;
    let out = model.forward(&x, mode)?;
    let cfg = model.config();
    let y_faz = if cfg.toggles.roi {
        center_crop(&y_faz, cfg.roi_size)?.contiguous()?
    } else {
        y_faz
    };
    Ok(total_loss((&y_rv, &out.rv.prob), (&y_faz, &out.faz_roi.prob), lw)?)
}

/// Plain (no TTA) prediction and overlap scores for each sample.
pub fn evaluate(model: &JointModel, samples: &[OctaSample]) -> Result<Vec<SampleMetrics>> {
    samples
        .iter()
        .map(|s| {
            let x = s.image.to_tensor(model.dtype(), model.device())?;
            let out = model.forward(&x, &mut Mode::Eval)?;
            let rv = Mask::from_prob(&out.rv.prob)?;
            let faz = Mask::from_prob(&out.faz_full)?;
            Ok(SampleMetrics::compute(
                s.id.clone(),
                (&s.rv_mask, &rv),
                (&s.faz_mask, &faz),
            ))
        })
        .collect()
}

fn checkpoint_meta(model: &JointModel, epoch: usize, rv: f64, faz: f64) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("epoch".to_string(), epoch.to_string()),
        ("rv_dice".to_string(), format!("{rv:.6}")),
        ("faz_dice".to_string(), format!("{faz:.6}")),
        ("model_config".to_string(), model.config().to_toml_string()),
    ])
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Trains `model` in place. Evaluation on `val` starts at the policy's eval
/// epoch; `on_step` sees the model after every optimizer update.
pub fn train_with(
    model: &JointModel,
    train: &[OctaSample],
    val: &[OctaSample],
    tc: &TrainConfig,
    lw: &LossWeights,
    out: &RunOutput,
    on_step: &mut dyn FnMut(&JointModel, &StepInfo) -> Result<()>,
) -> Result<TrainReport> {
    tc.validate()?;
    if train.is_empty() {
        return Err(HarnessError::Config("empty training set".into()));
    }
    let vars: Vec<_> = model.store().vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: tc.lr_init,
            weight_decay: tc.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let policy_aug = if tc.augment {
        AugmentationPolicy::default()
    } else {
        AugmentationPolicy::none()
    };
    let mut policy = CheckpointPolicy::new(tc);
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let mut log = String::from("epoch,step,lr,loss,rv_loss,faz_loss\n");
    let mut epochs = Vec::new();
    let mut last_metrics = Vec::new();
    let mut step = 0;

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, "#order", epoch as u64)));
        let mut loss_sum = 0.0;
        let mut lr = tc.lr_init;
        for (k, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<OctaSample> = chunk
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &s.id, epoch as u64));
                    augment(s, &mut rng, &policy_aug)
                })
                .collect();
            lr = lr_at(epoch as f64 + k as f64 / steps_per_epoch as f64, tc);
            opt.set_learning_rate(lr);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, "#dropout", step as u64));
            let (loss, parts) = batch_loss(model, &batch, lw, &mut Mode::Train(&mut drop_rng))?;
            let ids: Vec<String> = batch.iter().map(|s| s.id.clone()).collect();
            if !parts.total.is_finite() {
                let dump = format!("epoch {epoch} step {step}\nbatch {}\n{parts:?}\n", ids.join(","));
                if let Some(p) = out.path("nonfinite_batch.txt") {
                    write_text(&p, &dump)?;
                }
                log::error!("{dump}");
                return Err(HarnessError::NonFiniteLoss {
                    epoch,
                    step,
                    batch: ids,
                });
            }
            opt.backward_step(&loss)?;
            loss_sum += parts.total;
            let _ = writeln!(log, "{epoch},{step},{lr:.9e},{:.6},{:.6},{:.6}", parts.total, parts.rv, parts.faz);
            on_step(
                model,
                &StepInfo {
                    epoch,
                    step,
                    lr,
                    loss: parts,
                },
            )?;
            step += 1;
        }
        let mean_loss = loss_sum / steps_per_epoch as f64;
        let mut entry = EpochLog {
            epoch,
            mean_loss,
            lr,
            val_rv_dice: None,
            val_faz_dice: None,
        };
        if policy.should_evaluate(epoch) && !val.is_empty() {
            let metrics = evaluate(model, val)?;
            let summary = summarize(&metrics)?;
            let (rv, faz) = (summary.rv_dice.0, summary.faz_dice.0);
            entry.val_rv_dice = Some(rv);
            entry.val_faz_dice = Some(faz);
            for kind in policy.observe(epoch, rv, faz) {
                let name = match kind {
                    CheckpointKind::Periodic => format!("periodic_e{epoch:03}.safetensors"),
                    k => format!("{k}.safetensors"),
                };
                if let Some(path) = out.path(&format!("checkpoints/{name}")) {
                    checkpoint::save(model.store(), &path, &checkpoint_meta(model, epoch, rv, faz))?;
                    policy.set_path(kind, path);
                }
            }
            last_metrics = metrics;
        }
        log::info!(
            "epoch {epoch:>3} loss {mean_loss:.5} lr {lr:.3e}{}",
            match (entry.val_rv_dice, entry.val_faz_dice) {
                (Some(r), Some(f)) => format!(" val rv {r:.4} faz {f:.4}"),
                _ => String::new(),
            }
        );
        epochs.push(entry);
    }

    if let Some(dir) = &out.dir {
        let mut epoch_log = String::from("epoch,mean_loss,lr,val_rv_dice,val_faz_dice\n");
        for e in &epochs {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(
                epoch_log,
                "{},{:.6},{:.9e},{},{}",
                e.epoch,
                e.mean_loss,
                e.lr,
                opt(e.val_rv_dice),
                opt(e.val_faz_dice)
            );
        }
        write_text(&dir.join("run_log.csv"), &epoch_log)?;
        write_text(&dir.join("step_log.csv"), &log)?;
        if !last_metrics.is_empty() {
            write_text(&dir.join("val_metrics.csv"), &metrics_csv(&last_metrics)?)?;
        }
        let mut ckpts = String::from("kind,epoch,rv_dice,faz_dice,path\n");
        for r in policy.records() {
            let path = r.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            let _ = writeln!(ckpts, "{},{},{:.6},{:.6},{path}", r.kind, r.epoch, r.rv_dice, r.faz_dice);
        }
        write_text(&dir.join("checkpoints.csv"), &ckpts)?;
        checkpoint::save(
            model.store(),
            &dir.join("checkpoints/last.safetensors"),
            &checkpoint_meta(model, tc.epochs.saturating_sub(1), f64::NAN, f64::NAN),
        )?;
    }

    Ok(TrainReport {
        records: policy.records(),
        epochs,
        last_metrics,
        param_digest: model.store().digest()?,
        steps: step,
    })
}

pub fn train(
    model: &JointModel,
    train: &[OctaSample],
    val: &[OctaSample],
    tc: &TrainConfig,
    lw: &LossWeights,
    out: &RunOutput,
) -> Result<TrainReport> {
    train_with(model, train, val, tc, lw, out, &mut |_, _| Ok(()))
}
