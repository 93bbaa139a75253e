use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use octaseg::ablate::{ablate, ablation_csv, Study};
use octaseg::error::{HarnessError, Result};
use octaseg::report::{write_ablation_bars, write_gate_dump, write_prediction};
use octaseg::train::{train, RunOutput};
use octaseg::tta::tta_predict;
use octaseg::TrainConfig;
use octaseg_core::checkpoint;
use octaseg_core::dataio::{load_dataset, synth_generate, write_dataset, Mask, Split};
use octaseg_core::networks::{JointModel, Mode};
use octaseg_core::objective::{metrics_csv, summarize, SampleMetrics};
use octaseg_core::{validate_config, Field, LossWeights, ModelConfig};

#[derive(Parser)]
#[command(name = "octaseg", version, about = "Joint retinal vessel and FAZ segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the joint model and write checkpoints, logs and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on a split and write a metrics CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Average predictions over flips.
        #[arg(long)]
        tta: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write probability maps and overlays for every sample of a split.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        tta: bool,
        /// Also dump the RV bottleneck attention gates.
        #[arg(long)]
        gates: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run one 8-row ablation study.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        study: Study,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate a synthetic dataset in the on-disk layout.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "3M")]
        field: Field,
        #[arg(long, default_value_t = 8)]
        train: usize,
        #[arg(long, default_value_t = 2)]
        val: usize,
        #[arg(long, default_value_t = 2)]
        test: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print trainable parameter counts per module.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
}

#[derive(Args)]
struct Common {
    /// Dataset root holding `3M/` and/or `6M/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "3M")]
    field: Field,
    /// TOML file with optional `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Default)]
struct ModelFlags {
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    ssm_state_dim: Option<usize>,
    #[arg(long)]
    roi_size: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

fn apply_model(cfg: &mut ModelConfig, f: &ModelFlags) {
    if let Some(v) = f.base_channels {
        cfg.base_channels = v;
    }
    if let Some(v) = f.ssm_state_dim {
        cfg.ssm_state_dim = v;
    }
    if let Some(v) = f.roi_size {
        cfg.roi_size = v;
    }
    if let Some(v) = f.dropout_rate {
        cfg.dropout_rate = v;
    }
}

fn apply_train(tc: &mut TrainConfig, f: &TrainFlags) {
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = f.$field { tc.$field = v; })*};
    }
    set!(epochs, batch_size, lr_max, lr_init, lr_min, warmup_epochs, weight_decay, seed);
    if f.no_augment {
        tc.augment = false;
    }
}

fn resolve(common: &Common) -> Result<(ModelConfig, TrainConfig)> {
    let mut file = read_config(common.config.as_deref())?;
    apply_model(&mut file.model, &common.model);
    apply_train(&mut file.train, &common.train);
    if common.train.seed.is_some() {
        file.model.seed = file.train.seed;
    }
    file.train.validate()?;
    Ok((file.model, file.train))
}

fn load(common: &Common, split: Split, roi: usize) -> Result<Vec<octaseg_core::dataio::OctaSample>> {
    Ok(load_dataset(&common.data, split, common.field, roi)?)
}

fn model_from_checkpoint(path: &Path) -> Result<JointModel> {
    let meta = checkpoint::read_metadata(path)?;
    let text = meta
        .get("model_config")
        .ok_or_else(|| HarnessError::Config(format!("{} has no model_config", path.display())))?;
    let cfg = ModelConfig::from_toml_str(text)?;
    let model = JointModel::new(&cfg, DType::F32, &Device::Cpu)?;
    checkpoint::load(model.store(), path)?;
    Ok(model)
}

fn predict_maps(model: &JointModel, x: &candle_core::Tensor, tta: bool) -> Result<[candle_core::Tensor; 2]> {
    if tta {
        tta_predict(model, x)
    } else {
        let out = model.forward(x, &mut Mode::Eval)?;
        Ok([out.rv.prob, out.faz_full])
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out_dir } => {
            let (cfg, tc) = resolve(&common)?;
            let train_set = load(&common, Split::Train, cfg.roi_size)?;
            let val_set = load(&common, Split::Val, cfg.roi_size)?;
            let hw = train_set
                .first()
                .map(|s| s.dims())
                .ok_or_else(|| HarnessError::Config("empty training split".into()))?;
            let cfg = validate_config(cfg, hw)?;
            let model = JointModel::new(&cfg, DType::F32, &Device::Cpu)?;
            log::info!("{} trainable parameters", model.num_params());
            let lw = LossWeights::for_field(common.field);
            let report = train(&model, &train_set, &val_set, &tc, &lw, &RunOutput::to(&out_dir))?;
            for r in &report.records {
                println!("{:<9} epoch {:>3} rv {:.4} faz {:.4}", r.kind.as_str(), r.epoch, r.rv_dice, r.faz_dice);
            }
            println!("parameter digest {:016x}", report.param_digest);
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            tta,
            out_dir,
        } => {
            let model = model_from_checkpoint(&checkpoint)?;
            let samples = load(&common, split, model.config().roi_size)?;
            let rows = samples
                .iter()
                .map(|s| {
                    let x = s.image.to_tensor(model.dtype(), model.device())?;
                    let [rv, faz] = predict_maps(&model, &x, tta)?;
                    Ok(SampleMetrics::compute(
                        s.id.clone(),
                        (&s.rv_mask, &Mask::from_prob(&rv)?),
                        (&s.faz_mask, &Mask::from_prob(&faz)?),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let csv_path = out_dir.join(format!("metrics_{}.csv", split.as_str()));
            write(&csv_path, &metrics_csv(&rows)?)?;
            let s = summarize(&rows)?;
            println!(
                "RV dice {:.4}±{:.4} jaccard {:.4}±{:.4} | FAZ dice {:.4}±{:.4} jaccard {:.4}±{:.4}",
                s.rv_dice.0, s.rv_dice.1, s.rv_jaccard.0, s.rv_jaccard.1, s.faz_dice.0, s.faz_dice.1, s.faz_jaccard.0, s.faz_jaccard.1
            );
        }
        Command::Predict {
            common,
            checkpoint,
            split,
            tta,
            gates,
            out_dir,
        } => {
            let model = model_from_checkpoint(&checkpoint)?;
            let samples = load(&common, split, model.config().roi_size)?;
            for s in &samples {
                let x = s.image.to_tensor(model.dtype(), model.device())?;
                let [rv, faz] = predict_maps(&model, &x, tta)?;
                write_prediction(&out_dir, s, &rv, &faz)?;
                if gates {
                    if let Some(g) = model.rv_gates(&x)? {
                        write_gate_dump(&out_dir, &s.id, &g)?;
                    }
                }
            }
            println!("wrote {} predictions to {}", samples.len(), out_dir.display());
        }
        Command::Ablate {
            common,
            study,
            out_dir,
        } => {
            let (cfg, tc) = resolve(&common)?;
            let train_set = load(&common, Split::Train, cfg.roi_size)?;
            let test_set = load(&common, Split::Test, cfg.roi_size)?;
            let lw = LossWeights::for_field(common.field);
            let rows = ablate(study, &cfg, &train_set, &test_set, &tc, &lw, &RunOutput::to(&out_dir), &mut |r| {
                println!(
                    "row {} {:?} rv {:.4} faz {:.4}",
                    r.id, r.flags, r.metrics.rv_dice.0, r.metrics.faz_dice.0
                )
            })?;
            write(&out_dir.join(format!("ablation_{study}.csv")), &ablation_csv(study, &rows)?)?;
            write_ablation_bars(&out_dir, study, &rows)?;
        }
        Command::Synth {
            out_dir,
            field,
            train,
            val,
            test,
            size,
            seed,
        } => {
            let all = synth_generate(train + val + test, (size, size), seed);
            let (tr, rest) = all.split_at(train);
            let (va, te) = rest.split_at(val);
            write_dataset(&out_dir, field, &[(Split::Train, tr), (Split::Val, va), (Split::Test, te)])?;
            println!("wrote {} samples to {}", all.len(), out_dir.join(field.as_str()).display());
        }
        Command::Params { config, model } => {
            let mut file = read_config(config.as_deref())?;
            apply_model(&mut file.model, &model);
            let m = JointModel::new(&file.model, DType::F32, &Device::Cpu)?;
            println!("{}", m.param_report());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
