//! The two 8-row ablation studies.

use std::fmt;
use std::str::FromStr;

use octaseg_core::dataio::OctaSample;
use octaseg_core::networks::JointModel;
use octaseg_core::objective::{summarize, MetricsSummary};
use octaseg_core::{validate_config, LossWeights, ModelConfig, Toggles};

use crate::error::{HarnessError, Result};
use crate::schedule::TrainConfig;
use crate::train::{evaluate, train, RunOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    /// HDFE, VMAF, CMBF with the FAZ-side modules off.
    Rv,
    /// CFEB, ROI, RV-knowledge with the RV-side modules on.
    Faz,
}

/// Toggle subsets in table order, as indices into the study's three modules.
const PATTERN: [&[usize]; 8] = [&[], &[0], &[1], &[2], &[0, 1], &[0, 2], &[1, 2], &[0, 1, 2]];

impl Study {
    pub fn columns(self) -> [&'static str; 3] {
        match self {
            Study::Rv => ["HDFE", "VMAF", "CMBF"],
            Study::Faz => ["CFEB", "ROI", "RV-knowledge"],
        }
    }

    /// Row `id` (1-based) as on/off flags over [`Study::columns`].
    pub fn flags(id: usize) -> [bool; 3] {
        let mut f = [false; 3];
        for &i in PATTERN[id - 1] {
            f[i] = true;
        }
        f
    }

    pub fn toggles(self, id: usize) -> Toggles {
        let [a, b, c] = Self::flags(id);
        match self {
            Study::Rv => Toggles {
                hdfe: a,
                vmaf: b,
                cmbf: c,
                ..Toggles::all_off()
            },
            Study::Faz => Toggles {
                cfeb: a,
                roi: b,
                rv_prior: c,
                ..Toggles::default()
            },
        }
    }

    pub fn rows(self) -> Vec<(usize, Toggles)> {
        (1..=8).map(|id| (id, self.toggles(id))).collect()
    }
}

impl FromStr for Study {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rv" => Ok(Study::Rv),
            "faz" => Ok(Study::Faz),
            other => Err(HarnessError::Config(format!("unknown study {other:?}, expected rv or faz"))),
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Study::Rv => "rv",
            Study::Faz => "faz",
        })
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub id: usize,
    pub flags: [bool; 3],
    pub num_params: usize,
    pub metrics: MetricsSummary,
}

/// Trains and evaluates every row of `study` from `base` (toggles replaced).
/// `on_row` is called after each row, e.g. for progress output.
pub fn ablate(
    study: Study,
    base: &ModelConfig,
    train_set: &[OctaSample],
    test_set: &[OctaSample],
    tc: &TrainConfig,
    lw: &LossWeights,
    out: &RunOutput,
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let hw = train_set
        .first()
        .map(|s| s.dims())
        .ok_or_else(|| HarnessError::Config("empty training set".into()))?;
    let mut rows = Vec::new();
    for (id, toggles) in study.rows() {
        let cfg = validate_config(ModelConfig { toggles, ..base.clone() }, hw)?;
        let model = JointModel::new(&cfg, candle_core::DType::F32, &candle_core::Device::Cpu)?;
        let row_out = RunOutput {
            dir: out.dir.as_ref().map(|d| d.join(format!("{study}_row{id}"))),
        };
        train(&model, train_set, &[], tc, lw, &row_out)?;
        let metrics = summarize(&evaluate(&model, test_set)?)?;
        let row = AblationRow {
            id,
            flags: Study::flags(id),
            num_params: model.num_params(),
            metrics,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Table CSV: ID, the three toggle columns (1 = on), then the four means.
pub fn ablation_csv(study: Study, rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| HarnessError::Core(octaseg_core::Error::Csv(e.to_string()));
    let [a, b, c] = study.columns();
    w.write_record(["ID", a, b, c, "RV-Dice", "RV-Jaccard", "FAZ-Dice", "FAZ-Jaccard"])
        .map_err(err)?;
    for r in rows {
        let m = &r.metrics;
        let mut rec = vec![r.id.to_string()];
        rec.extend(r.flags.iter().map(|&f| u8::from(f).to_string()));
        rec.extend(
            [m.rv_dice.0, m.rv_jaccard.0, m.faz_dice.0, m.faz_jaccard.0]
                .iter()
                .map(|v| format!("{v:.6}")),
        );
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| err(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
