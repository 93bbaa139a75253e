//! Model configuration, ablation toggles and loss weights.
//!
//! Configs are plain data. They are validated once against the dataset's image
//! size and are immutable afterwards.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Encoder depth of both U-Net skeletons. Not configurable.
pub const ENCODER_DEPTH: usize = 3;
/// Residual scale applied to the CFEB update. Not configurable.
pub const CFEB_RESIDUAL_SCALE: f64 = 0.3;

/// Module switches mirroring the ablation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub hdfe: bool,
    pub vmaf: bool,
    pub cmbf: bool,
    pub cfeb: bool,
    pub roi: bool,
    pub rv_prior: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            hdfe: true,
            vmaf: true,
            cmbf: true,
            cfeb: true,
            roi: true,
            rv_prior: true,
        }
    }
}

impl Toggles {
    pub fn all_off() -> Self {
        Self {
            hdfe: false,
            vmaf: false,
            cmbf: false,
            cfeb: false,
            roi: false,
            rv_prior: false,
        }
    }
}

/// How the directional snake convolutions sample their taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsConvMode {
    /// Ordinary padded 1x7 / 7x1 convolution.
    #[default]
    Plain,
    /// Each tap is displaced perpendicular to the kernel axis by a learned,
    /// per-position fractional offset (linear interpolation).
    Offset,
}

impl FromStr for DsConvMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(Self::Plain),
            "offset" => Ok(Self::Offset),
            other => Err(ConfigError::Invalid {
                field: "dsconv_mode",
                reason: format!("{other:?} is neither plain nor offset"),
            }),
        }
    }
}

/// OCTA-500 field of view. Selects the FAZ task weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Field {
    #[default]
    #[serde(rename = "3M")]
    ThreeMm,
    #[serde(rename = "6M")]
    SixMm,
}

impl Field {
    pub fn as_str(self) -> &'static str {
        match self {
            Field::ThreeMm => "3M",
            Field::SixMm => "6M",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Field {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "3M" | "OCTA_3M" => Ok(Field::ThreeMm),
            "6M" | "OCTA_6M" => Ok(Field::SixMm),
            other => Err(ConfigError::Invalid {
                field: "field",
                reason: format!("{other:?} is neither 3M nor 6M"),
            }),
        }
    }
}

/// Architecture hyperparameters and ablation toggles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub encoder_depth: usize,
    /// State dimension N of every selective scan.
    pub ssm_state_dim: usize,
    pub dropout_rate: f64,
    pub roi_size: usize,
    pub residual_scale_cfeb: f64,
    pub toggles: Toggles,
    pub dsconv_mode: DsConvMode,
    /// Enables the circular foveal mask inside CFEB.
    pub cfeb_mask: bool,
    /// Detach the vessel prior before it enters the FAZ branch.
    pub stop_rv_gradient: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 32,
            encoder_depth: ENCODER_DEPTH,
            ssm_state_dim: 16,
            dropout_rate: 0.1,
            roi_size: 224,
            residual_scale_cfeb: CFEB_RESIDUAL_SCALE,
            toggles: Toggles::default(),
            dsconv_mode: DsConvMode::Plain,
            cfeb_mask: true,
            stop_rv_gradient: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Channel width of encoder stage `stage` (0-based); the bottleneck is
    /// `stage == ENCODER_DEPTH`.
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Input channel count of the FAZ branch.
    pub fn faz_in_channels(&self) -> usize {
        if self.toggles.rv_prior {
            self.in_channels + 1
        } else {
            self.in_channels
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("model config serializes")
    }
}

/// Checks `cfg` against the image size of the dataset it will be trained on.
pub fn validate_config(
    cfg: ModelConfig,
    dataset_hw: (usize, usize),
) -> Result<ModelConfig, ConfigError> {
    if cfg.base_channels == 0 || cfg.base_channels % 4 != 0 {
        return Err(ConfigError::BadChannels(cfg.base_channels));
    }
    let min_side = dataset_hw.0.min(dataset_hw.1);
    if cfg.roi_size > min_side {
        return Err(ConfigError::RoiTooLarge {
            roi: cfg.roi_size,
            min_side,
        });
    }
    if cfg.encoder_depth != ENCODER_DEPTH {
        return Err(ConfigError::FixedField {
            field: "encoder_depth",
            expected: ENCODER_DEPTH.to_string(),
            got: cfg.encoder_depth.to_string(),
        });
    }
    if cfg.residual_scale_cfeb != CFEB_RESIDUAL_SCALE {
        return Err(ConfigError::FixedField {
            field: "residual_scale_cfeb",
            expected: CFEB_RESIDUAL_SCALE.to_string(),
            got: cfg.residual_scale_cfeb.to_string(),
        });
    }
    if cfg.in_channels == 0 {
        return Err(ConfigError::Invalid {
            field: "in_channels",
            reason: "must be at least 1".into(),
        });
    }
    if cfg.ssm_state_dim == 0 {
        return Err(ConfigError::Invalid {
            field: "ssm_state_dim",
            reason: "must be at least 1".into(),
        });
    }
    if cfg.roi_size == 0 {
        return Err(ConfigError::Invalid {
            field: "roi_size",
            reason: "must be at least 1".into(),
        });
    }
    if !(0.0..1.0).contains(&cfg.dropout_rate) {
        return Err(ConfigError::Invalid {
            field: "dropout_rate",
            reason: format!("{} is outside [0, 1)", cfg.dropout_rate),
        });
    }
    Ok(cfg)
}

/// Combination weights of the RV loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RvWeights {
    pub dice: f64,
    pub boundary: f64,
    pub tversky: f64,
    pub hausdorff: f64,
}

/// Combination weights of the FAZ loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FazWeights {
    pub dice: f64,
    pub boundary: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rv: RvWeights,
    pub faz: FazWeights,
    pub lambda_rv: f64,
    pub lambda_faz: f64,
}

impl LossWeights {
    pub fn for_field(field: Field) -> Self {
        let lambda_faz = match field {
            Field::ThreeMm => 6.1,
            Field::SixMm => 4.0,
        };
        Self {
            rv: RvWeights {
                dice: 0.6,
                boundary: 0.2,
                tversky: 0.1,
                hausdorff: 0.1,
            },
            faz: FazWeights {
                dice: 0.8,
                boundary: 0.2,
            },
            lambda_rv: 1.0,
            lambda_faz,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_field(Field::ThreeMm)
    }
}
