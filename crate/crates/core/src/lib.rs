//! Two-stage retinal vessel (RV) and foveal avascular zone (FAZ) segmentation.
//!
//! The first stage (`RvMamba`) predicts a vessel probability map; the second
//! stage (`FazMamba`) sees the image, optionally stacked with that map as a
//! prior, centre-cropped to a region of interest. Both stages are U-Nets whose
//! blocks combine convolutional feature extractors with a four-direction
//! selective state-space scan.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod hdfe;
pub mod kernels;
pub mod layers;
pub mod networks;
pub mod objective;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod util;
pub mod vmaf;

pub use config::{validate_config, DsConvMode, Field, LossWeights, ModelConfig, Toggles};
pub use error::{Error, Result};
pub use tensor::FeatureMap;
