//! Training, evaluation, ablation and reporting around the joint model.

pub mod ablate;
pub mod error;
pub mod policy;
pub mod report;
pub mod schedule;
pub mod train;
pub mod tta;

pub use error::{HarnessError, Result};
pub use schedule::{lr_at, TrainConfig};
