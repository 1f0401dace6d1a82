//! Self-calibrated illumination learning for low-light image enhancement.
//!
//! A weight-shared illumination estimator is unrolled over several stages,
//! each stage fed by a calibrator that re-targets the input towards the
//! current reflectance estimate. Only the estimator runs at inference.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SciError};
pub use imaging::ImageBuffer;
pub use losses::{LossBreakdown, LossConfig, SmoothStages};
pub use model::{CascadeMode, EstimatorArch, ModelWeights, StageTrace};
pub use tensor::{Real, Tensor};
pub use trainer::{train, TrainConfig};
