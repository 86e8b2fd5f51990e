//! Recurrent probabilistic trajectory modelling for robot telemetry:
//! training, calibrated out-of-distribution gates, temporal saliency and
//! root-cause diagnosis.

pub mod autodiff;
pub mod detect;
pub mod diagnosis;
pub mod error;
pub mod io;
pub mod kernels;
pub mod model;
pub mod par;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod trajectory;

pub use error::{RaptError, Result};
pub use par::ExecMode;
pub use tensor::Tensor;
pub use trajectory::TrajectoryLog;
