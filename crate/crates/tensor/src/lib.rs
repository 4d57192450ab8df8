//! Minimal CPU tensor library: dense tensors, a tape-based reverse-mode
//! autodiff [`Graph`], optimizers, schedules and a finite-difference
//! gradient checker.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient verification).

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod schedule;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimMode, OptimState};
pub use params::{Bound, GradSet, Param, ParamId, ParamSet};
pub use scalar::{DType, Scalar};
pub use schedule::{Schedule, ScheduleKind};
pub use tensor::{numel, Tensor};
