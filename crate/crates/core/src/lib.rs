//! Kernel multi-marker association tests for left-truncated competing-risks
//! survival data under a rank-based accelerated failure time null model.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`, with `*32` variants for `f32`.

pub mod aft;
pub mod assoc;
pub mod asymptotics;
pub mod data;
pub mod error;
pub mod kernels;
pub mod optim;
pub mod quadform;
pub mod scalar;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Dataset = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type SurvivalRecord = data::SurvivalRecord<f64>;
pub type SurvivalRecord32 = data::SurvivalRecord<f32>;
pub type LabeledMatrix = data::LabeledMatrix<f64>;
pub type NullFit<'a> = aft::NullFit<'a, f64>;
pub type NullFit32<'a> = aft::NullFit<'a, f32>;
pub type StepFunction = aft::StepFunction<f64>;
pub type KernelMatrix = kernels::KernelMatrix<f64>;
pub type KernelMatrix32 = kernels::KernelMatrix<f32>;
pub type SlopeEstimates = asymptotics::SlopeEstimates<f64>;
pub type NullContext<'f, 'd> = assoc::NullContext<'f, 'd, f64>;

pub use assoc::{Method, TestOptions, TestResult};
pub use kernels::KernelSpec;
pub use sim::{Scenario, ScenarioKind, StudyConfig, StudyReport};
