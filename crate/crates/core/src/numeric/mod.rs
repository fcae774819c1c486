//! Tensor arithmetic, reverse-mode differentiation and optimization.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod init;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{BatchStats, Binary, CustomBackward, Gradients, Graph, Unary, Var};
pub use init::{msra_init, msra_std};
pub use kernels::ConvGeom;
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::Tensor;

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.99;
/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;
