//! Optimization of process inputs against losses on simulated histories.

pub mod adam;
pub mod cases;
pub mod check;
pub mod loss;
pub mod mlp;
pub mod schedule;

use thiserror::Error;

use crate::autodiff::AdError;
use crate::fem::FemError;
use crate::meltpool::MeltPoolError;
use crate::mesh::MeshError;
use crate::toolpath::PathError;

pub use adam::Adam;
pub use cases::{
    run_case, CaseId, CaseProblem, CaseSpec, Evaluation, LogEntry, MeshSpec, OptimizationLog,
    OptimizerSpec, PathSpec, Scenario,
};
pub use check::{gradient_fixture, history_grad_check, DEFAULT_CHECK_PARAMS};
pub use loss::{loss_case1, loss_case2, loss_case3, TargetHistory, T_REF};
pub use schedule::PowerSchedule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Tape(#[from] AdError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    MeltPool(#[from] MeltPoolError),
}
