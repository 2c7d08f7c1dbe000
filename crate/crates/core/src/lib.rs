//! Differentiable thermal simulation of layer-by-layer metal deposition.
//!
//! Pipeline: [`mesh`] builds a structured hexahedral domain, [`toolpath`]
//! plans the laser path and element birth schedule, [`fem`] runs an explicit
//! transient conduction solve on an [`autodiff`] tape, [`meltpool`] extracts
//! melt-pool depth, and [`design`] optimizes process inputs against losses on
//! the recorded history. [`io`] holds the mesh, toolpath and birth file formats.

pub mod autodiff;
pub mod design;
pub mod fem;
pub mod io;
pub mod meltpool;
pub mod mesh;
pub mod toolpath;

use thiserror::Error;

/// Any library error, prefixed with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh: {0}")]
    Mesh(#[from] mesh::MeshError),
    #[error("toolpath: {0}")]
    Toolpath(#[from] toolpath::PathError),
    #[error("autodiff: {0}")]
    Autodiff(#[from] autodiff::AdError),
    #[error("fem: {0}")]
    Fem(#[from] fem::FemError),
    #[error("design: {0}")]
    Design(#[from] design::DesignError),
    #[error("meltpool: {0}")]
    MeltPool(#[from] meltpool::MeltPoolError),
    #[error("io: {0}")]
    Io(#[from] io::IoError),
}
