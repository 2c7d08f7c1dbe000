//! Explicit transient heat conduction over a growing hexahedral domain.
//!
//! One step advances nodal temperatures with a lumped capacitance:
//!
//! ```text
//! T'_i = T_i + dt / M_i * (R_G + R_F - R_C - R_R - K T)_i
//! ```
//!
//! where `R_F` is absorbed laser heat (raises `T`), `R_C` and `R_R` are
//! convective and radiative losses evaluated at `T` (lower `T`) and `R_G`
//! is volumetric generation. Nodes on the substrate bottom are then held at
//! `T_amb`, and nodes first activated at the next step start at `T_deposit`.

pub mod element;
pub mod history;
mod kernel;
pub mod shape;
mod sim;

use thiserror::Error;

use crate::autodiff::AdError;

pub use kernel::{ConstantPower, FemStepKernel, PhysicsIds};
pub use sim::{run_forward, stability_limit, Simulation, ThermalHistory, ThermalState, Topology};

/// Stefan-Boltzmann constant, W/(m^2 K^4).
pub const SIGMA_SB: f64 = 5.670374419e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("solution blew up at step {step} (max |T| = {max_abs:e})")]
    BlowUp { step: usize, max_abs: f64 },
    #[error("time step {dt:e} s exceeds the stability limit {dt_max:e} s (set allow_unstable to override)")]
    Unstable { dt: f64, dt_max: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tape(#[from] AdError),
}

/// Material and environment properties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    /// Density, kg/m^3.
    pub rho: f64,
    /// Specific heat capacity, J/(kg K).
    pub cp: f64,
    /// Conductivity, W/(m K).
    pub k: f64,
    /// Convection coefficient, W/(m^2 K).
    pub h_conv: f64,
    pub emissivity: f64,
    pub t_amb: f64,
    pub t_melt: f64,
    /// Initial temperature of newly activated nodes.
    pub t_deposit: f64,
    /// Volumetric generation, W/m^3.
    pub s_vol: f64,
}

impl Default for MaterialParams {
    /// Stainless-steel-like handbook values.
    fn default() -> Self {
        MaterialParams {
            rho: 7800.0,
            cp: 500.0,
            k: 16.0,
            h_conv: 20.0,
            emissivity: 0.7,
            t_amb: 300.0,
            t_melt: 1700.0,
            t_deposit: 300.0,
            s_vol: 0.0,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<(), FemError> {
        let positive = [
            ("rho", self.rho),
            ("cp", self.cp),
            ("k", self.k),
            ("t_amb", self.t_amb),
            ("t_melt", self.t_melt),
            ("t_deposit", self.t_deposit),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FemError::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.h_conv >= 0.0 && self.h_conv.is_finite()) {
            return Err(FemError::InvalidArgument(format!(
                "h_conv must be >= 0, got {}",
                self.h_conv
            )));
        }
        if !(0.0..=1.0).contains(&self.emissivity) {
            return Err(FemError::InvalidArgument(format!(
                "emissivity must lie in [0, 1], got {}",
                self.emissivity
            )));
        }
        if !self.s_vol.is_finite() {
            return Err(FemError::InvalidArgument("s_vol must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaserParams {
    /// Nominal power, W.
    pub power: f64,
    /// Gaussian beam radius, m.
    pub beam_radius: f64,
    /// Absorbed fraction of nominal power.
    pub absorptivity: f64,
}

impl Default for LaserParams {
    fn default() -> Self {
        LaserParams {
            power: 300.0,
            beam_radius: 1e-3,
            absorptivity: 1.0,
        }
    }
}

impl LaserParams {
    pub fn validate(&self) -> Result<(), FemError> {
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return Err(FemError::InvalidArgument(format!(
                "power must be >= 0, got {}",
                self.power
            )));
        }
        if !(self.beam_radius > 0.0 && self.beam_radius.is_finite()) {
            return Err(FemError::InvalidArgument(format!(
                "beam_radius must be positive, got {}",
                self.beam_radius
            )));
        }
        if !(self.absorptivity > 0.0 && self.absorptivity <= 1.0) {
            return Err(FemError::InvalidArgument(format!(
                "absorptivity must lie in (0, 1], got {}",
                self.absorptivity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub record_stride: usize,
    /// Assembly always reduces in fixed element order; kept for configuration compatibility.
    pub deterministic: bool,
    pub allow_unstable: bool,
    /// Hold the substrate bottom at `T_amb`.
    pub fix_bottom: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1e-2,
            n_steps: 100,
            record_stride: 1,
            deterministic: true,
            allow_unstable: false,
            fix_bottom: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), FemError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(FemError::InvalidArgument(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.n_steps == 0 {
            return Err(FemError::InvalidArgument("n_steps must be >= 1".into()));
        }
        if self.record_stride == 0 {
            return Err(FemError::InvalidArgument(
                "record_stride must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Scalar values of every differentiable physical quantity for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Physics {
    pub rho: f64,
    pub cp: f64,
    pub k: f64,
    pub h_conv: f64,
    pub emissivity: f64,
    pub beam_radius: f64,
    pub absorptivity: f64,
}

impl Physics {
    pub fn new(material: &MaterialParams, laser: &LaserParams) -> Self {
        Physics {
            rho: material.rho,
            cp: material.cp,
            k: material.k,
            h_conv: material.h_conv,
            emissivity: material.emissivity,
            beam_radius: laser.beam_radius,
            absorptivity: laser.absorptivity,
        }
    }
}
