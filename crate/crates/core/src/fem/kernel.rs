use std::sync::Arc;

use super::sim::{Simulation, StepGrads, STEP_KERNEL};
use super::{FemError, LaserParams, MaterialParams, Physics};
use crate::autodiff::{AdjointSink, Kernel, KernelInputs, ParamId, ParamSet};

/// Parameter ids of the differentiable physical scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhysicsIds {
    pub rho: ParamId,
    pub cp: ParamId,
    pub k: ParamId,
    pub h_conv: ParamId,
    pub emissivity: ParamId,
    pub beam_radius: ParamId,
    pub absorptivity: ParamId,
    /// Constant laser power, used by [`ConstantPower`].
    pub power: ParamId,
}

impl PhysicsIds {
    pub const NAMES: [&'static str; 8] = [
        "rho",
        "cp",
        "k",
        "h_conv",
        "emissivity",
        "beam_radius",
        "absorptivity",
        "power",
    ];

    /// Adds the eight scalars to `params`; those listed in `grad` require gradients.
    pub fn register(
        params: &mut ParamSet,
        material: &MaterialParams,
        laser: &LaserParams,
        grad: &[&str],
    ) -> Result<Self, FemError> {
        if let Some(bad) = grad.iter().find(|g| !Self::NAMES.contains(g)) {
            return Err(FemError::InvalidArgument(format!(
                "unknown differentiable parameter `{bad}`"
            )));
        }
        let values = [
            material.rho,
            material.cp,
            material.k,
            material.h_conv,
            material.emissivity,
            laser.beam_radius,
            laser.absorptivity,
            laser.power,
        ];
        let mut ids = [0; 8];
        for (i, name) in Self::NAMES.iter().enumerate() {
            ids[i] = params.add_scalar(*name, values[i], grad.contains(name))?;
        }
        Ok(PhysicsIds {
            rho: ids[0],
            cp: ids[1],
            k: ids[2],
            h_conv: ids[3],
            emissivity: ids[4],
            beam_radius: ids[5],
            absorptivity: ids[6],
            power: ids[7],
        })
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        Some(match name {
            "rho" => self.rho,
            "cp" => self.cp,
            "k" => self.k,
            "h_conv" => self.h_conv,
            "emissivity" => self.emissivity,
            "beam_radius" => self.beam_radius,
            "absorptivity" => self.absorptivity,
            "power" => self.power,
            _ => return None,
        })
    }

    pub fn physics(&self, params: &ParamSet) -> Physics {
        Physics {
            rho: params.scalar(self.rho),
            cp: params.scalar(self.cp),
            k: params.scalar(self.k),
            h_conv: params.scalar(self.h_conv),
            emissivity: params.scalar(self.emissivity),
            beam_radius: params.scalar(self.beam_radius),
            absorptivity: params.scalar(self.absorptivity),
        }
    }
}

/// Broadcasts the scalar power parameter to a per-step schedule.
pub struct ConstantPower {
    param: ParamId,
    n_steps: usize,
}

impl ConstantPower {
    pub fn new(param: ParamId, n_steps: usize) -> Self {
        ConstantPower { param, n_steps }
    }
}

impl Kernel for ConstantPower {
    fn name(&self) -> &str {
        "constant_power"
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        Ok(vec![args.params.scalar(self.param); self.n_steps])
    }

    fn backward(
        &self,
        _args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        sink.grads
            .accumulate(self.param, 0, out_adjoint.iter().sum());
    }
}

/// One explicit step `T^n -> T^{n+1}`. Inputs: `[T^n, power schedule]`.
pub struct FemStepKernel {
    sim: Arc<Simulation>,
    step: usize,
    ids: PhysicsIds,
}

impl FemStepKernel {
    pub fn new(sim: Arc<Simulation>, step: usize, ids: PhysicsIds) -> Self {
        FemStepKernel { sim, step, ids }
    }
}

impl Kernel for FemStepKernel {
    fn name(&self) -> &str {
        STEP_KERNEL
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        let phys = self.ids.physics(args.params);
        self.sim
            .step_forward(self.step, args.inputs[0], args.inputs[1][self.step], &phys)
            .map_err(|e| e.to_string())
    }

    fn backward(
        &self,
        args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        let phys = self.ids.physics(args.params);
        let power = args.inputs[1][self.step];
        let mut g = StepGrads::default();
        let lam =
            self.sim
                .step_adjoint(self.step, args.inputs[0], power, &phys, out_adjoint, &mut g);
        for (a, l) in sink.input(0).iter_mut().zip(&lam) {
            *a += l;
        }
        sink.input(1)[self.step] += g.power;
        let ids = self.ids;
        for (id, v) in [
            (ids.rho, g.rho),
            (ids.cp, g.cp),
            (ids.k, g.k),
            (ids.h_conv, g.h_conv),
            (ids.emissivity, g.emissivity),
            (ids.beam_radius, g.beam_radius),
            (ids.absorptivity, g.absorptivity),
        ] {
            sink.grads.accumulate(id, 0, v);
        }
    }
}
