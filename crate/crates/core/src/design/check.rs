//! Finite-difference check of the full solver gradient on a smooth history loss.

use std::sync::Arc;

use super::cases::{MeshSpec, PathSpec, Scenario};
use super::loss::{loss_case2, TargetHistory};
use super::DesignError;
use crate::autodiff::{grad_check, AdError, GradCheckReport, ParamSet, Tape};
use crate::fem::{run_forward, ConstantPower, LaserParams, MaterialParams, PhysicsIds, SimConfig};
use crate::toolpath::Strategy;

/// Parameters checked when none are named.
pub const DEFAULT_CHECK_PARAMS: [&str; 6] =
    ["cp", "k", "h_conv", "power", "beam_radius", "emissivity"];

/// Two 4x4 build layers (32 elements) on a 6x6x2 substrate, 200 steps.
pub fn gradient_fixture() -> Scenario {
    Scenario {
        mesh: MeshSpec::Layered {
            substrate: [6, 6, 2],
            layers: vec![(4, 4), (4, 4)],
            element_size: [1e-3; 3],
        },
        path: PathSpec {
            strategy: Strategy::ZigZag,
            scan_speed: 10e-3,
            layer_dwell: 0.2,
        },
        material: MaterialParams::default(),
        laser: LaserParams {
            power: 100.0,
            beam_radius: 1e-3,
            absorptivity: 0.4,
        },
        sim: SimConfig {
            dt: 0.02,
            n_steps: 200,
            ..SimConfig::default()
        },
    }
}

/// Compares AD and central differences for `names` on the mean squared
/// normalized excess temperature `((T - T_amb) / T_REF)^2` over active nodes
/// at every recorded step.
pub fn history_grad_check(
    scenario: &Scenario,
    names: &[&str],
    eps: f64,
) -> Result<GradCheckReport, DesignError> {
    let (_, sim) = scenario.prepare()?;
    let mut params = ParamSet::new();
    let ids = PhysicsIds::register(&mut params, &scenario.material, &scenario.laser, names)?;
    let n_steps = sim.config.n_steps;
    let ambient = TargetHistory {
        birth_step: sim.schedule.birth_step.clone(),
        states: vec![vec![sim.t_amb; sim.n_nodes()]; n_steps + 1],
    };
    let build = |p: &ParamSet| -> Result<_, AdError> {
        let mut tape = Tape::new(p.clone());
        let power = tape.record_step(Box::new(ConstantPower::new(ids.power, n_steps)), &[])?;
        let mut history = run_forward(Arc::clone(&sim), tape, ids, power)
            .map_err(|e| AdError::InvalidArgument(e.to_string()))?;
        let loss = loss_case2(&mut history, &ambient)
            .map_err(|e| AdError::InvalidArgument(e.to_string()))?;
        Ok((history.tape, loss))
    };
    Ok(grad_check(build, &params, eps)?)
}
