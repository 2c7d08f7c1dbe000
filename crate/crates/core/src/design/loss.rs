use std::sync::Arc;

use super::DesignError;
use crate::autodiff::{AdjointSink, Kernel, KernelInputs, SlotId};
use crate::fem::{Simulation, ThermalHistory};
use crate::mesh::{GridIndex, NodeId};

/// Temperature normalization of the history losses, K.
pub const T_REF: f64 = 1000.0;

/// Reference temperatures `T^0..T^N` and the schedule they were produced with.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetHistory {
    pub birth_step: Vec<usize>,
    pub states: Vec<Vec<f64>>,
}

impl TargetHistory {
    pub fn from_history(history: &ThermalHistory) -> Self {
        TargetHistory {
            birth_step: history.sim.schedule.birth_step.clone(),
            states: history.to_vecs(),
        }
    }

    fn check(&self, history: &ThermalHistory) -> Result<(), DesignError> {
        if self.birth_step != history.sim.schedule.birth_step {
            return Err(DesignError::InvalidArgument(
                "target and run use different birth schedules".into(),
            ));
        }
        if self.states.len() != history.n_steps() + 1
            || self.states.iter().any(|s| s.len() != history.sim.n_nodes())
        {
            return Err(DesignError::InvalidArgument(format!(
                "target has {} states, run has {} steps of {} nodes",
                self.states.len(),
                history.n_steps() + 1,
                history.sim.n_nodes()
            )));
        }
        Ok(())
    }
}

/// Top-plane nodes of the topmost grid layer holding an active element at step `n`.
pub fn observed_top_nodes(sim: &Simulation, grid: &GridIndex, n: usize) -> Vec<NodeId> {
    let topo = sim.topology(n);
    let mesh = &sim.mesh;
    let Some(k_top) = topo
        .active_elements
        .iter()
        .map(|&e| grid.element_cell(mesh, e)[2])
        .max()
    else {
        return Vec::new();
    };
    let mut nodes: Vec<NodeId> = topo
        .active_elements
        .iter()
        .filter(|&&e| grid.element_cell(mesh, e)[2] == k_top)
        .flat_map(|&e| mesh.elements[e][4..8].to_vec())
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

/// Every node belonging to an active element at step `n`.
pub fn observed_active_nodes(sim: &Simulation, n: usize) -> Vec<NodeId> {
    let topo = sim.topology(n);
    (0..sim.n_nodes()).filter(|&i| topo.is_active(i)).collect()
}

struct Observation {
    /// Index into the kernel's input list.
    input: usize,
    nodes: Vec<NodeId>,
    target: Vec<f64>,
}

/// Mean of `((T - T_target) / T_REF)^2` over observed (step, node) pairs.
struct HistoryMse {
    obs: Arc<Vec<Observation>>,
    count: usize,
}

impl Kernel for HistoryMse {
    fn name(&self) -> &str {
        "history_mse"
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        let mut sum = 0.0;
        for o in self.obs.iter() {
            let t = args.inputs[o.input];
            for (&n, &tt) in o.nodes.iter().zip(&o.target) {
                let r = (t[n] - tt) / T_REF;
                sum += r * r;
            }
        }
        Ok(vec![sum / self.count as f64])
    }

    fn backward(
        &self,
        args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        let scale = out_adjoint[0] * 2.0 / (self.count as f64 * T_REF * T_REF);
        for o in self.obs.iter() {
            let t = args.inputs[o.input];
            let adj = sink.input(o.input);
            for (&n, &tt) in o.nodes.iter().zip(&o.target) {
                adj[n] += scale * (t[n] - tt);
            }
        }
    }
}

fn record_mse<F>(
    history: &mut ThermalHistory,
    target: &TargetHistory,
    observe: F,
) -> Result<SlotId, DesignError>
where
    F: Fn(&Simulation, usize) -> Vec<NodeId>,
{
    target.check(history)?;
    let mut inputs = Vec::new();
    let mut obs = Vec::new();
    let mut count = 0;
    for n in history.recorded_steps() {
        let nodes = observe(&history.sim, n);
        if nodes.is_empty() {
            continue;
        }
        count += nodes.len();
        obs.push(Observation {
            input: inputs.len(),
            target: nodes.iter().map(|&i| target.states[n][i]).collect(),
            nodes,
        });
        inputs.push(history.steps[n]);
    }
    if count == 0 {
        return Err(DesignError::InvalidArgument(
            "no observed nodes at any recorded step".into(),
        ));
    }
    Ok(history.tape.record_step(
        Box::new(HistoryMse {
            obs: Arc::new(obs),
            count,
        }),
        &inputs,
    )?)
}

/// Normalized MSE on the current top surface at every recorded step.
pub fn loss_case1(
    history: &mut ThermalHistory,
    target: &TargetHistory,
) -> Result<SlotId, DesignError> {
    let grid = GridIndex::new(&history.sim.mesh);
    record_mse(history, target, |sim, n| observed_top_nodes(sim, &grid, n))
}

/// Normalized MSE on all active nodes at every recorded step.
pub fn loss_case2(
    history: &mut ThermalHistory,
    target: &TargetHistory,
) -> Result<SlotId, DesignError> {
    record_mse(history, target, observed_active_nodes)
}

/// Mean of `((depth - target) / dz)^2` over a depth vector.
struct DepthMse {
    target: f64,
    dz: f64,
}

impl Kernel for DepthMse {
    fn name(&self) -> &str {
        "depth_mse"
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        let d = args.inputs[0];
        if d.is_empty() {
            return Err("empty depth trace".into());
        }
        let sum: f64 = d
            .iter()
            .map(|v| ((v - self.target) / self.dz).powi(2))
            .sum();
        Ok(vec![sum / d.len() as f64])
    }

    fn backward(
        &self,
        args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        let d = args.inputs[0];
        let scale = out_adjoint[0] * 2.0 / (d.len() as f64 * self.dz * self.dz);
        for (a, v) in sink.input(0).iter_mut().zip(d) {
            *a += scale * (v - self.target);
        }
    }
}

/// Depth-tracking loss on a recorded depth slot (skipped steps already excluded).
pub fn loss_case3(
    history: &mut ThermalHistory,
    depths: SlotId,
    target_depth: f64,
) -> Result<SlotId, DesignError> {
    if history.tape.value(depths).is_empty() {
        return Err(DesignError::InvalidArgument(
            "depth trace has no usable steps".into(),
        ));
    }
    let dz = history.sim.mesh.element_size[2];
    Ok(history.tape.record_step(
        Box::new(DepthMse {
            target: target_depth,
            dz,
        }),
        &[depths],
    )?)
}
