//! Melt-pool depth under the laser.
//!
//! At each laser-on step the temperature below the beam is interpolated on
//! four node planes (the current top plane and the three below it) with a
//! 9-node biquadratic fit, then the melt isotherm is located by linear
//! interpolation between the first pair of planes that brackets it.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::autodiff::{AdError, AdjointSink, Kernel, KernelInputs, SlotId};
use crate::fem::{Simulation, ThermalHistory};
use crate::mesh::{GridIndex, HexMesh, NodeId};

pub const N_LEVELS: usize = 4;
/// Width of the smooth lower clamp on depth, m.
pub const DELTA_CLAMP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeltPoolError {
    #[error("no interpolation stencil: {0}")]
    StencilUnavailable(String),
    #[error("singular interpolation system")]
    Singular,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// 3x3 node grid in one plane. Nodes are ordered row by row (`y` outer,
/// `x` inner) so index 4 is the center.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpStencil {
    pub level: usize,
    pub nodes: [NodeId; 9],
    pub xy: [[f64; 2]; 9],
    pub z: f64,
    /// Grid spacing used to scale local coordinates.
    pub spacing: [f64; 2],
}

fn basis(u: f64, v: f64) -> [f64; 9] {
    [
        1.0,
        u,
        v,
        u * v,
        u * u,
        v * v,
        u * u * v,
        u * v * v,
        u * u * v * v,
    ]
}

impl InterpStencil {
    pub fn center(&self) -> [f64; 2] {
        self.xy[4]
    }

    fn local(&self, p: [f64; 2]) -> (f64, f64) {
        let c = self.center();
        (
            (p[0] - c[0]) / self.spacing[0],
            (p[1] - c[1]) / self.spacing[1],
        )
    }

    /// Interpolation weights `w = A^-T basis(q)`, so that `T(q) = w . T_nodes`.
    pub fn weights(&self, q: [f64; 2]) -> Result<[f64; 9], MeltPoolError> {
        let mut a = SMatrix::<f64, 9, 9>::zeros();
        for i in 0..9 {
            let (u, v) = self.local(self.xy[i]);
            for (m, b) in basis(u, v).into_iter().enumerate() {
                a[(i, m)] = b;
            }
        }
        let (u, v) = self.local(q);
        let b = SVector::<f64, 9>::from(basis(u, v));
        let w = a
            .transpose()
            .lu()
            .solve(&b)
            .ok_or(MeltPoolError::Singular)?;
        if w.iter().any(|x| !x.is_finite()) {
            return Err(MeltPoolError::Singular);
        }
        Ok(std::array::from_fn(|i| w[i]))
    }
}

/// Biquadratic interpolation of 9 nodal values at `q`.
pub fn biquadratic_eval(
    stencil: &InterpStencil,
    values: &[f64; 9],
    q: [f64; 2],
) -> Result<f64, MeltPoolError> {
    let w = stencil.weights(q)?;
    Ok(w.iter().zip(values).map(|(w, t)| w * t).sum())
}

/// Center column search in grid plane `k`: the node nearest the laser among
/// those whose full 3x3 neighbourhood is present and active. Ties go to the
/// smaller node id. The laser must lie inside the stencil.
fn stencil_in_plane(
    mesh: &HexMesh,
    grid: &GridIndex,
    is_active: &dyn Fn(NodeId) -> bool,
    xy: [f64; 2],
    k: i64,
) -> Option<[NodeId; 9]> {
    let [dx, dy, _] = grid.size;
    let i0 = ((xy[0] - grid.origin[0]) / dx).round() as i64;
    let j0 = ((xy[1] - grid.origin[1]) / dy).round() as i64;
    let tie = 1e-9 * (dx * dx + dy * dy);
    let mut best: Option<(f64, [NodeId; 9])> = None;
    for j in j0 - 2..=j0 + 2 {
        for i in i0 - 2..=i0 + 2 {
            let mut nodes = [0; 9];
            let mut ok = true;
            'grid: for dj in -1..=1i64 {
                for di in -1..=1i64 {
                    match grid.node([i + di, j + dj, k]) {
                        Some(n) if is_active(n) => nodes[((dj + 1) * 3 + di + 1) as usize] = n,
                        _ => {
                            ok = false;
                            break 'grid;
                        }
                    }
                }
            }
            if !ok {
                continue;
            }
            let p = mesh.nodes[nodes[4]];
            let d2 = (p[0] - xy[0]).powi(2) + (p[1] - xy[1]).powi(2);
            let better = match &best {
                None => true,
                Some((bd, bn)) => d2 < bd - tie || ((d2 - bd).abs() <= tie && nodes[4] < bn[4]),
            };
            if better {
                best = Some((d2, nodes));
            }
        }
    }
    let (_, nodes) = best?;
    let c = mesh.nodes[nodes[4]];
    let inside =
        (xy[0] - c[0]).abs() <= dx * (1.0 + 1e-9) && (xy[1] - c[1]).abs() <= dy * (1.0 + 1e-9);
    inside.then_some(nodes)
}

fn make_stencil(
    mesh: &HexMesh,
    grid: &GridIndex,
    nodes: [NodeId; 9],
    level: usize,
) -> InterpStencil {
    InterpStencil {
        level,
        nodes,
        xy: nodes.map(|n| [mesh.nodes[n][0], mesh.nodes[n][1]]),
        z: mesh.nodes[nodes[4]][2],
        spacing: [grid.size[0], grid.size[1]],
    }
}

/// Stencils for all four levels. Level 0 is the node plane at (or just
/// below) the laser; each further level is one plane lower. A plane without
/// a complete active 3x3 grid around the beam makes the sample unavailable.
pub fn stencil_column(
    mesh: &HexMesh,
    grid: &GridIndex,
    is_active: &dyn Fn(NodeId) -> bool,
    laser: [f64; 3],
) -> Result<[InterpStencil; N_LEVELS], MeltPoolError> {
    let xy = [laser[0], laser[1]];
    let mut k = grid.plane_of(laser[2]);
    if grid.plane_z(k) > laser[2] + 1e-9 * grid.size[2] {
        k -= 1;
    }
    let k_min = grid.plane_of(mesh.z_min());
    if k < k_min + (N_LEVELS as i64 - 1) {
        return Err(MeltPoolError::StencilUnavailable(format!(
            "fewer than {} node planes below the laser at z = {:.6e}",
            N_LEVELS - 1,
            laser[2]
        )));
    }
    let top = match stencil_in_plane(mesh, grid, is_active, xy, k) {
        Some(nodes) => (k, nodes),
        None => {
            return Err(MeltPoolError::StencilUnavailable(format!(
                "no complete active 3x3 grid under ({:.6e}, {:.6e}) in the top plane",
                xy[0], xy[1]
            )))
        }
    };
    let mut out = Vec::with_capacity(N_LEVELS);
    out.push(make_stencil(mesh, grid, top.1, 0));
    for level in 1..N_LEVELS {
        let nodes =
            stencil_in_plane(mesh, grid, is_active, xy, top.0 - level as i64).ok_or_else(|| {
                MeltPoolError::StencilUnavailable(format!(
                    "level {level} below plane {} is incomplete",
                    top.0
                ))
            })?;
        out.push(make_stencil(mesh, grid, nodes, level));
    }
    Ok(out.try_into().expect("four levels"))
}

/// Stencil of a single level, see [`stencil_column`].
pub fn stencil_lookup(
    mesh: &HexMesh,
    is_active: &dyn Fn(NodeId) -> bool,
    laser: [f64; 3],
    level: usize,
) -> Result<InterpStencil, MeltPoolError> {
    if level >= N_LEVELS {
        return Err(MeltPoolError::InvalidArgument(format!(
            "level {level} outside 0..{N_LEVELS}"
        )));
    }
    let grid = GridIndex::new(mesh);
    let column = stencil_column(mesh, &grid, is_active, laser)?;
    Ok(column[level].clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthStatus {
    /// Isotherm between levels `i` and `i + 1`.
    Crossing(usize),
    /// Top level below melt, extrapolated from the top pair.
    Extrapolated,
    /// Top level below melt and not warmer than the level beneath it.
    NoMelt,
    /// Every level at or above melt; depth pinned to the deepest level.
    Saturated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthEval {
    pub depth: f64,
    /// `d depth / d T_level`.
    pub slope: [f64; N_LEVELS],
    pub status: DepthStatus,
}

fn softplus(x: f64, s: f64) -> (f64, f64) {
    let z = x / s;
    let (value, sig) = if z > 0.0 {
        let e = (-z).exp();
        (x + s * e.ln_1p(), 1.0 / (1.0 + e))
    } else {
        let e = z.exp();
        (s * e.ln_1p(), e / (1.0 + e))
    };
    (value, sig)
}

/// Melt isotherm depth from four level temperatures, top first.
pub fn pairwise_depth(
    temps: [f64; N_LEVELS],
    depths: [f64; N_LEVELS],
    t_melt: f64,
) -> Result<DepthEval, MeltPoolError> {
    pairwise_depth_with(temps, depths, t_melt, DELTA_CLAMP)
}

/// [`pairwise_depth`] with an explicit lower-clamp width `delta` (m).
pub fn pairwise_depth_with(
    temps: [f64; N_LEVELS],
    depths: [f64; N_LEVELS],
    t_melt: f64,
    delta: f64,
) -> Result<DepthEval, MeltPoolError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(MeltPoolError::InvalidArgument(format!(
            "clamp width must be positive, got {delta}"
        )));
    }
    if temps.iter().chain(&depths).any(|v| !v.is_finite()) {
        return Err(MeltPoolError::InvalidArgument(
            "non-finite level data".into(),
        ));
    }
    if depths.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(MeltPoolError::InvalidArgument(
            "level depths must increase".into(),
        ));
    }
    let linear = |i: usize| {
        let (t0, t1) = (temps[i], temps[i + 1]);
        let span = depths[i + 1] - depths[i];
        let raw = depths[i] + (t_melt - t0) * span / (t1 - t0);
        let mut slope = [0.0; N_LEVELS];
        // d raw / d t0 and d raw / d t1
        slope[i] = span * (t_melt - t1) / (t1 - t0).powi(2);
        slope[i + 1] = -span * (t_melt - t0) / (t1 - t0).powi(2);
        (raw, slope)
    };
    let (raw, mut slope, status) = if temps[0] < t_melt {
        if temps[0] <= temps[1] {
            return Ok(DepthEval {
                depth: 0.0,
                slope: [0.0; N_LEVELS],
                status: DepthStatus::NoMelt,
            });
        }
        let (raw, slope) = linear(0);
        (raw, slope, DepthStatus::Extrapolated)
    } else {
        match (0..N_LEVELS - 1).find(|&i| temps[i] >= t_melt && t_melt > temps[i + 1]) {
            Some(i) => {
                let (raw, slope) = linear(i);
                (raw, slope, DepthStatus::Crossing(i))
            }
            None => {
                return Ok(DepthEval {
                    depth: depths[N_LEVELS - 1],
                    slope: [0.0; N_LEVELS],
                    status: DepthStatus::Saturated,
                })
            }
        }
    };
    let (depth, gate) = softplus(raw - depths[0], delta);
    for s in &mut slope {
        *s *= gate;
    }
    // the smooth clamp can lift a crossing just above the last level by a few ulps
    let last = depths[N_LEVELS - 1];
    let depth = depths[0] + depth;
    if depth > last {
        slope = [0.0; N_LEVELS];
    }
    Ok(DepthEval {
        depth: depth.min(last),
        slope,
        status,
    })
}

/// Depth evaluation at one laser-on step.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRecord {
    /// State index `n` of `T^n`.
    pub step: usize,
    pub time: f64,
    pub position: [f64; 3],
    pub depth: f64,
    pub level_temps: [f64; N_LEVELS],
    pub skipped: bool,
    pub status: Option<DepthStatus>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DepthTrace {
    pub records: Vec<DepthRecord>,
}

impl DepthTrace {
    /// Depths of the steps that were not skipped.
    pub fn depths(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| !r.skipped)
            .map(|r| r.depth)
            .collect()
    }

    pub fn n_skipped(&self) -> usize {
        self.records.iter().filter(|r| r.skipped).count()
    }

    /// `step,time,x,y,depth_m,T_level0..T_level3,skipped_flag`
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(
            out,
            "step,time,x,y,depth_m,T_level0,T_level1,T_level2,T_level3,skipped_flag"
        )?;
        for r in &self.records {
            let t = r.level_temps;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.time,
                r.position[0],
                r.position[1],
                r.depth,
                t[0],
                t[1],
                t[2],
                t[3],
                u8::from(r.skipped)
            )?;
        }
        Ok(())
    }
}

type LevelWeights = [([NodeId; 9], [f64; 9]); N_LEVELS];

#[derive(Debug, Clone)]
struct PlannedSample {
    step: usize,
    time: f64,
    position: [f64; 3],
    levels: Result<LevelWeights, MeltPoolError>,
}

/// Stencils and interpolation weights for every laser-on step of a run.
/// Depends only on geometry, laser motion and the birth schedule.
///
/// State `T^n` is paired with the laser position of the step that produced
/// it (`n - 1`), for `n = 1..=n_steps`.
#[derive(Debug, Clone)]
pub struct DepthPlan {
    samples: Arc<Vec<PlannedSample>>,
    pub level_depths: [f64; N_LEVELS],
    pub t_melt: f64,
    /// Width of the smooth lower clamp, m.
    pub delta_clamp: f64,
}

impl DepthPlan {
    pub fn new(sim: &Simulation) -> Self {
        let mesh = &sim.mesh;
        let grid = GridIndex::new(mesh);
        let dz = mesh.element_size[2];
        let mut samples = Vec::new();
        for n in 1..=sim.config.n_steps {
            let laser = sim.laser_at(n - 1);
            if !laser.on {
                continue;
            }
            let topo = sim.topology(n);
            let active = |v: NodeId| topo.is_active(v);
            let levels = stencil_column(mesh, &grid, &active, laser.position).and_then(|column| {
                let xy = [laser.position[0], laser.position[1]];
                let mut out = Vec::with_capacity(N_LEVELS);
                for s in &column {
                    out.push((s.nodes, s.weights(xy)?));
                }
                Ok(out.try_into().expect("four levels"))
            });
            if let Err(e) = &levels {
                log::debug!("depth sample at step {n} skipped: {e}");
            }
            samples.push(PlannedSample {
                step: n,
                time: n as f64 * sim.config.dt,
                position: laser.position,
                levels,
            });
        }
        DepthPlan {
            samples: Arc::new(samples),
            level_depths: std::array::from_fn(|l| l as f64 * dz),
            t_melt: sim.t_melt,
            delta_clamp: DELTA_CLAMP,
        }
    }

    pub fn with_clamp(mut self, delta: f64) -> Self {
        self.delta_clamp = delta;
        self
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn n_usable(&self) -> usize {
        self.samples.iter().filter(|s| s.levels.is_ok()).count()
    }

    /// Evaluates depths given a lookup `n -> T^n`.
    pub fn evaluate_with<'a, F>(&self, state: F) -> Result<DepthTrace, MeltPoolError>
    where
        F: Fn(usize) -> &'a [f64],
    {
        let mut records = Vec::with_capacity(self.samples.len());
        for s in self.samples.iter() {
            let record = match &s.levels {
                Ok(levels) => {
                    let temps = level_temps(levels, state(s.step));
                    let eval = pairwise_depth_with(
                        temps,
                        self.level_depths,
                        self.t_melt,
                        self.delta_clamp,
                    )?;
                    if eval.status == DepthStatus::Saturated {
                        log::debug!("melt pool saturated at step {}", s.step);
                    }
                    DepthRecord {
                        step: s.step,
                        time: s.time,
                        position: s.position,
                        depth: eval.depth,
                        level_temps: temps,
                        skipped: false,
                        status: Some(eval.status),
                    }
                }
                Err(_) => DepthRecord {
                    step: s.step,
                    time: s.time,
                    position: s.position,
                    depth: 0.0,
                    level_temps: [f64::NAN; N_LEVELS],
                    skipped: true,
                    status: None,
                },
            };
            records.push(record);
        }
        Ok(DepthTrace { records })
    }

    pub fn evaluate(&self, history: &ThermalHistory) -> Result<DepthTrace, MeltPoolError> {
        self.evaluate_with(|n| history.temps(n))
    }

    /// Records the depth vector (one entry per usable sample) on the history's tape.
    pub fn record(&self, history: &mut ThermalHistory) -> Result<SlotId, AdError> {
        let inputs = history.steps[1..].to_vec();
        history
            .tape
            .record_step(Box::new(DepthKernel { plan: self.clone() }), &inputs)
    }
}

fn level_temps(levels: &LevelWeights, t: &[f64]) -> [f64; N_LEVELS] {
    levels.map(|(nodes, w)| nodes.iter().zip(&w).map(|(&n, w)| w * t[n]).sum())
}

/// Melt-pool depth trace of a finished run.
pub fn depth_trace(history: &ThermalHistory) -> Result<DepthTrace, MeltPoolError> {
    DepthPlan::new(&history.sim).evaluate(history)
}

/// Inputs: `[T^1, .., T^N]`. Output: depth per usable sample.
struct DepthKernel {
    plan: DepthPlan,
}

impl Kernel for DepthKernel {
    fn name(&self) -> &str {
        "melt_depth"
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        let trace = self
            .plan
            .evaluate_with(|n| args.inputs[n - 1])
            .map_err(|e| e.to_string())?;
        Ok(trace.depths())
    }

    fn backward(
        &self,
        args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        let usable = self
            .plan
            .samples
            .iter()
            .filter_map(|s| s.levels.as_ref().ok().map(|l| (s.step, l)));
        for ((step, levels), &g) in usable.zip(out_adjoint) {
            if g == 0.0 {
                continue;
            }
            let temps = level_temps(levels, args.inputs[step - 1]);
            let eval = pairwise_depth_with(
                temps,
                self.plan.level_depths,
                self.plan.t_melt,
                self.plan.delta_clamp,
            )
            .expect("replayed forward");
            let adj = sink.input(step - 1);
            for (l, (nodes, w)) in levels.iter().enumerate() {
                let s = g * eval.slope[l];
                if s == 0.0 {
                    continue;
                }
                for (&n, w) in nodes.iter().zip(w) {
                    adj[n] += s * w;
                }
            }
        }
    }
}
