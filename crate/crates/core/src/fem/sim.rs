use std::sync::{Arc, Mutex};

use log::warn;

use super::element::{gaussian_unit_flux, ElementMatrices, FaceQuadrature};
use super::kernel::{ConstantPower, FemStepKernel, PhysicsIds};
use super::{FemError, LaserParams, MaterialParams, Physics, SimConfig, SIGMA_SB};
use crate::autodiff::{AdError, ParamSet, SlotId, Tape};
use crate::mesh::{ElementId, ElementTag, FaceKey, HexMesh, FACE_NODES, FACE_POS_Z};
use crate::toolpath::{BirthSchedule, LaserState, Toolpath};

pub(crate) const STEP_KERNEL: &str = "fem_step";

/// Active entities between two consecutive element births.
#[derive(Debug)]
pub struct Topology {
    pub epoch: usize,
    pub active_elements: Vec<ElementId>,
    /// Lumped capacitance per node for `rho * cp = 1` (zero when inactive).
    pub capacity: Vec<f64>,
    /// Nodes advanced by the explicit update (active and not held fixed).
    pub updated: Vec<bool>,
    /// Free faces exchanging heat by convection and radiation.
    pub boundary_faces: Vec<FaceKey>,
    /// Free upward-facing faces with their height, candidates for laser flux.
    pub top_faces: Vec<(FaceKey, f64)>,
}

impl Topology {
    pub fn is_active(&self, node: usize) -> bool {
        self.capacity[node] > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermalState {
    pub step: usize,
    pub temperatures: Vec<f64>,
}

/// Per-step gradient contributions of the scalar physics parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct StepGrads {
    pub rho: f64,
    pub cp: f64,
    pub k: f64,
    pub h_conv: f64,
    pub emissivity: f64,
    pub beam_radius: f64,
    pub absorptivity: f64,
    pub power: f64,
}

/// Problem setup shared by every step kernel of a run. Immutable apart from
/// a one-entry topology cache.
pub struct Simulation {
    pub mesh: HexMesh,
    pub schedule: BirthSchedule,
    pub config: SimConfig,
    pub t_amb: f64,
    pub t_melt: f64,
    pub t_deposit: f64,
    pub s_vol: f64,
    pub sigma: f64,
    laser: Vec<LaserState>,
    elements: Vec<ElementMatrices>,
    faces: Vec<[FaceQuadrature; 6]>,
    adjacency: Vec<[Option<ElementId>; 6]>,
    epochs: Vec<usize>,
    node_birth: Vec<usize>,
    node_initial: Vec<f64>,
    fixed: Vec<bool>,
    unit_stability: f64,
    cache: Mutex<Option<Arc<Topology>>>,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("nodes", &self.mesh.n_nodes())
            .field("elements", &self.mesh.n_elements())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Simulation {
    /// `path = None` runs with the laser off throughout.
    pub fn new(
        mesh: HexMesh,
        path: Option<&Toolpath>,
        schedule: BirthSchedule,
        material: &MaterialParams,
        config: SimConfig,
    ) -> Result<Self, FemError> {
        config.validate()?;
        material.validate()?;
        mesh.validate()
            .map_err(|e| FemError::Geometry(e.to_string()))?;
        if schedule.birth_step.len() != mesh.n_elements() {
            return Err(FemError::InvalidArgument(format!(
                "birth schedule covers {} elements, mesh has {}",
                schedule.birth_step.len(),
                mesh.n_elements()
            )));
        }
        let laser = match path {
            Some(p) => p.sample_steps(config.dt, config.n_steps),
            None => vec![
                LaserState {
                    position: [0.0; 3],
                    on: false,
                };
                config.n_steps
            ],
        };
        let mut elements = Vec::with_capacity(mesh.n_elements());
        let mut faces = Vec::with_capacity(mesh.n_elements());
        let mut unit_stability = f64::INFINITY;
        for e in 0..mesh.n_elements() {
            let x = mesh.element_coords(e);
            let m = ElementMatrices::new(&x)?;
            for a in 0..8 {
                let row: f64 = m.conduction[a].iter().map(|v| v.abs()).sum();
                unit_stability = unit_stability.min(m.lumped[a] / row);
            }
            elements.push(m);
            let mut fq = Vec::with_capacity(6);
            for f in 0..6 {
                let pts = FACE_NODES[f].map(|a| x[a]);
                fq.push(FaceQuadrature::new(&pts)?);
            }
            faces.push(fq.try_into().expect("six faces"));
        }

        let mut node_birth = vec![usize::MAX; mesh.n_nodes()];
        let mut on_substrate = vec![false; mesh.n_nodes()];
        for (e, conn) in mesh.elements.iter().enumerate() {
            for &n in conn {
                node_birth[n] = node_birth[n].min(schedule.birth_step[e]);
                if mesh.tags[e] == ElementTag::Substrate {
                    on_substrate[n] = true;
                }
            }
        }
        let node_initial = (0..mesh.n_nodes())
            .map(|n| {
                if node_birth[n] == 0 && on_substrate[n] {
                    material.t_amb
                } else {
                    material.t_deposit
                }
            })
            .collect();

        let mut fixed = vec![false; mesh.n_nodes()];
        let adjacency = mesh.face_adjacency();
        if config.fix_bottom {
            let all: Vec<_> = (0..mesh.n_elements()).collect();
            for f in mesh
                .free_faces_with(&adjacency, &all)
                .map_err(|e| FemError::Geometry(e.to_string()))?
            {
                if f.dirichlet_eligible {
                    for n in mesh.face_nodes(f.key) {
                        fixed[n] = true;
                    }
                }
            }
        }

        let mut epochs = schedule.birth_step.clone();
        epochs.push(0);
        epochs.sort_unstable();
        epochs.dedup();

        Ok(Simulation {
            mesh,
            schedule,
            config,
            t_amb: material.t_amb,
            t_melt: material.t_melt,
            t_deposit: material.t_deposit,
            s_vol: material.s_vol,
            sigma: SIGMA_SB,
            laser,
            elements,
            faces,
            adjacency,
            epochs,
            node_birth,
            node_initial,
            fixed,
            unit_stability,
            cache: Mutex::new(None),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.mesh.n_nodes()
    }

    pub fn laser_at(&self, step: usize) -> LaserState {
        self.laser[step]
    }

    pub fn laser_states(&self) -> &[LaserState] {
        &self.laser
    }

    /// First step at which a node belongs to an active element.
    pub fn node_birth(&self, node: usize) -> usize {
        self.node_birth[node]
    }

    pub fn is_fixed(&self, node: usize) -> bool {
        self.fixed[node]
    }

    pub fn element_matrices(&self, e: ElementId) -> &ElementMatrices {
        &self.elements[e]
    }

    pub fn face_quadrature(&self, key: FaceKey) -> &FaceQuadrature {
        &self.faces[key.element][key.face as usize]
    }

    /// Time-step bound valid for every activation state of the mesh:
    /// `min_e min_a m^e_a / sum_c |K^e_ac|`, never larger than
    /// [`stability_limit`] for any active set.
    pub fn stability_bound(&self, rho: f64, cp: f64, k: f64) -> f64 {
        rho * cp / k * self.unit_stability
    }

    pub fn initial_temperatures(&self) -> Vec<f64> {
        self.node_initial.clone()
    }

    pub fn initial_state(&self) -> ThermalState {
        ThermalState {
            step: 0,
            temperatures: self.initial_temperatures(),
        }
    }

    fn epoch_of(&self, step: usize) -> usize {
        self.epochs.partition_point(|&b| b <= step) - 1
    }

    /// Active topology for the update from `step` to `step + 1`.
    pub fn topology(&self, step: usize) -> Arc<Topology> {
        let epoch = self.epoch_of(step);
        let mut cache = self.cache.lock().expect("topology cache poisoned");
        if let Some(t) = cache.as_ref() {
            if t.epoch == epoch {
                return Arc::clone(t);
            }
        }
        let topo = Arc::new(self.build_topology(epoch));
        *cache = Some(Arc::clone(&topo));
        topo
    }

    fn build_topology(&self, epoch: usize) -> Topology {
        let step = self.epochs[epoch];
        let active = self.schedule.active_at(step);
        let mut capacity = vec![0.0; self.n_nodes()];
        for &e in &active {
            for (a, &n) in self.mesh.elements[e].iter().enumerate() {
                capacity[n] += self.elements[e].lumped[a];
            }
        }
        let updated = (0..self.n_nodes())
            .map(|n| capacity[n] > 0.0 && !self.fixed[n])
            .collect();
        let free = self
            .mesh
            .free_faces_with(&self.adjacency, &active)
            .expect("active elements come from the mesh");
        let mut boundary_faces = Vec::with_capacity(free.len());
        let mut top_faces = Vec::new();
        for f in free {
            if f.dirichlet_eligible && self.config.fix_bottom {
                continue;
            }
            boundary_faces.push(f.key);
            if f.key.face == FACE_POS_Z {
                let z = self.mesh.nodes[self.mesh.face_nodes(f.key)[0]][2];
                top_faces.push((f.key, z));
            }
        }
        Topology {
            epoch,
            active_elements: active,
            capacity,
            updated,
            boundary_faces,
            top_faces,
        }
    }

    /// Upward faces reached by the beam: those between one and a half
    /// element heights below the laser plane and half an element above it.
    fn laser_faces<'a>(
        &self,
        topo: &'a Topology,
        laser: &LaserState,
    ) -> impl Iterator<Item = FaceKey> + 'a {
        let dz = self.mesh.element_size[2];
        let z = laser.position[2];
        topo.top_faces
            .iter()
            .filter(move |(_, fz)| *fz > z - 1.5 * dz && *fz <= z + 0.5 * dz)
            .map(|(k, _)| *k)
    }

    /// Net nodal heat rate `R_G + R_F - R_C - R_R - K T`, W.
    pub(crate) fn residual(
        &self,
        topo: &Topology,
        step: usize,
        t: &[f64],
        power: f64,
        phys: &Physics,
    ) -> Result<Vec<f64>, FemError> {
        let mut r = vec![0.0; self.n_nodes()];
        for &e in &topo.active_elements {
            let conn = &self.mesh.elements[e];
            let m = &self.elements[e];
            let te = conn.map(|n| t[n]);
            for a in 0..8 {
                let mut kt = 0.0;
                for c in 0..8 {
                    kt += m.conduction[a][c] * te[c];
                }
                r[conn[a]] += self.s_vol * m.lumped[a] - phys.k * kt;
            }
        }
        let amb4 = self.t_amb.powi(4);
        for &key in &topo.boundary_faces {
            let nodes = self.mesh.face_nodes(key);
            let fq = self.face_quadrature(key);
            let d4 = nodes.map(|n| t[n] - self.t_amb);
            for q in 0..4 {
                let dq = fq.interpolate(q, &d4);
                let tq = self.t_amb + dq;
                if !(tq > 0.0) {
                    return Err(FemError::NumericDomain(format!(
                        "non-positive absolute temperature {tq} on face {key:?} at step {step}"
                    )));
                }
                let flux = phys.h_conv * dq + phys.emissivity * self.sigma * (tq.powi(4) - amb4);
                for a in 0..4 {
                    r[nodes[a]] -= fq.n[q][a] * flux * fq.weight[q];
                }
            }
        }
        let laser = self.laser[step];
        if laser.on {
            for key in self.laser_faces(topo, &laser) {
                let nodes = self.mesh.face_nodes(key);
                let fq = self.face_quadrature(key);
                for q in 0..4 {
                    let dx = fq.point[q][0] - laser.position[0];
                    let dy = fq.point[q][1] - laser.position[1];
                    let qs = phys.absorptivity
                        * power
                        * gaussian_unit_flux(dx * dx + dy * dy, phys.beam_radius);
                    for a in 0..4 {
                        r[nodes[a]] += fq.n[q][a] * qs * fq.weight[q];
                    }
                }
            }
        }
        Ok(r)
    }

    /// Advances temperatures from `step` to `step + 1`.
    pub fn step_forward(
        &self,
        step: usize,
        t: &[f64],
        power: f64,
        phys: &Physics,
    ) -> Result<Vec<f64>, FemError> {
        if t.len() != self.n_nodes() {
            return Err(FemError::InvalidArgument(format!(
                "state has {} entries, mesh has {} nodes",
                t.len(),
                self.n_nodes()
            )));
        }
        let topo = self.topology(step);
        let r = self.residual(&topo, step, t, power, phys)?;
        let dt = self.config.dt;
        let rho_cp = phys.rho * phys.cp;
        let mut next = t.to_vec();
        for i in 0..self.n_nodes() {
            if topo.updated[i] {
                next[i] = t[i] + dt * r[i] / (rho_cp * topo.capacity[i]);
            } else if self.fixed[i] {
                next[i] = self.t_amb;
            }
            if self.node_birth[i] == step + 1 {
                next[i] = self.t_deposit;
            }
        }
        if let Some(bad) = next.iter().find(|v| !v.is_finite()) {
            let max_abs = next
                .iter()
                .filter(|v| v.is_finite())
                .fold(bad.abs(), |m, v| m.max(v.abs()));
            return Err(FemError::BlowUp {
                step: step + 1,
                max_abs,
            });
        }
        Ok(next)
    }

    /// Adjoint of [`Simulation::step_forward`]: given the adjoint of the
    /// output state, returns the adjoint of the input state and accumulates
    /// parameter sensitivities into `grads`.
    pub(crate) fn step_adjoint(
        &self,
        step: usize,
        t: &[f64],
        power: f64,
        phys: &Physics,
        adj_out: &[f64],
        grads: &mut StepGrads,
    ) -> Vec<f64> {
        let topo = self.topology(step);
        let r = self
            .residual(&topo, step, t, power, phys)
            .expect("backward replays a state that succeeded forward");
        let n = self.n_nodes();
        let dt = self.config.dt;
        let rho_cp = phys.rho * phys.cp;
        let mut lam = vec![0.0; n];
        let mut mu = vec![0.0; n];
        for i in 0..n {
            if self.node_birth[i] == step + 1 {
                continue;
            }
            if !topo.is_active(i) {
                lam[i] = adj_out[i];
            } else if topo.updated[i] {
                lam[i] = adj_out[i];
                mu[i] = dt * adj_out[i] / (rho_cp * topo.capacity[i]);
                grads.cp -= mu[i] * r[i] / phys.cp;
                grads.rho -= mu[i] * r[i] / phys.rho;
            }
        }

        for &e in &topo.active_elements {
            let conn = &self.mesh.elements[e];
            let m = &self.elements[e];
            let me = conn.map(|v| mu[v]);
            if me.iter().all(|&v| v == 0.0) {
                continue;
            }
            let te = conn.map(|v| t[v]);
            for a in 0..8 {
                let mut kt = 0.0;
                for c in 0..8 {
                    kt += m.conduction[a][c] * te[c];
                }
                grads.k -= me[a] * kt;
            }
            for c in 0..8 {
                let mut ktm = 0.0;
                for a in 0..8 {
                    ktm += m.conduction[a][c] * me[a];
                }
                lam[conn[c]] -= phys.k * ktm;
            }
        }

        let amb4 = self.t_amb.powi(4);
        for &key in &topo.boundary_faces {
            let nodes = self.mesh.face_nodes(key);
            let m4 = nodes.map(|v| mu[v]);
            if m4.iter().all(|&v| v == 0.0) {
                continue;
            }
            let fq = self.face_quadrature(key);
            let d4 = nodes.map(|v| t[v] - self.t_amb);
            for q in 0..4 {
                let dq = fq.interpolate(q, &d4);
                let tq = self.t_amb + dq;
                let mq = fq.interpolate(q, &m4) * fq.weight[q];
                grads.h_conv -= mq * dq;
                grads.emissivity -= mq * self.sigma * (tq.powi(4) - amb4);
                let slope = phys.h_conv + 4.0 * phys.emissivity * self.sigma * tq.powi(3);
                for a in 0..4 {
                    lam[nodes[a]] -= slope * mq * fq.n[q][a];
                }
            }
        }

        let laser = self.laser[step];
        if laser.on {
            let rb = phys.beam_radius;
            for key in self.laser_faces(&topo, &laser) {
                let nodes = self.mesh.face_nodes(key);
                let m4 = nodes.map(|v| mu[v]);
                let fq = self.face_quadrature(key);
                for q in 0..4 {
                    let dx = fq.point[q][0] - laser.position[0];
                    let dy = fq.point[q][1] - laser.position[1];
                    let r2 = dx * dx + dy * dy;
                    let g = gaussian_unit_flux(r2, rb);
                    let mq = fq.interpolate(q, &m4) * fq.weight[q];
                    grads.power += mq * phys.absorptivity * g;
                    grads.absorptivity += mq * power * g;
                    grads.beam_radius += mq
                        * phys.absorptivity
                        * power
                        * g
                        * (-2.0 / rb + 4.0 * r2 / (rb * rb * rb));
                }
            }
        }
        lam
    }

    /// Tape-free single step on an explicit state.
    pub fn time_step(
        &self,
        state: &ThermalState,
        phys: &Physics,
        power: f64,
    ) -> Result<ThermalState, FemError> {
        if state.step >= self.config.n_steps {
            return Err(FemError::InvalidArgument(format!(
                "step {} is past the configured horizon {}",
                state.step, self.config.n_steps
            )));
        }
        Ok(ThermalState {
            step: state.step + 1,
            temperatures: self.step_forward(state.step, &state.temperatures, power, phys)?,
        })
    }

    /// Rejects `dt` above the stability bound unless overridden; warns above 90% of it.
    pub fn check_stability(&self, phys: &Physics) -> Result<(), FemError> {
        let dt_max = self.stability_bound(phys.rho, phys.cp, phys.k);
        let dt = self.config.dt;
        if dt > dt_max && !self.config.allow_unstable {
            return Err(FemError::Unstable { dt, dt_max });
        }
        if dt > 0.9 * dt_max {
            warn!("dt = {dt:e} s is above 90% of the stability limit {dt_max:e} s");
        }
        Ok(())
    }

    /// Forward run with a constant laser power parameter. Parameters named in
    /// `grad` (see [`PhysicsIds`]) are marked for differentiation.
    pub fn simulate(
        self: &Arc<Self>,
        material: &MaterialParams,
        laser: &LaserParams,
        grad: &[&str],
    ) -> Result<ThermalHistory, FemError> {
        let mut params = ParamSet::new();
        let ids = PhysicsIds::register(&mut params, material, laser, grad)?;
        let mut tape = Tape::new(params);
        let power = tape.record_step(
            Box::new(ConstantPower::new(ids.power, self.config.n_steps)),
            &[],
        )?;
        run_forward(Arc::clone(self), tape, ids, power)
    }
}

/// Gershgorin bound `min_i M_ii / sum_j |K_ij|` over the nodes of an active set.
pub fn stability_limit(
    sim: &Simulation,
    material: &MaterialParams,
    active: &[ElementId],
) -> Result<f64, FemError> {
    if active.is_empty() {
        return Err(FemError::InvalidArgument(
            "stability limit needs a non-empty active set".into(),
        ));
    }
    let mesh = &sim.mesh;
    let mut mass = vec![0.0; mesh.n_nodes()];
    let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(active.len() * 64);
    for &e in active {
        if e >= mesh.n_elements() {
            return Err(FemError::InvalidArgument(format!("unknown element {e}")));
        }
        let m = sim.element_matrices(e);
        let conn = &mesh.elements[e];
        for a in 0..8 {
            mass[conn[a]] += material.rho * material.cp * m.lumped[a];
            for c in 0..8 {
                entries.push((conn[a], conn[c], material.k * m.conduction[a][c]));
            }
        }
    }
    entries.sort_by_key(|&(i, j, _)| (i, j));
    let mut row_abs = vec![0.0; mesh.n_nodes()];
    let mut idx = 0;
    while idx < entries.len() {
        let (i, j, _) = entries[idx];
        let mut v = 0.0;
        while idx < entries.len() && entries[idx].0 == i && entries[idx].1 == j {
            v += entries[idx].2;
            idx += 1;
        }
        row_abs[i] += v.abs();
    }
    Ok((0..mesh.n_nodes())
        .filter(|&i| mass[i] > 0.0 && row_abs[i] > 0.0)
        .map(|i| mass[i] / row_abs[i])
        .fold(f64::INFINITY, f64::min))
}

/// Recorded forward run: one checkpoint slot per step plus the tape that
/// produced them.
pub struct ThermalHistory {
    pub sim: Arc<Simulation>,
    pub tape: Tape,
    pub ids: PhysicsIds,
    pub power: SlotId,
    pub initial: SlotId,
    /// `steps[n]` holds the slot of `T^n`; `steps[0] == initial`.
    pub steps: Vec<SlotId>,
}

impl std::fmt::Debug for ThermalHistory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThermalHistory")
            .field("n_steps", &self.n_steps())
            .field("n_nodes", &self.sim.n_nodes())
            .finish_non_exhaustive()
    }
}

impl ThermalHistory {
    pub fn n_steps(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn temps(&self, n: usize) -> &[f64] {
        self.tape.value(self.steps[n])
    }

    pub fn power_schedule(&self) -> &[f64] {
        self.tape.value(self.power)
    }

    /// Steps that enter losses and user-facing output: every `record_stride`-th step from the first.
    pub fn recorded_steps(&self) -> impl Iterator<Item = usize> {
        (self.sim.config.record_stride..=self.n_steps()).step_by(self.sim.config.record_stride)
    }

    /// Scalars held by the step checkpoints (`n_steps * n_nodes`).
    pub fn checkpoint_scalars(&self) -> usize {
        self.tape.stored_scalars(STEP_KERNEL)
    }

    /// Copies of all states `T^0 .. T^n`.
    pub fn to_vecs(&self) -> Vec<Vec<f64>> {
        (0..=self.n_steps())
            .map(|n| self.temps(n).to_vec())
            .collect()
    }
}

/// Records `n_steps` explicit steps on `tape`, reading laser power per step
/// from the `power` slot (length `n_steps`).
pub fn run_forward(
    sim: Arc<Simulation>,
    mut tape: Tape,
    ids: PhysicsIds,
    power: SlotId,
) -> Result<ThermalHistory, FemError> {
    let n_steps = sim.config.n_steps;
    if tape.value(power).len() != n_steps {
        return Err(FemError::InvalidArgument(format!(
            "power schedule has {} entries, expected {n_steps}",
            tape.value(power).len()
        )));
    }
    let phys = ids.physics(tape.params());
    phys_validate(&phys)?;
    sim.check_stability(&phys)?;
    let initial = tape.leaf(sim.initial_temperatures(), true);
    let mut steps = Vec::with_capacity(n_steps + 1);
    steps.push(initial);
    for n in 0..n_steps {
        let prev = *steps.last().expect("non-empty");
        let slot = tape
            .record_step(
                Box::new(FemStepKernel::new(Arc::clone(&sim), n, ids)),
                &[prev, power],
            )
            .map_err(|e| match e {
                AdError::Kernel { message, .. } => {
                    FemError::NumericDomain(format!("step {n}: {message}"))
                }
                other => FemError::Tape(other),
            })?;
        steps.push(slot);
    }
    Ok(ThermalHistory {
        sim,
        tape,
        ids,
        power,
        initial,
        steps,
    })
}

fn phys_validate(p: &Physics) -> Result<(), FemError> {
    let material = MaterialParams {
        rho: p.rho,
        cp: p.cp,
        k: p.k,
        h_conv: p.h_conv,
        emissivity: p.emissivity,
        ..MaterialParams::default()
    };
    material.validate()?;
    LaserParams {
        power: 0.0,
        beam_radius: p.beam_radius,
        absorptivity: p.absorptivity,
    }
    .validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, AdjointSink, Kernel, KernelInputs};
    use crate::mesh::{build_block_mesh, build_layered_mesh};
    use crate::toolpath::{birth_schedule, generate_toolpath, Strategy};

    /// `sum_n sum_i (T_i^n / 1000)^2` over all given state slots.
    struct HistorySquares;

    impl Kernel for HistorySquares {
        fn name(&self) -> &str {
            "history_squares"
        }

        fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
            Ok(vec![args
                .inputs
                .iter()
                .flat_map(|s| s.iter())
                .map(|t| (t / 1000.0).powi(2))
                .sum()])
        }

        fn backward(
            &self,
            args: &KernelInputs<'_>,
            _output: &[f64],
            out_adjoint: &[f64],
            sink: &mut AdjointSink<'_>,
        ) {
            for k in 0..args.inputs.len() {
                let t = args.inputs[k];
                for (a, v) in sink.input(k).iter_mut().zip(t) {
                    *a += out_adjoint[0] * 2.0 * v / 1e6;
                }
            }
        }
    }

    fn quiet_material() -> MaterialParams {
        MaterialParams {
            h_conv: 0.0,
            emissivity: 0.0,
            ..MaterialParams::default()
        }
    }

    #[test]
    fn uniform_field_without_flux_is_unchanged() {
        let mesh = build_block_mesh(2, 2, 2, [1e-3; 3], ElementTag::Substrate).unwrap();
        let n_el = mesh.n_elements();
        let config = SimConfig {
            fix_bottom: false,
            n_steps: 50,
            ..SimConfig::default()
        };
        let sim = Arc::new(
            Simulation::new(
                mesh,
                None,
                BirthSchedule::all_active(n_el),
                &quiet_material(),
                config,
            )
            .unwrap(),
        );
        let h = sim
            .simulate(&quiet_material(), &LaserParams::default(), &[])
            .unwrap();
        for n in 0..=50 {
            assert!(h.temps(n).iter().all(|&t| t == 300.0));
        }
    }

    #[test]
    fn insulated_element_conserves_energy() {
        let mesh = build_block_mesh(1, 1, 1, [1e-3; 3], ElementTag::Substrate).unwrap();
        let config = SimConfig {
            fix_bottom: false,
            dt: 0.02,
            n_steps: 10,
            ..SimConfig::default()
        };
        let material = quiet_material();
        let sim =
            Simulation::new(mesh, None, BirthSchedule::all_active(1), &material, config).unwrap();
        let phys = Physics::new(&material, &LaserParams::default());
        let mut state = sim.initial_state();
        state.temperatures = (0..8).map(|i| 300.0 + 50.0 * i as f64).collect();
        let m = sim.element_matrices(0).lumped;
        let energy = |t: &[f64]| t.iter().zip(&m).map(|(t, m)| t * m).sum::<f64>();
        let e0 = energy(&state.temperatures);
        for _ in 0..10 {
            state = sim.time_step(&state, &phys, 0.0).unwrap();
            assert!((energy(&state.temperatures) - e0).abs() <= 1e-12 * e0);
        }
    }

    #[test]
    fn substrate_only_stays_ambient() {
        let mesh = build_block_mesh(3, 3, 2, [1e-3; 3], ElementTag::Substrate).unwrap();
        let n_el = mesh.n_elements();
        let material = MaterialParams::default();
        let sim = Arc::new(
            Simulation::new(
                mesh,
                None,
                BirthSchedule::all_active(n_el),
                &material,
                SimConfig::default(),
            )
            .unwrap(),
        );
        let h = sim
            .simulate(&material, &LaserParams::default(), &[])
            .unwrap();
        assert!(h.temps(100).iter().all(|&t| t == 300.0));
        assert_eq!(h.checkpoint_scalars(), 100 * sim.n_nodes());
    }

    #[test]
    fn unstable_step_is_refused() {
        let mesh = build_block_mesh(1, 1, 1, [1e-3; 3], ElementTag::Substrate).unwrap();
        let material = MaterialParams::default();
        let alpha = material.k / (material.rho * material.cp);
        let dt_max = 3.0 * 1e-6 / (16.0 * alpha);
        let config = SimConfig {
            dt: 1.01 * dt_max,
            ..SimConfig::default()
        };
        let sim = Arc::new(
            Simulation::new(
                mesh.clone(),
                None,
                BirthSchedule::all_active(1),
                &material,
                config,
            )
            .unwrap(),
        );
        let err = sim
            .simulate(&material, &LaserParams::default(), &[])
            .unwrap_err();
        assert!(matches!(err, FemError::Unstable { .. }));
        let bound = stability_limit(&sim, &material, &[0]).unwrap();
        assert!((bound - dt_max).abs() <= 1e-12 * dt_max);
        let config = SimConfig {
            allow_unstable: true,
            n_steps: 2,
            ..config
        };
        let sim = Arc::new(
            Simulation::new(mesh, None, BirthSchedule::all_active(1), &material, config).unwrap(),
        );
        assert!(sim
            .simulate(&material, &LaserParams::default(), &[])
            .is_ok());
    }

    #[test]
    fn stability_limit_scales() {
        let mesh = build_layered_mesh([3, 3, 1], &[(1, 1)], [1e-3; 3]).unwrap();
        let n_el = mesh.n_elements();
        let material = MaterialParams::default();
        let sim = Simulation::new(
            mesh,
            None,
            BirthSchedule::all_active(n_el),
            &material,
            SimConfig::default(),
        )
        .unwrap();
        let all: Vec<_> = (0..n_el).collect();
        let base = stability_limit(&sim, &material, &all).unwrap();
        let k2 = MaterialParams {
            k: 2.0 * material.k,
            ..material
        };
        assert_eq!(stability_limit(&sim, &k2, &all).unwrap(), base / 2.0);
        let rho2 = MaterialParams {
            rho: 2.0 * material.rho,
            ..material
        };
        assert_eq!(stability_limit(&sim, &rho2, &all).unwrap(), base * 2.0);
        assert!(sim.stability_bound(material.rho, material.cp, material.k) <= base * (1.0 + 1e-12));
    }

    fn small_build() -> (HexMesh, Toolpath, BirthSchedule, SimConfig) {
        let mesh = build_layered_mesh([2, 2, 1], &[(2, 2)], [1e-3; 3]).unwrap();
        let path = generate_toolpath(&mesh, Strategy::ZigZag, 4e-3, 0.1).unwrap();
        let config = SimConfig {
            dt: 0.02,
            n_steps: 40,
            ..SimConfig::default()
        };
        let sched = birth_schedule(&mesh, &path, config.dt).unwrap();
        (mesh, path, sched, config)
    }

    #[test]
    fn laser_heats_the_build() {
        let (mesh, path, sched, config) = small_build();
        let material = MaterialParams::default();
        let sim = Arc::new(Simulation::new(mesh, Some(&path), sched, &material, config).unwrap());
        let h = sim
            .simulate(&material, &LaserParams::default(), &[])
            .unwrap();
        let peak = (0..=h.n_steps())
            .map(|n| h.temps(n).iter().cloned().fold(f64::MIN, f64::max))
            .fold(f64::MIN, f64::max);
        assert!(peak > 400.0, "peak {peak}");
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let (mesh, path, sched, config) = small_build();
        let material = MaterialParams {
            t_deposit: 500.0,
            ..MaterialParams::default()
        };
        let laser = LaserParams {
            absorptivity: 0.8,
            ..LaserParams::default()
        };
        let sim = Arc::new(Simulation::new(mesh, Some(&path), sched, &material, config).unwrap());
        let grad = [
            "rho",
            "cp",
            "k",
            "h_conv",
            "emissivity",
            "beam_radius",
            "absorptivity",
            "power",
        ];
        let mut params = ParamSet::new();
        let ids = PhysicsIds::register(&mut params, &material, &laser, &grad).unwrap();
        let build = |p: &ParamSet| {
            let mut tape = Tape::new(p.clone());
            let power = tape.record_step(
                Box::new(ConstantPower::new(ids.power, sim.config.n_steps)),
                &[],
            )?;
            let h = run_forward(Arc::clone(&sim), tape, ids, power)
                .map_err(|e| AdError::State(e.to_string()))?;
            let steps = h.steps.clone();
            let mut tape = h.tape;
            let loss = tape.record_step(Box::new(HistorySquares), &steps)?;
            Ok((tape, loss))
        };
        let report = grad_check(build, &params, 1e-6).unwrap();
        for e in &report.entries {
            assert!(e.ad != 0.0, "{e:?}");
        }
        assert!(report.max_rel_error < 1e-6, "{:?}", report.worst());
    }

    #[test]
    fn pre_birth_temperatures_do_not_matter() {
        let (mesh, path, sched, config) = small_build();
        let material = MaterialParams::default();
        let sim = Simulation::new(mesh, Some(&path), sched, &material, config).unwrap();
        let phys = Physics::new(&material, &LaserParams::default());
        let mut a = sim.initial_state();
        let mut b = sim.initial_state();
        let unborn: Vec<_> = (0..sim.n_nodes())
            .filter(|&n| sim.node_birth(n) > 0)
            .collect();
        assert!(!unborn.is_empty());
        for &n in &unborn {
            b.temperatures[n] = 1234.5;
        }
        for _ in 0..config.n_steps {
            a = sim.time_step(&a, &phys, 300.0).unwrap();
            b = sim.time_step(&b, &phys, 300.0).unwrap();
            for n in 0..sim.n_nodes() {
                if sim.node_birth(n) <= a.step {
                    assert_eq!(a.temperatures[n], b.temperatures[n]);
                }
            }
        }
    }
}
