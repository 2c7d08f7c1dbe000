//! Case-study drivers: parameter calibration (case 1), power-schedule
//! recovery from a thermal target (case 2) and melt-pool depth control
//! (case 3).

use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::loss::{loss_case1, loss_case2, loss_case3, TargetHistory};
use super::mlp::{self, MlpSchedule};
use super::schedule::PowerSchedule;
use super::DesignError;
use crate::autodiff::{ParamSet, Tape};
use crate::fem::{
    run_forward, LaserParams, MaterialParams, PhysicsIds, SimConfig, Simulation, ThermalHistory,
};
use crate::meltpool::{DepthPlan, DepthTrace, DELTA_CLAMP};
use crate::mesh::{
    build_block_mesh, build_hourglass_mesh, build_layered_mesh, ElementTag, HexMesh, HourglassSpec,
};
use crate::toolpath::{birth_schedule, generate_toolpath, BirthSchedule, Strategy, Toolpath};

/// Scalars calibrated in case 1, in this order.
pub const CASE1_PARAMS: [&str; 5] = ["cp", "k", "h_conv", "power", "beam_radius"];
/// Lower bound on the scaled case-1 variables after each update.
const SCALED_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum MeshSpec {
    /// Substrate only, no build and no laser path.
    Block {
        extent: [usize; 3],
        element_size: [f64; 3],
    },
    Layered {
        substrate: [usize; 3],
        layers: Vec<(usize, usize)>,
        element_size: [f64; 3],
    },
    Hourglass(HourglassSpec),
}

impl MeshSpec {
    pub fn build(&self) -> Result<HexMesh, DesignError> {
        Ok(match self {
            MeshSpec::Block {
                extent,
                element_size,
            } => build_block_mesh(
                extent[0],
                extent[1],
                extent[2],
                *element_size,
                ElementTag::Substrate,
            )?,
            MeshSpec::Layered {
                substrate,
                layers,
                element_size,
            } => build_layered_mesh(*substrate, layers, *element_size)?,
            MeshSpec::Hourglass(spec) => build_hourglass_mesh(spec)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSpec {
    pub strategy: Strategy,
    pub scan_speed: f64,
    pub layer_dwell: f64,
}

/// Everything needed for one forward simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub mesh: MeshSpec,
    pub path: PathSpec,
    pub material: MaterialParams,
    pub laser: LaserParams,
    pub sim: SimConfig,
}

impl Scenario {
    /// Mesh, toolpath, birth schedule and solver setup. A mesh without
    /// build elements gets no toolpath and is active from step 0.
    pub fn prepare(&self) -> Result<(Option<Toolpath>, Arc<Simulation>), DesignError> {
        let mesh = self.mesh.build()?;
        if mesh.build_elements().next().is_none() {
            let schedule = BirthSchedule::all_active(mesh.n_elements());
            let sim = Simulation::new(mesh, None, schedule, &self.material, self.sim)?;
            return Ok((None, Arc::new(sim)));
        }
        let path = generate_toolpath(
            &mesh,
            self.path.strategy,
            self.path.scan_speed,
            self.path.layer_dwell,
        )?;
        let schedule = birth_schedule(&mesh, &path, self.sim.dt)?;
        let sim = Simulation::new(mesh, Some(&path), schedule, &self.material, self.sim)?;
        Ok((Some(path), Arc::new(sim)))
    }

    /// Steps needed for the laser to finish the path (0 without a build).
    pub fn path_steps(&self) -> Result<usize, DesignError> {
        let mesh = self.mesh.build()?;
        if mesh.build_elements().next().is_none() {
            return Ok(0);
        }
        let path = generate_toolpath(
            &mesh,
            self.path.strategy,
            self.path.scan_speed,
            self.path.layer_dwell,
        )?;
        Ok((path.end_time() / self.sim.dt).ceil() as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaseId {
    One,
    Two,
    Three,
}

impl CaseId {
    pub fn number(self) -> u8 {
        match self {
            CaseId::One => 1,
            CaseId::Two => 2,
            CaseId::Three => 3,
        }
    }
}

impl FromStr for CaseId {
    type Err = DesignError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "1" | "case1" => Ok(CaseId::One),
            "2" | "case2" => Ok(CaseId::Two),
            "3" | "case3" => Ok(CaseId::Three),
            other => Err(DesignError::InvalidArgument(format!(
                "unknown case `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl OptimizerSpec {
    pub fn with_lr(lr: f64, iterations: usize) -> Self {
        OptimizerSpec {
            iterations,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseSpec {
    pub case: CaseId,
    /// For case 1 the material and laser values are the hidden ground truth.
    pub scenario: Scenario,
    pub optimizer: OptimizerSpec,
    /// Case 1 initial draw, as multiples of the true values.
    pub init_range: (f64, f64),
    /// Case 2 target power.
    pub reference: PowerSchedule,
    /// Case 3 target depth, m.
    pub target_depth: f64,
    /// Case 3 lower-clamp width of the depth extraction, m.
    pub delta_clamp: f64,
}

impl CaseSpec {
    /// Desk-scale defaults for each case.
    pub fn desk(case: CaseId) -> Self {
        let material = MaterialParams::default();
        match case {
            CaseId::One => CaseSpec {
                case,
                scenario: Scenario {
                    mesh: MeshSpec::Layered {
                        substrate: [5, 5, 2],
                        layers: vec![(3, 3), (3, 3)],
                        element_size: [1e-3; 3],
                    },
                    path: PathSpec {
                        strategy: Strategy::ZigZag,
                        scan_speed: 5e-3,
                        layer_dwell: 0.5,
                    },
                    material,
                    laser: LaserParams {
                        power: 100.0,
                        beam_radius: 1e-3,
                        absorptivity: 0.4,
                    },
                    sim: SimConfig {
                        dt: 8e-3,
                        n_steps: 620,
                        record_stride: 5,
                        ..SimConfig::default()
                    },
                },
                optimizer: OptimizerSpec::with_lr(0.05, 60),
                init_range: (0.5, 1.5),
                reference: PowerSchedule::reference(),
                target_depth: 0.0,
                delta_clamp: DELTA_CLAMP,
            },
            CaseId::Two => CaseSpec {
                case,
                scenario: Scenario {
                    mesh: MeshSpec::Layered {
                        substrate: [6, 6, 2],
                        layers: vec![(4, 4), (4, 4), (4, 4)],
                        element_size: [1e-3; 3],
                    },
                    path: PathSpec {
                        strategy: Strategy::ZigZag,
                        scan_speed: 4e-3,
                        layer_dwell: 0.3,
                    },
                    material,
                    laser: LaserParams {
                        power: 0.0,
                        beam_radius: 1e-3,
                        absorptivity: 0.3,
                    },
                    sim: SimConfig {
                        dt: 8e-3,
                        n_steps: 1870,
                        record_stride: 1,
                        ..SimConfig::default()
                    },
                },
                optimizer: OptimizerSpec {
                    beta2: 0.99,
                    ..OptimizerSpec::with_lr(2e-2, 300)
                },
                init_range: (0.5, 1.5),
                reference: PowerSchedule::reference(),
                target_depth: 0.0,
                delta_clamp: DELTA_CLAMP,
            },
            CaseId::Three => CaseSpec {
                case,
                scenario: Scenario {
                    mesh: MeshSpec::Hourglass(HourglassSpec {
                        layer_half_widths: vec![5, 4, 3, 3, 4, 5],
                        substrate_extent: [7, 7, 3],
                        element_size: [1e-3; 3],
                    }),
                    path: PathSpec {
                        strategy: Strategy::ZigZag,
                        scan_speed: 8e-3,
                        layer_dwell: 0.3,
                    },
                    material: MaterialParams {
                        t_deposit: 1000.0,
                        ..material
                    },
                    laser: LaserParams {
                        power: 0.0,
                        beam_radius: 1e-3,
                        absorptivity: 0.2,
                    },
                    sim: SimConfig {
                        dt: 8e-3,
                        n_steps: 2040,
                        record_stride: 1,
                        ..SimConfig::default()
                    },
                },
                optimizer: OptimizerSpec::with_lr(1e-2, 200),
                init_range: (0.5, 1.5),
                reference: PowerSchedule::reference(),
                target_depth: 0.5e-3,
                delta_clamp: 3e-4,
            },
        }
    }
}

/// One iteration's record.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    /// Case 1: physical parameter values. Cases 2 and 3: power per solver step.
    pub snapshot: Vec<f64>,
    /// Seconds since the optimization started.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationLog {
    pub case: CaseId,
    pub seed: u64,
    pub dt: f64,
    pub param_names: Vec<String>,
    /// Case 1: true parameter values. Case 2: reference power per step.
    pub truth: Vec<f64>,
    pub entries: Vec<LogEntry>,
    pub depth_initial: Option<DepthTrace>,
    pub depth_final: Option<DepthTrace>,
    /// Reason the loop stopped early, if it did.
    pub aborted: Option<String>,
}

impl OptimizationLog {
    pub fn initial_loss(&self) -> f64 {
        self.entries[0].loss
    }

    pub fn final_loss(&self) -> f64 {
        self.entries.last().expect("log has the initial entry").loss
    }

    pub fn write_loss_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "iteration,loss")?;
        for e in &self.entries {
            writeln!(out, "{},{}", e.iteration, e.loss)?;
        }
        Ok(())
    }

    /// Case 1 parameter trajectory.
    pub fn write_params_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "iteration,{}", self.param_names.join(","))?;
        for e in &self.entries {
            let vals: Vec<String> = e.snapshot.iter().map(f64::to_string).collect();
            writeln!(out, "{},{}", e.iteration, vals.join(","))?;
        }
        Ok(())
    }

    /// Power curve at one logged iteration (cases 2 and 3).
    pub fn write_power_csv<W: Write>(&self, out: &mut W, iteration: usize) -> io::Result<()> {
        let entry = self
            .entries
            .iter()
            .find(|e| e.iteration == iteration)
            .ok_or_else(|| {
                io::Error::new(
                    io::ErrorKind::InvalidInput,
                    format!("iteration {iteration} not logged"),
                )
            })?;
        writeln!(out, "step,time,power_w")?;
        for (n, p) in entry.snapshot.iter().enumerate() {
            writeln!(out, "{n},{},{p}", n as f64 * self.dt)?;
        }
        Ok(())
    }
}

/// Loss (and optionally its gradient) at one point of the search space.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Option<Vec<f64>>,
    pub snapshot: Vec<f64>,
    pub depth: Option<DepthTrace>,
}

/// A case with its synthesized target, ready for repeated evaluation.
///
/// Case 1 searches the five calibrated scalars in units of their true
/// values; cases 2 and 3 search the flat network parameters.
pub struct CaseProblem {
    pub spec: CaseSpec,
    pub sim: Arc<Simulation>,
    pub path: Toolpath,
    pub x0: Vec<f64>,
    pub param_names: Vec<String>,
    pub truth: Vec<f64>,
    target: Option<TargetHistory>,
    plan: Option<DepthPlan>,
}

impl CaseProblem {
    pub fn new(spec: CaseSpec) -> Result<Self, DesignError> {
        let (path, sim) = spec.scenario.prepare()?;
        let path = path.ok_or_else(|| {
            DesignError::InvalidArgument("case studies need build elements".into())
        })?;
        let material = spec.scenario.material;
        let laser = spec.scenario.laser;
        let seed = spec.optimizer.seed;
        let (x0, param_names, truth, target, plan) = match spec.case {
            CaseId::One => {
                let (lo, hi) = spec.init_range;
                if !(lo > 0.0 && hi >= lo) {
                    return Err(DesignError::InvalidArgument(format!(
                        "bad init range ({lo}, {hi})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x0: Vec<f64> = (0..CASE1_PARAMS.len())
                    .map(|_| rng.gen_range(lo..=hi))
                    .collect();
                let truth = vec![
                    material.cp,
                    material.k,
                    material.h_conv,
                    laser.power,
                    laser.beam_radius,
                ];
                let history = sim.simulate(&material, &laser, &[])?;
                let target = TargetHistory::from_history(&history);
                (
                    x0,
                    CASE1_PARAMS.map(String::from).to_vec(),
                    truth,
                    Some(target),
                    None,
                )
            }
            CaseId::Two => {
                let reference = spec.reference.sample(sim.config.n_steps);
                let mut params = ParamSet::new();
                let ids = PhysicsIds::register(&mut params, &material, &laser, &[])?;
                let mut tape = Tape::new(params);
                let power = tape.leaf(reference.clone(), false);
                let history = run_forward(Arc::clone(&sim), tape, ids, power)?;
                let target = TargetHistory::from_history(&history);
                (
                    mlp::init_params(seed),
                    vec!["mlp".into()],
                    reference,
                    Some(target),
                    None,
                )
            }
            CaseId::Three => {
                let dz = sim.mesh.element_size[2];
                if !(spec.target_depth >= 0.0 && spec.target_depth <= 3.0 * dz) {
                    return Err(DesignError::InvalidArgument(format!(
                        "target depth {} outside [0, {}]",
                        spec.target_depth,
                        3.0 * dz
                    )));
                }
                if !(spec.delta_clamp > 0.0 && spec.delta_clamp.is_finite()) {
                    return Err(DesignError::InvalidArgument(format!(
                        "clamp width must be positive, got {}",
                        spec.delta_clamp
                    )));
                }
                let plan = DepthPlan::new(&sim).with_clamp(spec.delta_clamp);
                if plan.n_usable() == 0 {
                    return Err(DesignError::InvalidArgument(
                        "no laser-on step has a depth stencil".into(),
                    ));
                }
                (
                    mlp::init_params(seed),
                    vec!["mlp".into()],
                    Vec::new(),
                    None,
                    Some(plan),
                )
            }
        };
        Ok(CaseProblem {
            spec,
            sim,
            path,
            x0,
            param_names,
            truth,
            target,
            plan,
        })
    }

    fn case1_inputs(&self, x: &[f64]) -> (MaterialParams, LaserParams) {
        let t = &self.truth;
        let material = MaterialParams {
            cp: x[0] * t[0],
            k: x[1] * t[1],
            h_conv: x[2] * t[2],
            ..self.spec.scenario.material
        };
        let laser = LaserParams {
            power: x[3] * t[3],
            beam_radius: x[4] * t[4],
            ..self.spec.scenario.laser
        };
        (material, laser)
    }

    /// Physical values for a case-1 point.
    pub fn physical(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.truth).map(|(s, t)| s * t).collect()
    }

    pub fn evaluate(&self, x: &[f64], with_grad: bool) -> Result<Evaluation, DesignError> {
        if x.len() != self.x0.len() {
            return Err(DesignError::InvalidArgument(format!(
                "expected {} variables, got {}",
                self.x0.len(),
                x.len()
            )));
        }
        match self.spec.case {
            CaseId::One => {
                let (material, laser) = self.case1_inputs(x);
                let grad_names: &[&str] = if with_grad { &CASE1_PARAMS } else { &[] };
                let mut history = self.sim.simulate(&material, &laser, grad_names)?;
                let target = self.target.as_ref().expect("case 1 has a target");
                let loss = loss_case1(&mut history, target)?;
                let grad = if with_grad {
                    let g = history.tape.backward(loss, 1.0)?;
                    Some(
                        CASE1_PARAMS
                            .iter()
                            .zip(&self.truth)
                            .map(|(name, t)| {
                                g.scalar(history.ids.id(name).expect("registered")) * t
                            })
                            .collect(),
                    )
                } else {
                    None
                };
                Ok(Evaluation {
                    loss: history.tape.value(loss)[0],
                    grad,
                    snapshot: self.physical(x),
                    depth: None,
                })
            }
            CaseId::Two | CaseId::Three => {
                let mut params = ParamSet::new();
                let ids = PhysicsIds::register(
                    &mut params,
                    &self.spec.scenario.material,
                    &self.spec.scenario.laser,
                    &[],
                )?;
                let net = params.add("mlp", x.to_vec(), with_grad)?;
                let mut tape = Tape::new(params);
                let power = tape.record_step(
                    Box::new(MlpSchedule::new(net, self.sim.config.n_steps)),
                    &[],
                )?;
                let mut history = run_forward(Arc::clone(&self.sim), tape, ids, power)?;
                let (loss, depth) = match self.spec.case {
                    CaseId::Two => (
                        loss_case2(
                            &mut history,
                            self.target.as_ref().expect("case 2 has a target"),
                        )?,
                        None,
                    ),
                    _ => {
                        let plan = self.plan.as_ref().expect("case 3 has a depth plan");
                        let depths = plan.record(&mut history)?;
                        let loss = loss_case3(&mut history, depths, self.spec.target_depth)?;
                        (loss, Some(plan.evaluate(&history)?))
                    }
                };
                let grad = if with_grad {
                    let g = history.tape.backward(loss, 1.0)?;
                    Some(g.param(net).expect("network requires grad").to_vec())
                } else {
                    None
                };
                Ok(Evaluation {
                    loss: history.tape.value(loss)[0],
                    grad,
                    snapshot: history.power_schedule().to_vec(),
                    depth,
                })
            }
        }
    }

    /// Forward run at `x` for inspection.
    pub fn history_at(&self, x: &[f64]) -> Result<ThermalHistory, DesignError> {
        match self.spec.case {
            CaseId::One => {
                let (material, laser) = self.case1_inputs(x);
                Ok(self.sim.simulate(&material, &laser, &[])?)
            }
            _ => {
                let mut params = ParamSet::new();
                let ids = PhysicsIds::register(
                    &mut params,
                    &self.spec.scenario.material,
                    &self.spec.scenario.laser,
                    &[],
                )?;
                let net = params.add("mlp", x.to_vec(), false)?;
                let mut tape = Tape::new(params);
                let power = tape.record_step(
                    Box::new(MlpSchedule::new(net, self.sim.config.n_steps)),
                    &[],
                )?;
                Ok(run_forward(Arc::clone(&self.sim), tape, ids, power)?)
            }
        }
    }

    /// Adam loop over the iteration budget. `on_iteration` sees every entry as it is logged.
    pub fn optimize<F: FnMut(&LogEntry)>(
        &self,
        mut on_iteration: F,
    ) -> Result<OptimizationLog, DesignError> {
        let opt = self.spec.optimizer;
        let mut adam = Adam::new(self.x0.len(), opt.lr).with_betas(opt.beta1, opt.beta2, opt.eps);
        let mut x = self.x0.clone();
        let mut log = OptimizationLog {
            case: self.spec.case,
            seed: opt.seed,
            dt: self.sim.config.dt,
            param_names: self.param_names.clone(),
            truth: self.truth.clone(),
            entries: Vec::with_capacity(opt.iterations + 1),
            depth_initial: None,
            depth_final: None,
            aborted: None,
        };
        let start = Instant::now();
        for it in 0..=opt.iterations {
            let last = it == opt.iterations;
            let eval = match self.evaluate(&x, !last) {
                Ok(e) => e,
                Err(e @ DesignError::Fem(_)) if it > 0 => {
                    log::warn!("stopping at iteration {it}: {e}");
                    log.aborted = Some(format!("iteration {it}: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            if it == 0 {
                log.depth_initial = eval.depth.clone();
            }
            log.depth_final = eval.depth;
            let entry = LogEntry {
                iteration: it,
                loss: eval.loss,
                snapshot: eval.snapshot,
                wall_time: start.elapsed().as_secs_f64(),
            };
            on_iteration(&entry);
            log.entries.push(entry);
            if let Some(grad) = eval.grad {
                adam.step(&mut x, &grad).map_err(|e| match e {
                    DesignError::NonFiniteGradient { name } => {
                        let index: usize = name.trim_start_matches('#').parse().unwrap_or(0);
                        let name = match self.spec.case {
                            CaseId::One => CASE1_PARAMS[index].to_string(),
                            _ => format!("mlp[{index}]"),
                        };
                        DesignError::NonFiniteGradient { name }
                    }
                    other => other,
                })?;
                if self.spec.case == CaseId::One {
                    for v in &mut x {
                        *v = v.max(SCALED_FLOOR);
                    }
                }
            }
        }
        Ok(log)
    }
}

/// Synthesizes the case target, then optimizes over the iteration budget.
pub fn run_case(spec: CaseSpec) -> Result<OptimizationLog, DesignError> {
    CaseProblem::new(spec)?.optimize(|e| log::info!("iteration {} loss {:e}", e.iteration, e.loss))
}
