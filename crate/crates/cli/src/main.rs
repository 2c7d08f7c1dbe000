mod config;
mod svg;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thermoforge::design::{
    gradient_fixture, history_grad_check, CaseId, CaseSpec, DesignError, OptimizationLog,
    OptimizerSpec, DEFAULT_CHECK_PARAMS,
};
use thermoforge::fem::history::{write_history_binary, write_history_csv};
use thermoforge::fem::FemError;
use thermoforge::io::{birth_to_csv, mesh_to_json, toolpath_to_csv};
use thermoforge::meltpool::DepthTrace;
use thiserror::Error;

use config::{parse_config, render_config, ConfigError, OptimizeSection, OutputSection, RunConfig};
use svg::{render_svg, PlotError, PlotStyle, Series};

#[derive(Debug, Error)]
enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] thermoforge::Error),
    #[error("io: {0}")]
    Io(String),
    #[error("plot: {0}")]
    Plot(#[from] PlotError),
    #[error("cli: {0}")]
    Usage(String),
    #[error("gradcheck: {0}")]
    GradCheck(String),
}

impl From<DesignError> for CliError {
    fn from(e: DesignError) -> Self {
        use thermoforge::Error as E;
        CliError::Core(match e {
            DesignError::Fem(e) => E::Fem(e),
            DesignError::Mesh(e) => E::Mesh(e),
            DesignError::Path(e) => E::Toolpath(e),
            DesignError::Tape(e) => E::Autodiff(e),
            DesignError::MeltPool(e) => E::MeltPool(e),
            other => E::Design(other),
        })
    }
}

impl From<FemError> for CliError {
    fn from(e: FemError) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Differentiable thermal simulation of metal deposition.
#[derive(Parser)]
#[command(name = "thermoforge", version, after_long_help = config::reference_text())]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run even when dt exceeds the explicit stability limit.
    #[arg(long, global = true)]
    allow_unstable: bool,
    /// Output directory; overrides [output].directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the mesh and write mesh.json.
    Mesh(StageArgs),
    /// Plan the toolpath and birth schedule.
    Path(StageArgs),
    /// Run a forward simulation and write the thermal history.
    Simulate(StageArgs),
    /// Compare AD gradients with central finite differences.
    Gradcheck(GradArgs),
    /// Recover material and laser parameters from a synthetic top-layer history.
    Case1(CaseArgs),
    /// Fit an MLP power schedule to a reference thermal history.
    Case2(CaseArgs),
    /// Fit an MLP power schedule for a constant melt-pool depth.
    Case3(CaseArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
}

#[derive(Args)]
struct GradArgs {
    /// Scenario to check; defaults to a 32-element two-layer build, 200 steps.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Parameter to check (repeatable); defaults to cp, k, h_conv, power, beam_radius, emissivity.
    #[arg(long = "param", value_name = "NAME")]
    params: Vec<String>,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct CaseArgs {
    /// Run configuration; without it the built-in desk-scale setup is used.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for the initial parameters; overrides [optimize].seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides [optimize].iterations.
    #[arg(long)]
    iterations: Option<usize>,
}

/// Common run bookkeeping for summary.json.
struct RunInfo {
    command: &'static str,
    started: Instant,
    threads: Option<usize>,
    source: Option<String>,
    effective: String,
    seed: Option<u64>,
}

impl RunInfo {
    fn new(
        command: &'static str,
        threads: Option<usize>,
        source: Option<&RunConfig>,
        effective: String,
    ) -> Self {
        RunInfo {
            command,
            started: Instant::now(),
            threads,
            source: source.map(|c| c.text.clone()),
            effective,
            seed: None,
        }
    }

    fn write_summary(&self, dir: &Path, results: Value) -> Result<()> {
        let hash = Sha256::digest(self.effective.as_bytes());
        let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
        let summary = json!({
            "command": self.command,
            "config_sha256": hex,
            "config": self.effective,
            "source_config": self.source,
            "seed": self.seed,
            "versions": {
                "thermoforge": thermoforge_version(),
                "thermoforge_cli": env!("CARGO_PKG_VERSION"),
                "summary_format": 1,
            },
            "threads": self.threads,
            "wall_time_s": self.started.elapsed().as_secs_f64(),
            "results": results,
        });
        let text =
            serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
        write_text(dir, "summary.json", &(text + "\n"))
    }
}

fn thermoforge_version() -> &'static str {
    // The library and CLI are versioned together.
    env!("CARGO_PKG_VERSION")
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("THERMOFORGE_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                info!("THERMOFORGE_THREADS={n}; assembly runs on one thread in this build");
                Ok(Some(n))
            }
            _ => Err(CliError::Usage(format!(
                "THERMOFORGE_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_with<F>(dir: &Path, name: &str, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let path = dir.join(name);
    let err = |e: std::io::Error| CliError::Io(format!("cannot write {}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(&path).map_err(err)?);
    f(&mut w).map_err(err)?;
    w.flush().map_err(err)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    write_with(dir, name, |w| w.write_all(text.as_bytes()))
}

fn load_config(path: &Path, cli: &Cli) -> Result<RunConfig> {
    let mut cfg = parse_config(path)?;
    apply_globals(&mut cfg, cli);
    Ok(cfg)
}

fn apply_globals(cfg: &mut RunConfig, cli: &Cli) {
    if cli.allow_unstable {
        cfg.scenario.sim.allow_unstable = true;
    }
    if let Some(out) = &cli.out {
        cfg.output.directory = out.clone();
    }
}

fn default_output() -> OutputSection {
    OutputSection {
        directory: PathBuf::from("out"),
        watch: None,
        binary_history: false,
    }
}

fn run_stage(cli: &Cli, args: &StageArgs, command: &'static str) -> Result<()> {
    let threads = threads_from_env()?;
    let cfg = load_config(&args.config, cli)?;
    let info = RunInfo::new(command, threads, Some(&cfg), render_config(&cfg));
    let dir = cfg.output.directory.clone();
    create_dir(&dir)?;

    let mesh = cfg.scenario.mesh.build()?;
    write_text(&dir, "mesh.json", &mesh_to_json(&mesh))?;
    let mut results = json!({
        "n_nodes": mesh.n_nodes(),
        "n_elements": mesh.n_elements(),
        "n_build_elements": mesh.build_elements().count(),
    });
    if command == "mesh" {
        return info.write_summary(&dir, results);
    }

    let (path, sim) = cfg.scenario.prepare()?;
    if let Some(p) = &path {
        write_text(&dir, "toolpath.csv", &toolpath_to_csv(p))?;
        results["path_end_time"] = json!(p.end_time());
    }
    write_text(&dir, "birth.csv", &birth_to_csv(&sim.schedule))?;
    if command == "path" {
        return info.write_summary(&dir, results);
    }

    let history = sim.simulate(&cfg.scenario.material, &cfg.scenario.laser, &[])?;
    let watch: Vec<usize> = cfg
        .output
        .watch
        .clone()
        .unwrap_or_else(|| (0..sim.n_nodes()).collect());
    write_with(&dir, "history.csv", |w| {
        write_history_csv(w, &history, &watch)
    })?;
    if cfg.output.binary_history {
        write_with(&dir, "history.bin", |w| write_history_binary(w, &history))?;
    }
    let dt = sim.config.dt;
    let steps: Vec<usize> = std::iter::once(0).chain(history.recorded_steps()).collect();
    let peak: Vec<(f64, f64)> = steps
        .iter()
        .map(|&n| {
            (
                n as f64 * dt,
                history
                    .temps(n)
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max),
            )
        })
        .collect();
    let t_max = peak.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let svg = render_svg(
        &[Series::new("max T", peak)],
        &PlotStyle {
            title: "Peak nodal temperature".into(),
            x_label: "time (s)".into(),
            y_label: "T (K)".into(),
            ..PlotStyle::default()
        },
    )?;
    write_text(&dir, "max_temperature.svg", &svg)?;
    results["n_steps"] = json!(history.n_steps());
    results["max_temperature"] = json!(t_max);
    info.write_summary(&dir, results)
}

fn run_gradcheck(cli: &Cli, args: &GradArgs) -> Result<()> {
    let threads = threads_from_env()?;
    let cfg = match &args.config {
        Some(p) => Some(load_config(p, cli)?),
        None => None,
    };
    let (scenario, effective, dir) = match &cfg {
        Some(c) => (
            c.scenario.clone(),
            render_config(c),
            c.output.directory.clone(),
        ),
        None => {
            let mut rc = RunConfig {
                scenario: gradient_fixture(),
                optimize: desk_optimize(CaseId::One),
                output: default_output(),
                text: String::new(),
            };
            rc.optimize.case = None;
            apply_globals(&mut rc, cli);
            (
                rc.scenario.clone(),
                render_config(&rc),
                rc.output.directory.clone(),
            )
        }
    };
    if !(args.tol > 0.0) {
        return Err(CliError::Usage(format!(
            "--tol must be positive, got {}",
            args.tol
        )));
    }
    let info = RunInfo::new("gradcheck", threads, cfg.as_ref(), effective);
    let names: Vec<&str> = if args.params.is_empty() {
        DEFAULT_CHECK_PARAMS.to_vec()
    } else {
        args.params.iter().map(String::as_str).collect()
    };
    let report = history_grad_check(&scenario, &names, args.eps)?;
    println!(
        "{:<14} {:>24} {:>24} {:>12}",
        "param", "ad", "fd", "rel_error"
    );
    let mut rows = Vec::new();
    for e in &report.entries {
        println!(
            "{:<14} {:>24.16e} {:>24.16e} {:>12.3e}",
            e.name, e.ad, e.fd, e.rel_error
        );
        rows.push(json!({"param": e.name, "ad": e.ad, "fd": e.fd, "rel_error": e.rel_error}));
    }
    println!("max_rel_error {:.3e}", report.max_rel_error);

    create_dir(&dir)?;
    write_with(&dir, "gradcheck.csv", |w| {
        writeln!(w, "param,ad,fd,rel_error")?;
        for e in &report.entries {
            writeln!(w, "{},{},{},{}", e.name, e.ad, e.fd, e.rel_error)?;
        }
        Ok(())
    })?;
    let pass = report.max_rel_error < args.tol;
    info.write_summary(
        &dir,
        json!({"eps": args.eps, "tol": args.tol, "max_rel_error": report.max_rel_error, "pass": pass, "entries": rows}),
    )?;
    if !pass {
        return Err(CliError::GradCheck(format!(
            "max relative error {:.3e} exceeds tolerance {:.3e}",
            report.max_rel_error, args.tol
        )));
    }
    Ok(())
}

fn desk_optimize(case: CaseId) -> OptimizeSection {
    let d = CaseSpec::desk(case);
    OptimizeSection {
        case: Some(case),
        iterations: Some(d.optimizer.iterations),
        lr: Some(d.optimizer.lr),
        beta1: d.optimizer.beta1,
        beta2: Some(d.optimizer.beta2),
        eps: d.optimizer.eps,
        seed: d.optimizer.seed,
        init_range: d.init_range,
        reference: d.reference,
        reference_path: None,
        target_depth: if case == CaseId::Three {
            d.target_depth
        } else {
            0.5e-3
        },
        delta_clamp: Some(d.delta_clamp),
        power_every: 50,
    }
}

fn case_spec(case: CaseId, cfg: &RunConfig) -> CaseSpec {
    let d = CaseSpec::desk(case);
    let o = &cfg.optimize;
    CaseSpec {
        case,
        scenario: cfg.scenario.clone(),
        optimizer: OptimizerSpec {
            iterations: o.iterations.unwrap_or(d.optimizer.iterations),
            lr: o.lr.unwrap_or(d.optimizer.lr),
            beta1: o.beta1,
            beta2: o.beta2.unwrap_or(d.optimizer.beta2),
            eps: o.eps,
            seed: o.seed,
        },
        init_range: o.init_range,
        reference: o.reference.clone(),
        target_depth: o.target_depth,
        delta_clamp: o.delta_clamp.unwrap_or(d.delta_clamp),
    }
}

fn plot(dir: &Path, name: &str, series: Vec<Series>, style: PlotStyle) -> Result<()> {
    let svg = render_svg(&series, &style)?;
    write_text(dir, name, &svg)
}

fn depth_points(trace: &DepthTrace) -> Vec<(f64, f64)> {
    trace
        .records
        .iter()
        .filter(|r| !r.skipped)
        .map(|r| (r.time, r.depth * 1e3))
        .collect()
}

fn std_dev(values: &[f64], center: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v - center).sum::<f64>() / n;
    (values
        .iter()
        .map(|v| (v - center - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

fn write_case_outputs(
    dir: &Path,
    spec: &CaseSpec,
    log: &OptimizationLog,
    power_every: usize,
) -> Result<Value> {
    write_with(dir, "loss.csv", |w| log.write_loss_csv(w))?;
    let loss_pts: Vec<(f64, f64)> = log
        .entries
        .iter()
        .map(|e| (e.iteration as f64, e.loss))
        .collect();
    let log_y = loss_pts.iter().all(|p| p.1 > 0.0);
    plot(
        dir,
        "loss.svg",
        vec![Series::new("loss", loss_pts)],
        PlotStyle {
            title: format!("Case {} loss", spec.case.number()),
            x_label: "iteration".into(),
            y_label: if log_y {
                "loss (log10)".into()
            } else {
                "loss".into()
            },
            log_y,
            ..PlotStyle::default()
        },
    )?;
    let last = log.entries.last().expect("log has the initial entry");
    let mut results = json!({
        "iterations_run": last.iteration,
        "initial_loss": log.initial_loss(),
        "final_loss": log.final_loss(),
        "loss_ratio": log.initial_loss() / log.final_loss(),
        "aborted": log.aborted,
    });

    match spec.case {
        CaseId::One => {
            write_with(dir, "params.csv", |w| log.write_params_csv(w))?;
            let series = log
                .param_names
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    let pts = log
                        .entries
                        .iter()
                        .map(|e| (e.iteration as f64, e.snapshot[i] / log.truth[i]))
                        .collect();
                    Series::new(name.clone(), pts)
                })
                .collect();
            plot(
                dir,
                "params.svg",
                series,
                PlotStyle {
                    title: "Parameters relative to ground truth".into(),
                    x_label: "iteration".into(),
                    y_label: "value / truth".into(),
                    ..PlotStyle::default()
                },
            )?;
            let first = &log.entries[0].snapshot;
            let params: Vec<Value> = log
                .param_names
                .iter()
                .enumerate()
                .map(|(i, n)| json!({"name": n, "truth": log.truth[i], "initial": first[i], "final": last.snapshot[i]}))
                .collect();
            results["parameters"] = json!(params);
        }
        CaseId::Two | CaseId::Three => {
            let mut iters: Vec<usize> = log
                .entries
                .iter()
                .map(|e| e.iteration)
                .filter(|k| k % power_every == 0)
                .collect();
            if !iters.contains(&last.iteration) {
                iters.push(last.iteration);
            }
            for k in iters {
                write_with(dir, &format!("power_iter_{k}.csv"), |w| {
                    log.write_power_csv(w, k)
                })?;
            }
            let curve = |p: &[f64]| -> Vec<(f64, f64)> {
                p.iter()
                    .enumerate()
                    .map(|(n, v)| (n as f64 * log.dt, *v))
                    .collect()
            };
            let mut series = vec![
                Series::new("initial", curve(&log.entries[0].snapshot)),
                Series::new(
                    format!("iteration {}", last.iteration),
                    curve(&last.snapshot),
                ),
            ];
            if spec.case == CaseId::Two {
                series.push(Series::new("reference", curve(&log.truth)));
                let n = log.truth.len().min(last.snapshot.len());
                let rms = (log.truth[..n]
                    .iter()
                    .zip(&last.snapshot[..n])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    / n.max(1) as f64)
                    .sqrt();
                results["power_rms_error_w"] = json!(rms);
            }
            plot(
                dir,
                "power.svg",
                series,
                PlotStyle {
                    title: "Laser power schedule".into(),
                    x_label: "time (s)".into(),
                    y_label: "power (W)".into(),
                    ..PlotStyle::default()
                },
            )?;
        }
    }

    if let (Some(d0), Some(d1)) = (&log.depth_initial, &log.depth_final) {
        write_with(dir, "depth_initial.csv", |w| d0.write_csv(w))?;
        write_with(dir, "depth_final.csv", |w| d1.write_csv(w))?;
        let target: Vec<(f64, f64)> = d1
            .records
            .iter()
            .map(|r| (r.time, spec.target_depth * 1e3))
            .collect();
        let mut series = vec![
            Series::new("initial", depth_points(d0)),
            Series::new("optimized", depth_points(d1)),
        ];
        if !target.is_empty() {
            series.push(Series::new("target", target));
        }
        if series.iter().any(|s| !s.points.is_empty()) {
            plot(
                dir,
                "depth.svg",
                series,
                PlotStyle {
                    title: "Melt-pool depth".into(),
                    x_label: "time (s)".into(),
                    y_label: "depth (mm)".into(),
                    ..PlotStyle::default()
                },
            )?;
        }
        let (s0, s1) = (
            std_dev(&d0.depths(), spec.target_depth),
            std_dev(&d1.depths(), spec.target_depth),
        );
        results["depth_std_initial_m"] = json!(s0);
        results["depth_std_final_m"] = json!(s1);
        results["samples_skipped"] = json!(d1.n_skipped());
    }
    Ok(results)
}

fn run_case_cmd(cli: &Cli, case: CaseId, args: &CaseArgs, command: &'static str) -> Result<()> {
    let threads = threads_from_env()?;
    let source = match &args.config {
        Some(p) => Some(parse_config(p)?),
        None => None,
    };
    let mut cfg = match &source {
        Some(c) => {
            if let Some(other) = c.optimize.case {
                if other != case {
                    return Err(CliError::Usage(format!(
                        "config is for case {} but `{command}` was run",
                        other.number()
                    )));
                }
            }
            c.clone()
        }
        None => {
            let d = CaseSpec::desk(case);
            RunConfig {
                scenario: d.scenario,
                optimize: desk_optimize(case),
                output: default_output(),
                text: String::new(),
            }
        }
    };
    cfg.optimize.case = Some(case);
    if let Some(seed) = args.seed {
        cfg.optimize.seed = seed;
    }
    if let Some(it) = args.iterations {
        cfg.optimize.iterations = Some(it);
    }
    apply_globals(&mut cfg, cli);
    let spec = case_spec(case, &cfg);
    cfg.optimize.iterations = Some(spec.optimizer.iterations);
    cfg.optimize.lr = Some(spec.optimizer.lr);
    cfg.optimize.beta2 = Some(spec.optimizer.beta2);
    cfg.optimize.delta_clamp = Some(spec.delta_clamp);

    let mut info = RunInfo::new(command, threads, source.as_ref(), render_config(&cfg));
    info.seed = Some(cfg.optimize.seed);
    let dir = cfg.output.directory.clone();
    create_dir(&dir)?;
    info!(
        "{command}: {} iterations, lr {}, seed {}",
        spec.optimizer.iterations, spec.optimizer.lr, spec.optimizer.seed
    );
    let problem = thermoforge::design::CaseProblem::new(spec.clone())?;
    let log = problem.optimize(|e| {
        if e.iteration % 10 == 0 {
            info!(
                "iteration {:>4}  loss {:.6e}  ({:.1} s)",
                e.iteration, e.loss, e.wall_time
            );
        }
    })?;
    let results = write_case_outputs(&dir, &spec, &log, cfg.optimize.power_every)?;
    info.write_summary(&dir, results)?;
    if let Some(reason) = &log.aborted {
        warn!("optimization stopped early: {reason}");
        return Err(CliError::Core(thermoforge::Error::Design(
            DesignError::InvalidArgument(format!(
                "optimization stopped after iteration {}: {reason}",
                log.entries.len() - 1
            )),
        )));
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Mesh(a) => run_stage(cli, a, "mesh"),
        Command::Path(a) => run_stage(cli, a, "path"),
        Command::Simulate(a) => run_stage(cli, a, "simulate"),
        Command::Gradcheck(a) => run_gradcheck(cli, a),
        Command::Case1(a) => run_case_cmd(cli, CaseId::One, a, "case1"),
        Command::Case2(a) => run_case_cmd(cli, CaseId::Two, a, "case2"),
        Command::Case3(a) => run_case_cmd(cli, CaseId::Three, a, "case3"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp
                    | clap::error::ErrorKind::DisplayVersion
                    | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) =>
        {
            e.exit()
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: cli: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
