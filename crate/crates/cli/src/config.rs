//! INI-style run configuration: `[section]` headers, `key = value` lines and
//! `#` comments. Unknown sections and keys are rejected with line numbers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thermoforge::design::{CaseId, MeshSpec, PathSpec, PowerSchedule, Scenario};
use thermoforge::fem::{LaserParams, MaterialParams, SimConfig};
use thermoforge::mesh::HourglassSpec;
use thermoforge::toolpath::Strategy;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: [{section}].{key} given twice")]
    Duplicate {
        line: usize,
        section: String,
        key: String,
    },
    #[error("missing required key [{section}].{key}")]
    Missing { section: String, key: String },
    #[error("line {line}: [{section}].{key}: {msg}")]
    Invalid {
        line: usize,
        section: String,
        key: String,
        msg: String,
    },
    #[error("{0}")]
    Inconsistent(String),
}

#[derive(Clone, Copy)]
enum Kind {
    Positive,
    NonNegative,
    Fraction,
    Count,
    Index,
    Bool,
    Text,
    List,
}

struct KeyDoc {
    section: &'static str,
    key: &'static str,
    default: &'static str,
    kind: Kind,
    doc: &'static str,
}

macro_rules! keys {
    ($(($s:literal, $k:literal, $d:literal, $kind:ident, $doc:literal)),* $(,)?) => {
        &[$(KeyDoc { section: $s, key: $k, default: $d, kind: Kind::$kind, doc: $doc }),*]
    };
}

/// Every accepted key. A default of `required` marks a mandatory key.
const KEYS: &[KeyDoc] = keys![
    (
        "mesh",
        "kind",
        "hourglass",
        Text,
        "hourglass | layered | block"
    ),
    (
        "mesh",
        "substrate",
        "required",
        List,
        "substrate element counts nx,ny,nz"
    ),
    (
        "mesh",
        "half_widths",
        "5,4,3,3,4,5",
        List,
        "hourglass: footprint side (elements) per layer, bottom first"
    ),
    (
        "mesh",
        "layers",
        "4x4,4x4",
        List,
        "layered: footprint sx x sy per layer, bottom first"
    ),
    ("mesh", "element_size", "1e-3", List, "dx[,dy,dz] in m"),
    ("path", "strategy", "zigzag", Text, "zigzag | inward"),
    ("path", "scan_speed", "8e-3", Positive, "laser speed, m/s"),
    (
        "path",
        "layer_dwell",
        "0.3",
        Positive,
        "pause between layers, s"
    ),
    ("material", "rho", "7800", Positive, "density, kg/m^3"),
    ("material", "cp", "500", Positive, "specific heat, J/(kg K)"),
    ("material", "k", "16", Positive, "conductivity, W/(m K)"),
    (
        "material",
        "h_conv",
        "20",
        NonNegative,
        "convection coefficient, W/(m^2 K)"
    ),
    (
        "material",
        "emissivity",
        "0.7",
        Fraction,
        "surface emissivity"
    ),
    (
        "material",
        "t_amb",
        "300",
        Positive,
        "ambient temperature, K"
    ),
    (
        "material",
        "t_melt",
        "1700",
        Positive,
        "melting temperature, K"
    ),
    (
        "material",
        "t_deposit",
        "300",
        Positive,
        "temperature of freshly deposited material, K"
    ),
    (
        "material",
        "s_vol",
        "0",
        NonNegative,
        "volumetric heat source, W/m^3"
    ),
    ("laser", "power", "300", NonNegative, "laser power, W"),
    (
        "laser",
        "beam_radius",
        "1e-3",
        Positive,
        "Gaussian beam radius, m"
    ),
    (
        "laser",
        "absorptivity",
        "1",
        Fraction,
        "absorbed fraction of the laser power"
    ),
    ("sim", "dt", "required", Positive, "time step, s"),
    ("sim", "n_steps", "required", Count, "number of time steps"),
    (
        "sim",
        "record_stride",
        "1",
        Count,
        "steps between recorded states"
    ),
    (
        "sim",
        "deterministic",
        "true",
        Bool,
        "fixed-order reductions"
    ),
    (
        "sim",
        "allow_unstable",
        "false",
        Bool,
        "run even when dt exceeds the stability limit"
    ),
    (
        "sim",
        "fix_bottom",
        "true",
        Bool,
        "hold the substrate bottom at t_amb"
    ),
    (
        "optimize",
        "case",
        "none",
        Text,
        "1 | 2 | 3; must match the subcommand when given"
    ),
    (
        "optimize",
        "iterations",
        "60 / 300 / 200",
        Index,
        "Adam iterations (case 1 / 2 / 3)"
    ),
    (
        "optimize",
        "lr",
        "0.05 / 0.01 / 0.01",
        Positive,
        "Adam learning rate (case 1 / 2 / 3)"
    ),
    (
        "optimize",
        "beta1",
        "0.9",
        Fraction,
        "Adam first-moment decay"
    ),
    (
        "optimize",
        "beta2",
        "0.999 / 0.99 / 0.999",
        Fraction,
        "Adam second-moment decay (case 1 / 2 / 3)"
    ),
    (
        "optimize",
        "eps",
        "1e-8",
        Positive,
        "Adam denominator offset"
    ),
    (
        "optimize",
        "seed",
        "0",
        Index,
        "seed for initial parameters"
    ),
    (
        "optimize",
        "init_low",
        "0.5",
        Positive,
        "case 1: lower end of the initial draw, multiple of the true value"
    ),
    (
        "optimize",
        "init_high",
        "1.5",
        Positive,
        "case 1: upper end of the initial draw"
    ),
    (
        "optimize",
        "reference",
        "built-in",
        Text,
        "case 2: reference power CSV (t_norm,power_w)"
    ),
    (
        "optimize",
        "target_depth",
        "0.5e-3",
        NonNegative,
        "case 3: target melt-pool depth, m"
    ),
    (
        "optimize",
        "delta_clamp",
        "3e-4",
        Positive,
        "case 3: width of the smooth depth clamp, m"
    ),
    (
        "optimize",
        "power_every",
        "50",
        Count,
        "cases 2-3: write power_iter_k.csv every k iterations"
    ),
    ("output", "directory", "out", Text, "output directory"),
    (
        "output",
        "watch",
        "all",
        List,
        "node ids written to history.csv"
    ),
    (
        "output",
        "binary_history",
        "false",
        Bool,
        "also write history.bin"
    ),
];

const SECTIONS: [&str; 7] = [
    "mesh", "path", "material", "laser", "sim", "optimize", "output",
];

/// Reference text for `--help`.
pub fn reference_text() -> String {
    let mut out = String::from("Configuration keys (INI style, `#` comments):\n");
    for section in SECTIONS {
        out.push_str(&format!("\n  [{section}]\n"));
        for k in KEYS.iter().filter(|k| k.section == section) {
            out.push_str(&format!(
                "    {:<15} default {:<16} {}\n",
                k.key, k.default, k.doc
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeSection {
    pub case: Option<CaseId>,
    pub iterations: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: f64,
    pub beta2: Option<f64>,
    pub eps: f64,
    pub seed: u64,
    pub init_range: (f64, f64),
    pub reference: PowerSchedule,
    /// Reference file as written in the config, if any.
    pub reference_path: Option<String>,
    pub target_depth: f64,
    pub delta_clamp: Option<f64>,
    pub power_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub watch: Option<Vec<usize>>,
    pub binary_history: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub optimize: OptimizeSection,
    pub output: OutputSection,
    /// Raw file contents, hashed into the run summary.
    pub text: String,
}

struct Entry {
    value: String,
    line: usize,
}

struct Raw {
    entries: BTreeMap<(String, String), Entry>,
}

impl Raw {
    fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries.get(&(section.to_string(), key.to_string()))
    }

    fn invalid(&self, section: &str, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            line: self.get(section, key).map_or(0, |e| e.line),
            section: section.into(),
            key: key.into(),
            msg: msg.into(),
        }
    }

    fn text(&self, section: &str, key: &str) -> Option<&str> {
        self.get(section, key).map(|e| e.value.as_str())
    }

    fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
        let Some(e) = self.get(section, key) else {
            return Ok(default);
        };
        let v: f64 = e.value.parse().map_err(|_| {
            self.invalid(
                section,
                key,
                format!("expected a number, got `{}`", e.value),
            )
        })?;
        let kind = KEYS
            .iter()
            .find(|k| k.section == section && k.key == key)
            .map(|k| k.kind);
        let ok = match kind {
            Some(Kind::Positive) => v > 0.0 && v.is_finite(),
            Some(Kind::NonNegative) => v >= 0.0 && v.is_finite(),
            Some(Kind::Fraction) => v > 0.0 && v <= 1.0,
            _ => v.is_finite(),
        };
        if !ok {
            let want = match kind {
                Some(Kind::Positive) => "a positive number",
                Some(Kind::NonNegative) => "a number >= 0",
                Some(Kind::Fraction) => "a number in (0, 1]",
                _ => "a finite number",
            };
            return Err(self.invalid(section, key, format!("must be {want}, got {v}")));
        }
        Ok(v)
    }

    fn f64_opt(&self, section: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.get(section, key) {
            Some(_) => self.f64_or(section, key, 0.0).map(Some),
            None => Ok(None),
        }
    }

    fn required_f64(&self, section: &str, key: &str) -> Result<f64, ConfigError> {
        self.require(section, key)?;
        self.f64_or(section, key, 0.0)
    }

    fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize, ConfigError> {
        let Some(e) = self.get(section, key) else {
            return Ok(default);
        };
        let v: usize = e.value.parse().map_err(|_| {
            self.invalid(
                section,
                key,
                format!("expected a non-negative integer, got `{}`", e.value),
            )
        })?;
        let kind = KEYS
            .iter()
            .find(|k| k.section == section && k.key == key)
            .map(|k| k.kind);
        if matches!(kind, Some(Kind::Count)) && v == 0 {
            return Err(self.invalid(section, key, "must be >= 1"));
        }
        Ok(v)
    }

    fn bool_or(&self, section: &str, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.text(section, key) {
            None => Ok(default),
            Some("true") | Some("yes") | Some("1") => Ok(true),
            Some("false") | Some("no") | Some("0") => Ok(false),
            Some(other) => Err(self.invalid(
                section,
                key,
                format!("expected true or false, got `{other}`"),
            )),
        }
    }

    fn list<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
    ) -> Result<Option<Vec<T>>, ConfigError> {
        let Some(e) = self.get(section, key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|p| {
                p.trim().parse().map_err(|_| {
                    self.invalid(section, key, format!("bad list entry `{}`", p.trim()))
                })
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    fn require(&self, section: &str, key: &str) -> Result<(), ConfigError> {
        if self.get(section, key).is_none() {
            return Err(ConfigError::Missing {
                section: section.into(),
                key: key.into(),
            });
        }
        Ok(())
    }
}

fn tokenize(text: &str) -> Result<Raw, ConfigError> {
    let mut entries = BTreeMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if l.is_empty() {
            continue;
        }
        if let Some(name) = l.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("unterminated section header `{l}`"),
            })?;
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(ConfigError::UnknownSection {
                    line,
                    name: name.to_string(),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = l.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            msg: format!("expected `key = value`, got `{l}`"),
        })?;
        let key = key.trim();
        let Some(sec) = &section else {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("`{key}` appears before any [section]"),
            });
        };
        if !KEYS.iter().any(|k| k.section == sec && k.key == key) {
            return Err(ConfigError::UnknownKey {
                line,
                section: sec.clone(),
                key: key.to_string(),
            });
        }
        let slot = (sec.clone(), key.to_string());
        if entries.contains_key(&slot) {
            return Err(ConfigError::Duplicate {
                line,
                section: sec.clone(),
                key: key.to_string(),
            });
        }
        entries.insert(
            slot,
            Entry {
                value: value.trim().to_string(),
                line,
            },
        );
    }
    Ok(Raw { entries })
}

fn triple(raw: &Raw, section: &str, key: &str, v: Vec<usize>) -> Result<[usize; 3], ConfigError> {
    match v.as_slice() {
        &[a, b, c] if a > 0 && b > 0 && c > 0 => Ok([a, b, c]),
        _ => Err(raw.invalid(section, key, "expected three positive integers")),
    }
}

fn parse_mesh(raw: &Raw) -> Result<MeshSpec, ConfigError> {
    raw.require("mesh", "substrate")?;
    let substrate = triple(
        raw,
        "mesh",
        "substrate",
        raw.list("mesh", "substrate")?.unwrap_or_default(),
    )?;
    let size: Vec<f64> = raw
        .list("mesh", "element_size")?
        .unwrap_or_else(|| vec![1e-3]);
    let element_size = match size.as_slice() {
        &[a] => [a; 3],
        &[a, b, c] => [a, b, c],
        _ => return Err(raw.invalid("mesh", "element_size", "expected one or three values")),
    };
    if element_size.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(raw.invalid("mesh", "element_size", "sizes must be positive"));
    }
    match raw.text("mesh", "kind").unwrap_or("hourglass") {
        "block" => Ok(MeshSpec::Block {
            extent: substrate,
            element_size,
        }),
        "hourglass" => {
            let widths: Vec<usize> = raw
                .list("mesh", "half_widths")?
                .unwrap_or_else(|| vec![5, 4, 3, 3, 4, 5]);
            Ok(MeshSpec::Hourglass(HourglassSpec {
                layer_half_widths: widths,
                substrate_extent: substrate,
                element_size,
            }))
        }
        "layered" => {
            let specs: Vec<String> = raw
                .list("mesh", "layers")?
                .unwrap_or_else(|| vec!["4x4".into(), "4x4".into()]);
            let layers = specs
                .iter()
                .map(|s| {
                    let (a, b) = s.split_once('x').ok_or_else(|| {
                        raw.invalid("mesh", "layers", format!("expected SXxSY, got `{s}`"))
                    })?;
                    match (a.trim().parse(), b.trim().parse()) {
                        (Ok(a), Ok(b)) => Ok((a, b)),
                        _ => {
                            Err(raw.invalid("mesh", "layers", format!("expected SXxSY, got `{s}`")))
                        }
                    }
                })
                .collect::<Result<Vec<(usize, usize)>, _>>()?;
            Ok(MeshSpec::Layered {
                substrate,
                layers,
                element_size,
            })
        }
        other => Err(raw.invalid(
            "mesh",
            "kind",
            format!("expected hourglass, layered or block, got `{other}`"),
        )),
    }
}

fn parse_case(raw: &Raw) -> Result<Option<CaseId>, ConfigError> {
    match raw.text("optimize", "case") {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| raw.invalid("optimize", "case", format!("expected 1, 2 or 3, got `{v}`"))),
    }
}

/// Parses config text; `base` resolves relative file references.
pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    let raw = tokenize(text)?;
    let mesh = parse_mesh(&raw)?;

    let strategy: Strategy = raw
        .text("path", "strategy")
        .unwrap_or("zigzag")
        .parse()
        .map_err(|e: thermoforge::toolpath::PathError| {
            raw.invalid("path", "strategy", e.to_string())
        })?;
    let path = PathSpec {
        strategy,
        scan_speed: raw.f64_or("path", "scan_speed", 8e-3)?,
        layer_dwell: raw.f64_or("path", "layer_dwell", 0.3)?,
    };

    let d = MaterialParams::default();
    let material = MaterialParams {
        rho: raw.f64_or("material", "rho", d.rho)?,
        cp: raw.f64_or("material", "cp", d.cp)?,
        k: raw.f64_or("material", "k", d.k)?,
        h_conv: raw.f64_or("material", "h_conv", d.h_conv)?,
        emissivity: raw.f64_or("material", "emissivity", d.emissivity)?,
        t_amb: raw.f64_or("material", "t_amb", d.t_amb)?,
        t_melt: raw.f64_or("material", "t_melt", d.t_melt)?,
        t_deposit: raw.f64_or("material", "t_deposit", d.t_deposit)?,
        s_vol: raw.f64_or("material", "s_vol", d.s_vol)?,
    };
    let l = LaserParams::default();
    let laser = LaserParams {
        power: raw.f64_or("laser", "power", l.power)?,
        beam_radius: raw.f64_or("laser", "beam_radius", l.beam_radius)?,
        absorptivity: raw.f64_or("laser", "absorptivity", l.absorptivity)?,
    };
    let s = SimConfig::default();
    let sim = SimConfig {
        dt: raw.required_f64("sim", "dt")?,
        n_steps: {
            raw.require("sim", "n_steps")?;
            raw.usize_or("sim", "n_steps", 1)?
        },
        record_stride: raw.usize_or("sim", "record_stride", s.record_stride)?,
        deterministic: raw.bool_or("sim", "deterministic", s.deterministic)?,
        allow_unstable: raw.bool_or("sim", "allow_unstable", s.allow_unstable)?,
        fix_bottom: raw.bool_or("sim", "fix_bottom", s.fix_bottom)?,
    };
    material
        .validate()
        .map_err(|e| ConfigError::Inconsistent(format!("[material]: {e}")))?;
    laser
        .validate()
        .map_err(|e| ConfigError::Inconsistent(format!("[laser]: {e}")))?;

    let reference = match raw.text("optimize", "reference") {
        None => PowerSchedule::reference(),
        Some(p) => {
            let file = base.join(p);
            let text = std::fs::read_to_string(&file).map_err(|e| {
                raw.invalid(
                    "optimize",
                    "reference",
                    format!("cannot read {}: {e}", file.display()),
                )
            })?;
            PowerSchedule::parse_csv(&text)
                .map_err(|e| raw.invalid("optimize", "reference", e.to_string()))?
        }
    };
    let init_range = (
        raw.f64_or("optimize", "init_low", 0.5)?,
        raw.f64_or("optimize", "init_high", 1.5)?,
    );
    if init_range.1 < init_range.0 {
        return Err(raw.invalid("optimize", "init_high", "must be >= init_low"));
    }
    let optimize = OptimizeSection {
        case: parse_case(&raw)?,
        iterations: match raw.get("optimize", "iterations") {
            Some(_) => Some(raw.usize_or("optimize", "iterations", 0)?),
            None => None,
        },
        lr: raw.f64_opt("optimize", "lr")?,
        beta1: raw.f64_or("optimize", "beta1", 0.9)?,
        beta2: raw.f64_opt("optimize", "beta2")?,
        eps: raw.f64_or("optimize", "eps", 1e-8)?,
        seed: raw.usize_or("optimize", "seed", 0)? as u64,
        init_range,
        reference,
        reference_path: raw.text("optimize", "reference").map(str::to_string),
        target_depth: raw.f64_or("optimize", "target_depth", 0.5e-3)?,
        delta_clamp: raw.f64_opt("optimize", "delta_clamp")?,
        power_every: raw.usize_or("optimize", "power_every", 50)?,
    };
    for key in ["beta1", "beta2"] {
        if raw.f64_or("optimize", key, 0.5)? >= 1.0 {
            return Err(raw.invalid("optimize", key, "must be < 1"));
        }
    }

    let output = OutputSection {
        directory: base.join(raw.text("output", "directory").unwrap_or("out")),
        watch: raw.list("output", "watch")?,
        binary_history: raw.bool_or("output", "binary_history", false)?,
    };
    Ok(RunConfig {
        scenario: Scenario {
            mesh,
            path,
            material,
            laser,
            sim,
        },
        optimize,
        output,
        text: text.to_string(),
    })
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config_str(&text, base)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Writes a config that parses back to `cfg` (relative to the same base).
/// The reference schedule is written only as its file name.
pub fn render_config(cfg: &RunConfig) -> String {
    let s = &cfg.scenario;
    let mut out = String::from("[mesh]\n");
    match &s.mesh {
        MeshSpec::Block {
            extent,
            element_size,
        } => {
            out += &format!(
                "kind = block\nsubstrate = {}\nelement_size = {}\n",
                join(extent),
                join(element_size)
            );
        }
        MeshSpec::Layered {
            substrate,
            layers,
            element_size,
        } => {
            let l: Vec<String> = layers.iter().map(|(a, b)| format!("{a}x{b}")).collect();
            out += &format!(
                "kind = layered\nsubstrate = {}\nlayers = {}\nelement_size = {}\n",
                join(substrate),
                l.join(","),
                join(element_size)
            );
        }
        MeshSpec::Hourglass(h) => {
            out += &format!(
                "kind = hourglass\nsubstrate = {}\nhalf_widths = {}\nelement_size = {}\n",
                join(&h.substrate_extent),
                join(&h.layer_half_widths),
                join(&h.element_size)
            );
        }
    }
    let strategy = match s.path.strategy {
        Strategy::ZigZag => "zigzag",
        Strategy::InwardFromBoundary => "inward",
    };
    out += &format!(
        "\n[path]\nstrategy = {strategy}\nscan_speed = {:?}\nlayer_dwell = {:?}\n",
        s.path.scan_speed, s.path.layer_dwell
    );
    let m = &s.material;
    out += &format!(
        "\n[material]\nrho = {:?}\ncp = {:?}\nk = {:?}\nh_conv = {:?}\nemissivity = {:?}\nt_amb = {:?}\nt_melt = {:?}\nt_deposit = {:?}\ns_vol = {:?}\n",
        m.rho, m.cp, m.k, m.h_conv, m.emissivity, m.t_amb, m.t_melt, m.t_deposit, m.s_vol
    );
    out += &format!(
        "\n[laser]\npower = {:?}\nbeam_radius = {:?}\nabsorptivity = {:?}\n",
        s.laser.power, s.laser.beam_radius, s.laser.absorptivity
    );
    let c = &s.sim;
    out += &format!(
        "\n[sim]\ndt = {:?}\nn_steps = {}\nrecord_stride = {}\ndeterministic = {}\nallow_unstable = {}\nfix_bottom = {}\n",
        c.dt, c.n_steps, c.record_stride, c.deterministic, c.allow_unstable, c.fix_bottom
    );
    let o = &cfg.optimize;
    out += "\n[optimize]\n";
    if let Some(case) = o.case {
        out += &format!("case = {}\n", case.number());
    }
    if let Some(v) = o.iterations {
        out += &format!("iterations = {v}\n");
    }
    if let Some(v) = o.lr {
        out += &format!("lr = {v:?}\n");
    }
    out += &format!("beta1 = {:?}\n", o.beta1);
    if let Some(v) = o.beta2 {
        out += &format!("beta2 = {v:?}\n");
    }
    out += &format!(
        "eps = {:?}\nseed = {}\ninit_low = {:?}\ninit_high = {:?}\n",
        o.eps, o.seed, o.init_range.0, o.init_range.1
    );
    if let Some(r) = &o.reference_path {
        out += &format!("reference = {r}\n");
    }
    out += &format!("target_depth = {:?}\n", o.target_depth);
    if let Some(v) = o.delta_clamp {
        out += &format!("delta_clamp = {v:?}\n");
    }
    out += &format!("power_every = {}\n", o.power_every);
    out += &format!(
        "\n[output]\ndirectory = {}\n",
        cfg.output.directory.display()
    );
    if let Some(w) = &cfg.output.watch {
        out += &format!("watch = {}\n", join(w));
    }
    out += &format!("binary_history = {}\n", cfg.output.binary_history);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[mesh]\nsubstrate = 4,4,2\n[sim]\ndt = 0.01\nn_steps = 10\n";

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        parse_config_str(text, Path::new("."))
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.scenario.material, MaterialParams::default());
        assert_eq!(c.scenario.laser, LaserParams::default());
        assert_eq!(c.scenario.sim.n_steps, 10);
        assert_eq!(c.scenario.sim.record_stride, 1);
        assert!(!c.scenario.sim.allow_unstable);
        assert_eq!(c.optimize.seed, 0);
        assert_eq!(c.optimize.beta2, None);
        assert_eq!(c.optimize.iterations, None);
        assert_eq!(c.output.directory, Path::new("./out"));
        match c.scenario.mesh {
            MeshSpec::Hourglass(h) => assert_eq!(h.substrate_extent, [4, 4, 2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_dt_cites_the_key() {
        let err = parse("[mesh]\nsubstrate = 4,4,2\n[sim]\ndt = -1\nn_steps = 10\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[sim].dt"), "{msg}");
        assert!(msg.starts_with("line 4"), "{msg}");
    }

    #[test]
    fn unknown_key_has_line_number() {
        let err = parse("[mesh]\nsubstrate = 4,4,2\n[laser]\n# comment\nlazer_power = 100\n")
            .unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                line: 5,
                section: "laser".into(),
                key: "lazer_power".into()
            }
        );
    }

    #[test]
    fn missing_and_mistyped_keys() {
        let err = parse("[mesh]\nsubstrate = 4,4,2\n[sim]\ndt = 0.01\n").unwrap_err();
        assert!(matches!(err, ConfigError::Missing { ref key, .. } if key == "n_steps"));
        let err = parse("[mesh]\nsubstrate = 4,4,2\n[sim]\ndt = fast\nn_steps = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { line: 4, .. }));
        let err = parse("[mesh]\nsubstrate = 4,4\n[sim]\ndt = 1\nn_steps = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { line: 2, .. }));
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(
            parse("[meshes]\n"),
            Err(ConfigError::UnknownSection { line: 1, .. })
        ));
        assert!(matches!(
            parse("dt = 1\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            parse("[sim]\ndt\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            parse("[sim]\ndt = 1\ndt = 2\n"),
            Err(ConfigError::Duplicate { line: 3, .. })
        ));
    }

    #[test]
    fn inline_comments_and_layered_mesh() {
        let c = parse(
            "[mesh]\nkind = layered # two layers\nsubstrate = 6,6,2\nlayers = 4x4, 3x3\nelement_size = 1e-3, 1e-3, 5e-4\n[sim]\ndt = 0.01\nn_steps = 5\n",
        )
        .unwrap();
        assert_eq!(
            c.scenario.mesh,
            MeshSpec::Layered {
                substrate: [6, 6, 2],
                layers: vec![(4, 4), (3, 3)],
                element_size: [1e-3, 1e-3, 5e-4]
            }
        );
    }

    #[test]
    fn missing_reference_file_is_reported() {
        let err = parse(&format!(
            "{MINIMAL}[optimize]\nreference = /nonexistent/ref.csv\n"
        ))
        .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { line: 7, .. }), "{err}");
    }

    #[test]
    fn render_round_trips() {
        let text = "[mesh]\nkind = layered\nsubstrate = 6,6,2\nlayers = 4x4,3x3\nelement_size = 0.001\n\
                    [path]\nstrategy = inward\nscan_speed = 0.1e-1\n[material]\ncp = 512.25\n\
                    [sim]\ndt = 0.0123\nn_steps = 7\nfix_bottom = false\n\
                    [optimize]\ncase = 2\nlr = 0.02\nseed = 9\n[output]\ndirectory = /tmp/x\nwatch = 1,2,3\n";
        let a = parse(text).unwrap();
        let rendered = render_config(&a);
        let b = parse(&rendered).unwrap();
        assert_eq!(a.scenario, b.scenario);
        assert_eq!(a.optimize, b.optimize);
        assert_eq!(a.output, b.output);
        assert_eq!(render_config(&b), rendered);
    }

    #[test]
    fn every_key_is_documented() {
        let help = reference_text();
        for k in KEYS {
            assert!(help.contains(k.key));
        }
    }
}
