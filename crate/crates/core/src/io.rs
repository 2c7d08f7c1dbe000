//! File formats: mesh JSON, toolpath CSV and birth-schedule CSV.
//!
//! Mesh coordinates are written as hex-float strings (`"0x1.8p-10"`) so that
//! every finite `f64` survives a round trip bit for bit. Plain JSON numbers
//! are accepted on input. CSV files use Rust's shortest round-trip decimal
//! formatting, which is also exact.

use std::fmt::Write as _;

use serde_json::{json, Value};
use thiserror::Error;

use crate::mesh::{ElementTag, HexMesh, NodeId};
use crate::toolpath::{BirthSchedule, Toolpath, ToolpathSegment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("malformed mesh file: {0}")]
    Mesh(String),
    #[error("bad hex float `{0}`")]
    HexFloat(String),
}

/// `f64` as a C99-style hex float. Non-finite values become `nan`, `inf`, `-inf`.
pub fn format_hex_f64(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 {
        (0, -1022)
    } else {
        (1, exp_bits - 1023)
    };
    let mut digits = format!("{mant:013x}");
    while digits.ends_with('0') {
        digits.pop();
    }
    let mut out = format!("{sign}0x{lead}");
    if !digits.is_empty() {
        out.push('.');
        out.push_str(&digits);
    }
    let _ = write!(out, "p{}{}", if exp >= 0 { "+" } else { "" }, exp);
    out
}

/// `2^e` for `e` in `[-1074, 1023]`, built from bits.
fn pow2(e: i64) -> f64 {
    if e >= -1022 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        f64::from_bits(1u64 << (e + 1074))
    }
}

/// Parses the output of [`format_hex_f64`] (and hex floats with up to 13 fraction digits generally).
pub fn parse_hex_f64(s: &str) -> Result<f64, IoError> {
    let bad = || IoError::HexFloat(s.to_string());
    let t = s.trim();
    match t {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let (neg, rest) = match t.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let rest = rest
        .strip_prefix("0x")
        .or_else(|| rest.strip_prefix("0X"))
        .ok_or_else(bad)?;
    let (mantissa, exp) = rest.split_once(['p', 'P']).ok_or_else(bad)?;
    let exp: i64 = exp.parse().map_err(|_| bad())?;
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int_part.is_empty() || int_part.len() > 1 || frac_part.len() > 13 {
        return Err(bad());
    }
    let mut m: u64 = 0;
    for c in int_part.chars().chain(frac_part.chars()) {
        m = m * 16 + c.to_digit(16).ok_or_else(bad)? as u64;
    }
    let mut e = exp - 4 * frac_part.len() as i64;
    let mut x = m as f64;
    if m != 0 {
        // at most one rounding: scale into the normal range first
        if e < -1022 {
            x *= pow2(-1022);
            e += 1022;
        }
        while e > 1023 {
            x *= pow2(1023);
            e -= 1023;
        }
        if e < -1074 {
            return Err(bad());
        }
        x *= pow2(e);
    }
    Ok(if neg { -x } else { x })
}

fn json_f64(v: &Value) -> Result<f64, IoError> {
    match v {
        Value::String(s) => parse_hex_f64(s),
        Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| IoError::Mesh(format!("bad number {n}"))),
        other => Err(IoError::Mesh(format!("expected a number, got {other}"))),
    }
}

fn json_vec3(v: &Value, what: &str) -> Result<[f64; 3], IoError> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| IoError::Mesh(format!("{what} must have 3 entries")))?;
    Ok([json_f64(&arr[0])?, json_f64(&arr[1])?, json_f64(&arr[2])?])
}

pub fn mesh_to_json(mesh: &HexMesh) -> String {
    let hex3 = |p: &[f64; 3]| {
        json!([
            format_hex_f64(p[0]),
            format_hex_f64(p[1]),
            format_hex_f64(p[2])
        ])
    };
    let tags: Vec<&str> = mesh
        .tags
        .iter()
        .map(|t| match t {
            ElementTag::Substrate => "substrate",
            ElementTag::Build => "build",
        })
        .collect();
    let doc = json!({
        "nodes": mesh.nodes.iter().map(hex3).collect::<Vec<_>>(),
        "elements": mesh.elements,
        "tags": tags,
        "element_size": hex3(&mesh.element_size),
    });
    doc.to_string()
}

pub fn mesh_from_json(text: &str) -> Result<HexMesh, IoError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| IoError::Mesh(e.to_string()))?;
    let field = |name: &str| {
        doc.get(name)
            .ok_or_else(|| IoError::Mesh(format!("missing `{name}`")))
    };
    let nodes = field("nodes")?
        .as_array()
        .ok_or_else(|| IoError::Mesh("`nodes` must be an array".into()))?
        .iter()
        .map(|p| json_vec3(p, "node"))
        .collect::<Result<Vec<_>, _>>()?;
    let elements = field("elements")?
        .as_array()
        .ok_or_else(|| IoError::Mesh("`elements` must be an array".into()))?
        .iter()
        .map(|e| {
            let ids = e
                .as_array()
                .filter(|a| a.len() == 8)
                .ok_or_else(|| IoError::Mesh("element must list 8 nodes".into()))?;
            let mut out = [0 as NodeId; 8];
            for (o, v) in out.iter_mut().zip(ids) {
                let id = v
                    .as_u64()
                    .ok_or_else(|| IoError::Mesh(format!("bad node id {v}")))?
                    as usize;
                if id >= nodes.len() {
                    return Err(IoError::Mesh(format!("node id {id} out of range")));
                }
                *o = id;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let tags = field("tags")?
        .as_array()
        .ok_or_else(|| IoError::Mesh("`tags` must be an array".into()))?
        .iter()
        .map(|t| match t.as_str() {
            Some("substrate") => Ok(ElementTag::Substrate),
            Some("build") => Ok(ElementTag::Build),
            _ => Err(IoError::Mesh(format!("unknown tag {t}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if tags.len() != elements.len() {
        return Err(IoError::Mesh(format!(
            "{} tags for {} elements",
            tags.len(),
            elements.len()
        )));
    }
    let element_size = json_vec3(field("element_size")?, "element_size")?;
    Ok(HexMesh {
        nodes,
        elements,
        tags,
        element_size,
    })
}

/// Header comments carry the scan speed and dwell so the path reads back whole.
pub fn toolpath_to_csv(path: &Toolpath) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# scan_speed={}", path.scan_speed);
    let _ = writeln!(out, "# layer_dwell={}", path.layer_dwell);
    out.push_str("t_start,t_end,x0,y0,z0,x1,y1,z1,on\n");
    for s in &path.segments {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.t_start,
            s.t_end,
            s.p_start[0],
            s.p_start[1],
            s.p_start[2],
            s.p_end[0],
            s.p_end[1],
            s.p_end[2],
            u8::from(s.laser_on)
        );
    }
    out
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T, IoError> {
    s.trim().parse().map_err(|_| IoError::Parse {
        line,
        msg: format!("bad {what} `{}`", s.trim()),
    })
}

pub fn toolpath_from_csv(text: &str) -> Result<Toolpath, IoError> {
    let mut path = Toolpath {
        segments: Vec::new(),
        scan_speed: f64::NAN,
        layer_dwell: 0.0,
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if let Some(meta) = l.strip_prefix('#') {
            if let Some((k, v)) = meta.split_once('=') {
                match k.trim() {
                    "scan_speed" => path.scan_speed = parse_num(v, line, "scan_speed")?,
                    "layer_dwell" => path.layer_dwell = parse_num(v, line, "layer_dwell")?,
                    _ => {}
                }
            }
            continue;
        }
        if l.is_empty() || l.starts_with("t_start") {
            continue;
        }
        let cols: Vec<&str> = l.split(',').collect();
        if cols.len() != 9 {
            return Err(IoError::Parse {
                line,
                msg: format!("expected 9 columns, got {}", cols.len()),
            });
        }
        let f = |k: usize| parse_num::<f64>(cols[k], line, "number");
        let on = match cols[8].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(IoError::Parse {
                    line,
                    msg: format!("`on` must be 0 or 1, got `{other}`"),
                })
            }
        };
        path.segments.push(ToolpathSegment {
            t_start: f(0)?,
            t_end: f(1)?,
            p_start: [f(2)?, f(3)?, f(4)?],
            p_end: [f(5)?, f(6)?, f(7)?],
            laser_on: on,
        });
    }
    if path.scan_speed.is_nan() {
        // fall back to the speed of the first printing segment
        path.scan_speed = path
            .segments
            .iter()
            .find(|s| s.laser_on && s.t_end > s.t_start)
            .map(|s| {
                let d: f64 = (0..3)
                    .map(|k| (s.p_end[k] - s.p_start[k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                d / (s.t_end - s.t_start)
            })
            .unwrap_or(0.0);
    }
    Ok(path)
}

pub fn birth_to_csv(schedule: &BirthSchedule) -> String {
    let mut out = String::from("element_id,birth_step\n");
    for (e, b) in schedule.birth_step.iter().enumerate() {
        let _ = writeln!(out, "{e},{b}");
    }
    out
}

pub fn birth_from_csv(text: &str) -> Result<BirthSchedule, IoError> {
    let mut birth_step = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') || l.starts_with("element_id") {
            continue;
        }
        let (id, step) = l.split_once(',').ok_or_else(|| IoError::Parse {
            line,
            msg: "expected `element_id,birth_step`".into(),
        })?;
        let id: usize = parse_num(id, line, "element id")?;
        if id != birth_step.len() {
            return Err(IoError::Parse {
                line,
                msg: format!("element ids must be consecutive from 0, got {id}"),
            });
        }
        birth_step.push(parse_num(step, line, "birth step")?);
    }
    Ok(BirthSchedule { birth_step })
}
