//! Thermal history output.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic      8 bytes   b"TFHIST01"
//! n_records  u64
//! n_nodes    u64
//! dt         f64
//! then n_records times:
//!   step     u64
//!   T        n_nodes x f64
//! ```

use std::io::{self, Read, Write};

use super::ThermalHistory;

pub const HISTORY_MAGIC: &[u8; 8] = b"TFHIST01";

/// `step,time,node_id,T` rows for the watched nodes at step 0 and every recorded step.
pub fn write_history_csv<W: Write>(
    out: &mut W,
    history: &ThermalHistory,
    watch: &[usize],
) -> io::Result<()> {
    let n_nodes = history.sim.n_nodes();
    if let Some(bad) = watch.iter().find(|&&n| n >= n_nodes) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("watched node {bad} out of range"),
        ));
    }
    let dt = history.sim.config.dt;
    writeln!(out, "step,time,node_id,T")?;
    for step in std::iter::once(0).chain(history.recorded_steps()) {
        let t = history.temps(step);
        for &n in watch {
            writeln!(out, "{step},{},{n},{}", step as f64 * dt, t[n])?;
        }
    }
    Ok(())
}

pub fn write_history_binary<W: Write>(out: &mut W, history: &ThermalHistory) -> io::Result<()> {
    let steps: Vec<usize> = std::iter::once(0).chain(history.recorded_steps()).collect();
    out.write_all(HISTORY_MAGIC)?;
    out.write_all(&(steps.len() as u64).to_le_bytes())?;
    out.write_all(&(history.sim.n_nodes() as u64).to_le_bytes())?;
    out.write_all(&history.sim.config.dt.to_le_bytes())?;
    for step in steps {
        out.write_all(&(step as u64).to_le_bytes())?;
        for v in history.temps(step) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Decoded binary dump: `(dt, [(step, temperatures)])`.
pub type HistoryDump = (f64, Vec<(usize, Vec<f64>)>);

pub fn read_history_binary<R: Read>(input: &mut R) -> io::Result<HistoryDump> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != HISTORY_MAGIC {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "not a thermal history dump",
        ));
    }
    let mut word = [0u8; 8];
    let mut next = |input: &mut R| -> io::Result<[u8; 8]> {
        input.read_exact(&mut word)?;
        Ok(word)
    };
    let n_records = u64::from_le_bytes(next(input)?) as usize;
    let n_nodes = u64::from_le_bytes(next(input)?) as usize;
    let dt = f64::from_le_bytes(next(input)?);
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let step = u64::from_le_bytes(next(input)?) as usize;
        let mut t = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            t.push(f64::from_le_bytes(next(input)?));
        }
        records.push((step, t));
    }
    Ok((dt, records))
}
