//! Reverse-mode differentiation over coarse-grained kernels.
//!
//! A [`Tape`] holds value slots (flat `f64` buffers) and an ordered list of
//! records. Each record applies a [`Kernel`] to input slots and parameters and
//! writes exactly one new output slot. Only kernel outputs are stored; any
//! intermediate a kernel needs for its adjoint is recomputed inside
//! [`Kernel::backward`]. For the thermal solver this means one nodal
//! temperature vector per time step is the entire checkpoint store.

mod gradcheck;
pub mod ops;

use std::collections::HashMap;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};

pub type SlotId = usize;
pub type ParamId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("non-finite output from kernel `{kernel}` at record {step}")]
    NumericOverflow { kernel: String, step: usize },
    #[error("kernel `{kernel}` failed at record {step}: {message}")]
    Kernel {
        kernel: String,
        step: usize,
        message: String,
    },
    #[error("state error: {0}")]
    State(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value while checking parameter {param} ({name})")]
    NonFiniteCheck { param: ParamId, name: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Vec<f64>,
    pub requires_grad: bool,
}

/// Dense, append-only parameter table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Result<ParamId, AdError> {
        let name = name.into();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(AdError::InvalidArgument(format!(
                "parameter `{name}` has non-finite values"
            )));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(AdError::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.params.push(Param {
            name,
            value,
            requires_grad,
        });
        Ok(self.params.len() - 1)
    }

    pub fn add_scalar(
        &mut self,
        name: impl Into<String>,
        value: f64,
        requires_grad: bool,
    ) -> Result<ParamId, AdError> {
        self.add(name, vec![value], requires_grad)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn scalar(&self, id: ParamId) -> f64 {
        self.params[id].value[0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }
}

/// Accumulated parameter gradients plus adjoints of tracked leaf slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientStore {
    params: Vec<Option<Vec<f64>>>,
    leaves: HashMap<SlotId, Vec<f64>>,
}

impl GradientStore {
    fn for_params(params: &ParamSet) -> Self {
        GradientStore {
            params: params
                .params
                .iter()
                .map(|p| p.requires_grad.then(|| vec![0.0; p.value.len()]))
                .collect(),
            leaves: HashMap::new(),
        }
    }

    /// Gradient of a parameter, `None` if it does not require gradients.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id).and_then(|g| g.as_deref())
    }

    pub fn scalar(&self, id: ParamId) -> f64 {
        self.param(id).map_or(0.0, |g| g[0])
    }

    pub fn leaf(&self, slot: SlotId) -> Option<&[f64]> {
        self.leaves.get(&slot).map(Vec::as_slice)
    }

    /// Adds to a parameter's gradient. Ignored for parameters without `requires_grad`.
    pub fn accumulate(&mut self, id: ParamId, index: usize, value: f64) {
        if let Some(Some(g)) = self.params.get_mut(id) {
            g[index] += value;
        }
    }

    pub fn wants(&self, id: ParamId) -> bool {
        matches!(self.params.get(id), Some(Some(_)))
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        self.params.get_mut(id).and_then(|g| g.as_deref_mut())
    }

    pub fn reset(&mut self) {
        for g in self.params.iter_mut().flatten() {
            g.fill(0.0);
        }
        self.leaves.clear();
    }
}

/// Inputs visible to a kernel during forward and backward.
pub struct KernelInputs<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub params: &'a ParamSet,
    /// Record index on the tape.
    pub step: usize,
}

/// Where a kernel's backward pass deposits input and parameter adjoints.
pub struct AdjointSink<'a> {
    input_slots: &'a [SlotId],
    slot_lens: &'a [usize],
    adjoints: &'a mut [Option<Vec<f64>>],
    pub grads: &'a mut GradientStore,
}

impl AdjointSink<'_> {
    /// Adjoint buffer of the `k`-th input, allocated as zeros on first use.
    /// Writes must accumulate (`+=`).
    pub fn input(&mut self, k: usize) -> &mut [f64] {
        let slot = self.input_slots[k];
        let len = self.slot_lens[slot];
        self.adjoints[slot].get_or_insert_with(|| vec![0.0; len])
    }
}

/// A differentiable operation with a hand-written adjoint.
///
/// `backward` must be linear in `out_adjoint` and must only accumulate into
/// the sink.
pub trait Kernel {
    fn name(&self) -> &str;
    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String>;
    fn backward(
        &self,
        args: &KernelInputs<'_>,
        output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    );
}

struct Record {
    kernel: Box<dyn Kernel>,
    inputs: Vec<SlotId>,
    output: SlotId,
}

enum Producer {
    Leaf { tracked: bool },
    Record(usize),
}

pub struct Tape {
    params: ParamSet,
    slots: Vec<Vec<f64>>,
    producers: Vec<Producer>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new(params: ParamSet) -> Self {
        Tape {
            params,
            slots: Vec::new(),
            producers: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Adds a constant input slot. Tracked leaves receive adjoints in backward.
    pub fn leaf(&mut self, values: Vec<f64>, tracked: bool) -> SlotId {
        self.slots.push(values);
        self.producers.push(Producer::Leaf { tracked });
        self.slots.len() - 1
    }

    pub fn value(&self, slot: SlotId) -> &[f64] {
        &self.slots[slot]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn kernel_names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.kernel.name())
    }

    /// Scalars stored as outputs of records whose kernel has the given name.
    pub fn stored_scalars(&self, kernel_name: &str) -> usize {
        self.records
            .iter()
            .filter(|r| r.kernel.name() == kernel_name)
            .map(|r| self.slots[r.output].len())
            .sum()
    }

    /// Runs `kernel` forward and appends a record. Returns the output slot.
    pub fn record_step(
        &mut self,
        kernel: Box<dyn Kernel>,
        inputs: &[SlotId],
    ) -> Result<SlotId, AdError> {
        if let Some(&bad) = inputs.iter().find(|&&s| s >= self.slots.len()) {
            return Err(AdError::InvalidArgument(format!(
                "unknown input slot {bad}"
            )));
        }
        let step = self.records.len();
        let args = KernelInputs {
            inputs: inputs.iter().map(|&s| self.slots[s].as_slice()).collect(),
            params: &self.params,
            step,
        };
        let out = kernel.forward(&args).map_err(|message| AdError::Kernel {
            kernel: kernel.name().to_string(),
            step,
            message,
        })?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NumericOverflow {
                kernel: kernel.name().to_string(),
                step,
            });
        }
        self.slots.push(out);
        self.producers.push(Producer::Record(step));
        let output = self.slots.len() - 1;
        self.records.push(Record {
            kernel,
            inputs: inputs.to_vec(),
            output,
        });
        Ok(output)
    }

    /// Reverse sweep from a scalar slot seeded with `seed`.
    ///
    /// Records are visited once each, last to first. An output adjoint is
    /// released as soon as its producing record has run, so the live adjoint
    /// set stays close to one state vector for chain-structured tapes.
    pub fn backward(&self, loss: SlotId, seed: f64) -> Result<GradientStore, AdError> {
        if self.records.is_empty() {
            return Err(AdError::State(
                "backward called before any forward record".into(),
            ));
        }
        let Some(Producer::Record(last)) = self.producers.get(loss) else {
            return Err(AdError::State(format!(
                "slot {loss} is not produced by a recorded kernel"
            )));
        };
        if self.slots[loss].len() != 1 {
            return Err(AdError::InvalidArgument(format!(
                "loss slot {loss} has {} entries, expected a scalar",
                self.slots[loss].len()
            )));
        }
        let slot_lens: Vec<usize> = self.slots.iter().map(Vec::len).collect();
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        adjoints[loss] = Some(vec![seed]);
        let mut grads = GradientStore::for_params(&self.params);

        for step in (0..=*last).rev() {
            let rec = &self.records[step];
            let Some(out_adj) = adjoints[rec.output].take() else {
                continue;
            };
            let args = KernelInputs {
                inputs: rec
                    .inputs
                    .iter()
                    .map(|&s| self.slots[s].as_slice())
                    .collect(),
                params: &self.params,
                step,
            };
            let mut sink = AdjointSink {
                input_slots: &rec.inputs,
                slot_lens: &slot_lens,
                adjoints: &mut adjoints,
                grads: &mut grads,
            };
            rec.kernel
                .backward(&args, &self.slots[rec.output], &out_adj, &mut sink);
        }
        for (slot, producer) in self.producers.iter().enumerate() {
            if let Producer::Leaf { tracked: true } = producer {
                let adj = adjoints[slot]
                    .take()
                    .unwrap_or_else(|| vec![0.0; slot_lens[slot]]);
                grads.leaves.insert(slot, adj);
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::ops::{Identity, ParamRead, Square};
    use super::*;

    #[test]
    fn square_kernel_records_value() {
        let mut tape = Tape::new(ParamSet::new());
        let x = tape.leaf(vec![3.0], true);
        let y = tape.record_step(Box::new(Square), &[x]).unwrap();
        assert_eq!(tape.value(y), &[9.0]);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn chain_preserves_order() {
        let mut tape = Tape::new(ParamSet::new());
        let x = tape.leaf(vec![2.0], true);
        let y = tape.record_step(Box::new(Square), &[x]).unwrap();
        let z = tape.record_step(Box::new(Identity), &[y]).unwrap();
        assert_eq!(
            tape.kernel_names().collect::<Vec<_>>(),
            ["square", "identity"]
        );
        let g = tape.backward(z, 1.0).unwrap();
        assert_eq!(g.leaf(x).unwrap(), &[4.0]);
    }

    #[test]
    fn identity_gradient_is_one() {
        let mut params = ParamSet::new();
        let p = params.add_scalar("x", 0.7, true).unwrap();
        let mut tape = Tape::new(params);
        let x = tape.record_step(Box::new(ParamRead::new(p)), &[]).unwrap();
        let y = tape.record_step(Box::new(Identity), &[x]).unwrap();
        assert_eq!(tape.backward(y, 1.0).unwrap().scalar(p), 1.0);
    }

    #[test]
    fn unused_param_gets_exact_zero() {
        let mut params = ParamSet::new();
        let used = params.add_scalar("a", 2.0, true).unwrap();
        let unused = params.add_scalar("b", 5.0, true).unwrap();
        let frozen = params.add_scalar("c", 5.0, false).unwrap();
        let mut tape = Tape::new(params);
        let a = tape
            .record_step(Box::new(ParamRead::new(used)), &[])
            .unwrap();
        let y = tape.record_step(Box::new(Square), &[a]).unwrap();
        let g = tape.backward(y, 1.0).unwrap();
        assert_eq!(g.param(unused), Some(&[0.0][..]));
        assert_eq!(g.param(frozen), None);
        assert_eq!(g.scalar(used), 4.0);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut tape = Tape::new(ParamSet::new());
        let x = tape.leaf(vec![1.0], false);
        assert!(matches!(tape.backward(x, 1.0), Err(AdError::State(_))));
    }

    #[test]
    fn non_finite_output_names_kernel() {
        let mut tape = Tape::new(ParamSet::new());
        let x = tape.leaf(vec![1e200], false);
        let err = tape.record_step(Box::new(Square), &[x]).unwrap_err();
        assert_eq!(
            err,
            AdError::NumericOverflow {
                kernel: "square".into(),
                step: 0
            }
        );
    }

    #[test]
    fn backward_is_repeatable_and_linear_in_seed() {
        let mut params = ParamSet::new();
        let p = params.add_scalar("x", 1.3, true).unwrap();
        let mut tape = Tape::new(params);
        let x = tape.record_step(Box::new(ParamRead::new(p)), &[]).unwrap();
        let y = tape.record_step(Box::new(Square), &[x]).unwrap();
        let z = tape.record_step(Box::new(Square), &[y]).unwrap();
        let g1 = tape.backward(z, 1.0).unwrap();
        let g1b = tape.backward(z, 1.0).unwrap();
        let g2 = tape.backward(z, 2.0).unwrap();
        assert_eq!(g1, g1b);
        assert_eq!(g2.scalar(p), 2.0 * g1.scalar(p));
    }

    #[test]
    fn gradient_store_reset_zeroes() {
        let mut params = ParamSet::new();
        let p = params.add("v", vec![1.0, 2.0], true).unwrap();
        let mut g = GradientStore::for_params(&params);
        g.accumulate(p, 1, 3.0);
        g.accumulate(p, 1, 4.0);
        assert_eq!(g.param(p).unwrap(), &[0.0, 7.0]);
        g.reset();
        assert_eq!(g.param(p).unwrap(), &[0.0, 0.0]);
    }
}
