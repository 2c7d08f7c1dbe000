//! Small elementwise kernels. Enough to express scalar expression graphs and
//! to glue parameters into the tape.

use super::{AdjointSink, Kernel, KernelInputs, ParamId};

/// Copies a parameter's value into a slot; the adjoint flows back to the parameter.
pub struct ParamRead {
    param: ParamId,
}

impl ParamRead {
    pub fn new(param: ParamId) -> Self {
        ParamRead { param }
    }
}

impl Kernel for ParamRead {
    fn name(&self) -> &str {
        "param"
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        Ok(args.params.get(self.param).value.clone())
    }

    fn backward(
        &self,
        _args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        if let Some(g) = sink.grads.param_mut(self.param) {
            for (gi, a) in g.iter_mut().zip(out_adjoint) {
                *gi += a;
            }
        }
    }
}

pub struct Identity;

impl Kernel for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        Ok(args.inputs[0].to_vec())
    }

    fn backward(
        &self,
        _args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        for (a, g) in sink.input(0).iter_mut().zip(out_adjoint) {
            *a += g;
        }
    }
}

/// Elementwise square.
pub struct Square;

impl Kernel for Square {
    fn name(&self) -> &str {
        "square"
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        Ok(args.inputs[0].iter().map(|x| x * x).collect())
    }

    fn backward(
        &self,
        args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        let x = args.inputs[0];
        for (i, a) in sink.input(0).iter_mut().enumerate() {
            *a += 2.0 * x[i] * out_adjoint[i];
        }
    }
}

/// Elementwise product of two equally sized inputs.
pub struct Mul;

impl Kernel for Mul {
    fn name(&self) -> &str {
        "mul"
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        let (a, b) = (args.inputs[0], args.inputs[1]);
        if a.len() != b.len() {
            return Err(format!("length mismatch {} vs {}", a.len(), b.len()));
        }
        Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
    }

    fn backward(
        &self,
        args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        let (a, b) = (args.inputs[0], args.inputs[1]);
        for (i, g) in sink.input(0).iter_mut().enumerate() {
            *g += b[i] * out_adjoint[i];
        }
        for (i, g) in sink.input(1).iter_mut().enumerate() {
            *g += a[i] * out_adjoint[i];
        }
    }
}

/// `inputs[0] + sign * inputs[1]`, elementwise.
pub struct AddScaled {
    sign: f64,
}

impl AddScaled {
    pub fn add() -> Self {
        AddScaled { sign: 1.0 }
    }

    pub fn sub() -> Self {
        AddScaled { sign: -1.0 }
    }
}

impl Kernel for AddScaled {
    fn name(&self) -> &str {
        if self.sign > 0.0 {
            "add"
        } else {
            "sub"
        }
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        let (a, b) = (args.inputs[0], args.inputs[1]);
        if a.len() != b.len() {
            return Err(format!("length mismatch {} vs {}", a.len(), b.len()));
        }
        Ok(a.iter().zip(b).map(|(x, y)| x + self.sign * y).collect())
    }

    fn backward(
        &self,
        _args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        for (g, a) in sink.input(0).iter_mut().zip(out_adjoint) {
            *g += a;
        }
        for (g, a) in sink.input(1).iter_mut().zip(out_adjoint) {
            *g += self.sign * a;
        }
    }
}

/// Elementwise hyperbolic tangent, exact derivative `1 - tanh^2`.
pub struct Tanh;

impl Kernel for Tanh {
    fn name(&self) -> &str {
        "tanh"
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        Ok(args.inputs[0].iter().map(|x| x.tanh()).collect())
    }

    fn backward(
        &self,
        _args: &KernelInputs<'_>,
        output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        for (i, g) in sink.input(0).iter_mut().enumerate() {
            *g += (1.0 - output[i] * output[i]) * out_adjoint[i];
        }
    }
}

/// Sum of all entries to a scalar.
pub struct Sum;

impl Kernel for Sum {
    fn name(&self) -> &str {
        "sum"
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        Ok(vec![args.inputs[0].iter().sum()])
    }

    fn backward(
        &self,
        _args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        for g in sink.input(0).iter_mut() {
            *g += out_adjoint[0];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamSet, Tape};

    /// C = Y - tanh(W X + b) with X=1, W=2, b=3, Y=6.
    #[test]
    fn tanh_regression_fixture() {
        let mut params = ParamSet::new();
        let w = params.add_scalar("W", 2.0, true).unwrap();
        let b = params.add_scalar("b", 3.0, true).unwrap();
        let mut tape = Tape::new(params);
        let x = tape.leaf(vec![1.0], true);
        let y = tape.leaf(vec![6.0], false);
        let wv = tape.record_step(Box::new(ParamRead::new(w)), &[]).unwrap();
        let bv = tape.record_step(Box::new(ParamRead::new(b)), &[]).unwrap();
        let w1 = tape.record_step(Box::new(Mul), &[wv, x]).unwrap();
        let w2 = tape
            .record_step(Box::new(AddScaled::add()), &[w1, bv])
            .unwrap();
        let w3 = tape.record_step(Box::new(Tanh), &[w2]).unwrap();
        let c = tape
            .record_step(Box::new(AddScaled::sub()), &[y, w3])
            .unwrap();
        assert_eq!(tape.value(w2), &[5.0]);
        assert!((tape.value(c)[0] - (6.0 - 5f64.tanh())).abs() < 1e-15);
        let g = tape.backward(c, 1.0).unwrap();
        let analytic = -(1.0 - 5f64.tanh().powi(2));
        assert!((g.scalar(w) - analytic).abs() <= 1e-15);
        assert!((g.scalar(b) - analytic).abs() <= 1e-15);
        assert!((g.leaf(x).unwrap()[0] - 2.0 * analytic).abs() <= 1e-15);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new(ParamSet::new());
        let x = tape.leaf(vec![3.0, -2.0], true);
        let y = tape.record_step(Box::new(Mul), &[x, x]).unwrap();
        let s = tape.record_step(Box::new(Sum), &[y]).unwrap();
        let g = tape.backward(s, 1.0).unwrap();
        assert_eq!(g.leaf(x).unwrap(), &[6.0, -4.0]);
    }
}
