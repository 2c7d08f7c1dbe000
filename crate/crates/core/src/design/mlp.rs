//! 1-50-50-1 tanh network mapping normalized time to laser power.
//!
//! Flat parameter layout: `W1 (50x1), b1, W2 (50x50, row-major by output),
//! b2, W3 (1x50), b3`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdjointSink, Kernel, KernelInputs, ParamId};

pub const HIDDEN: usize = 50;
pub const N_PARAMS: usize = HIDDEN + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1;
/// Upper end of the power range, W.
pub const P_MAX: f64 = 1000.0;

const W1: usize = 0;
const B1: usize = W1 + HIDDEN;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + HIDDEN;

/// Network input for solver step `n` of `n_steps`: `2 t / t_end - 1`.
pub fn time_input(n: usize, n_steps: usize) -> f64 {
    2.0 * n as f64 / n_steps as f64 - 1.0
}

/// Uniform `+-1/sqrt(fan_in)` initialization for every weight and bias.
pub fn init_params(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![0.0; N_PARAMS];
    let fan_in = |i: usize| if i < W2 { 1.0 } else { HIDDEN as f64 };
    for (i, v) in p.iter_mut().enumerate() {
        let bound = 1.0 / f64::sqrt(fan_in(i));
        *v = rng.gen_range(-bound..=bound);
    }
    p
}

struct Activations {
    h1: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    out: f64,
}

fn activations(p: &[f64], x: f64) -> Activations {
    let mut h1 = [0.0; HIDDEN];
    for (i, h) in h1.iter_mut().enumerate() {
        *h = (p[W1 + i] * x + p[B1 + i]).tanh();
    }
    let mut h2 = [0.0; HIDDEN];
    for (o, h) in h2.iter_mut().enumerate() {
        let row = &p[W2 + o * HIDDEN..W2 + (o + 1) * HIDDEN];
        let a: f64 = row.iter().zip(&h1).map(|(w, h)| w * h).sum();
        *h = (a + p[B2 + o]).tanh();
    }
    let z: f64 = p[W3..W3 + HIDDEN]
        .iter()
        .zip(&h2)
        .map(|(w, h)| w * h)
        .sum::<f64>()
        + p[B3];
    Activations {
        h1,
        h2,
        out: z.tanh(),
    }
}

/// Power in W, always inside `(0, P_MAX)` up to rounding at the extremes.
pub fn mlp_forward(p: &[f64], x: f64) -> f64 {
    0.5 * P_MAX * (activations(p, x).out + 1.0)
}

/// Adds `g * d power / d p` into `grad`; returns `d power / d x`.
pub fn mlp_backward(p: &[f64], x: f64, g: f64, grad: &mut [f64]) -> f64 {
    let a = activations(p, x);
    let gz = g * 0.5 * P_MAX * (1.0 - a.out * a.out);
    grad[B3] += gz;
    let mut ga2 = [0.0; HIDDEN];
    for o in 0..HIDDEN {
        grad[W3 + o] += gz * a.h2[o];
        ga2[o] = gz * p[W3 + o] * (1.0 - a.h2[o] * a.h2[o]);
    }
    let mut gh1 = [0.0; HIDDEN];
    for o in 0..HIDDEN {
        grad[B2 + o] += ga2[o];
        let row = W2 + o * HIDDEN;
        for i in 0..HIDDEN {
            grad[row + i] += ga2[o] * a.h1[i];
            gh1[i] += p[row + i] * ga2[o];
        }
    }
    let mut gx = 0.0;
    for i in 0..HIDDEN {
        let ga1 = gh1[i] * (1.0 - a.h1[i] * a.h1[i]);
        grad[W1 + i] += ga1 * x;
        grad[B1 + i] += ga1;
        gx += ga1 * p[W1 + i];
    }
    gx
}

/// Power schedule over `n_steps` solver steps from a flat MLP parameter.
pub struct MlpSchedule {
    param: ParamId,
    n_steps: usize,
}

impl MlpSchedule {
    pub fn new(param: ParamId, n_steps: usize) -> Self {
        MlpSchedule { param, n_steps }
    }
}

/// Power at every solver step for a parameter vector.
pub fn power_curve(p: &[f64], n_steps: usize) -> Vec<f64> {
    (0..n_steps)
        .map(|n| mlp_forward(p, time_input(n, n_steps)))
        .collect()
}

impl Kernel for MlpSchedule {
    fn name(&self) -> &str {
        "mlp_schedule"
    }

    fn forward(&self, args: &KernelInputs<'_>) -> Result<Vec<f64>, String> {
        let p = &args.params.get(self.param).value;
        if p.len() != N_PARAMS {
            return Err(format!(
                "expected {N_PARAMS} network parameters, got {}",
                p.len()
            ));
        }
        Ok(power_curve(p, self.n_steps))
    }

    fn backward(
        &self,
        args: &KernelInputs<'_>,
        _output: &[f64],
        out_adjoint: &[f64],
        sink: &mut AdjointSink<'_>,
    ) {
        let p = &args.params.get(self.param).value;
        if let Some(grad) = sink.grads.param_mut(self.param) {
            for (n, &g) in out_adjoint.iter().enumerate() {
                if g != 0.0 {
                    mlp_backward(p, time_input(n, self.n_steps), g, grad);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count() {
        assert_eq!(N_PARAMS, 2701);
        assert_eq!(B3, N_PARAMS - 1);
    }

    #[test]
    fn zero_network_gives_half_power() {
        let p = vec![0.0; N_PARAMS];
        for x in [-1.0, 0.0, 0.3, 1.0] {
            assert_eq!(mlp_forward(&p, x), 500.0);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_params(3);
        assert_eq!(a, init_params(3));
        assert_ne!(a, init_params(4));
        assert!(a[..B1 + HIDDEN].iter().all(|v| v.abs() <= 1.0));
        assert!(a[W2..].iter().all(|v| v.abs() <= 1.0 / 50f64.sqrt()));
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let p = init_params(11);
        let x = 0.37;
        let mut grad = vec![0.0; N_PARAMS];
        let gx = mlp_backward(&p, x, 1.0, &mut grad);
        for &i in &[0, 7, B1 + 3, W2 + 123, W2 + 2499, B2 + 49, W3 + 10, B3] {
            let h = 1e-6;
            let mut up = p.clone();
            up[i] += h;
            let mut dn = p.clone();
            dn[i] -= h;
            let fd = (mlp_forward(&up, x) - mlp_forward(&dn, x)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-7 * fd.abs().max(1.0),
                "{i}: {fd} vs {}",
                grad[i]
            );
        }
        let fd = (mlp_forward(&p, x + 1e-6) - mlp_forward(&p, x - 1e-6)) / 2e-6;
        assert!((fd - gx).abs() <= 1e-6 * fd.abs().max(1.0));
    }

    proptest::proptest! {
        #[test]
        fn output_stays_in_range(seed in 0u64..1000, x in -1.0f64..1.0, scale in 0.1f64..5.0) {
            let p: Vec<f64> = init_params(seed).into_iter().map(|v| v * scale).collect();
            let y = mlp_forward(&p, x);
            proptest::prop_assert!(y > 0.0 && y < P_MAX);
        }
    }
}
