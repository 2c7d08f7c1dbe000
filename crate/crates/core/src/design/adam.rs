use super::DesignError;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, eps: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    /// One update in place. Fails without touching any state on a
    /// non-finite gradient, reporting its index.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), DesignError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DesignError::InvalidArgument(format!(
                "optimizer sized for {} parameters, got {} values and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(DesignError::NonFiniteGradient {
                name: format!("#{index}"),
            });
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut adam = Adam::new(3, 0.1);
        let mut p = [1.0, 1.0, 1.0];
        adam.step(&mut p, &[2.0, -0.5, 1e-3]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] - 1.1).abs() < 1e-8);
        assert!((p[2] - 0.9).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = [0.3, -2.0];
        for _ in 0..5 {
            adam.step(&mut p, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn quadratic_trajectory_matches_reference() {
        // independent transcription of the update for f = theta^2
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for k in 1..=10 {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            th -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
            reference.push(th);
        }
        let mut adam = Adam::new(1, lr);
        let mut p = [1.0];
        for r in reference {
            let g = [2.0 * p[0]];
            adam.step(&mut p, &g).unwrap();
            assert!((p[0] - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = [1.0, 1.0];
        let err = adam.step(&mut p, &[0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, DesignError::NonFiniteGradient { .. }));
        assert_eq!(adam.iteration(), 0);
    }
}
