use super::DesignError;

const REFERENCE_CSV: &str = include_str!("../../data/case2_reference_power.csv");

/// Piecewise-linear power curve over normalized time; repeated knots are steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSchedule {
    knots: Vec<(f64, f64)>,
}

impl PowerSchedule {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, DesignError> {
        if knots.len() < 2 {
            return Err(DesignError::InvalidArgument(
                "schedule needs at least two knots".into(),
            ));
        }
        if knots.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(DesignError::InvalidArgument(
                "schedule knots must be sorted in time".into(),
            ));
        }
        if knots
            .iter()
            .any(|&(t, p)| !t.is_finite() || !(0.0..=1000.0).contains(&p))
        {
            return Err(DesignError::InvalidArgument(
                "schedule power must lie in [0, 1000] W".into(),
            ));
        }
        Ok(PowerSchedule { knots })
    }

    /// Parses `t_norm,power_w` rows; `#` lines and the header are skipped.
    pub fn parse_csv(text: &str) -> Result<Self, DesignError> {
        let mut knots = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("t_norm") {
                continue;
            }
            let mut cols = line.split(',').map(|c| c.trim().parse::<f64>());
            match (cols.next(), cols.next(), cols.next()) {
                (Some(Ok(t)), Some(Ok(p)), None) => knots.push((t, p)),
                _ => {
                    return Err(DesignError::InvalidArgument(format!(
                        "schedule line {}: expected `t_norm,power_w`",
                        i + 1
                    )))
                }
            }
        }
        Self::new(knots)
    }

    /// The built-in case 2 reference.
    pub fn reference() -> Self {
        Self::parse_csv(REFERENCE_CSV).expect("bundled schedule is valid")
    }

    /// Power at normalized time `x`; right-continuous at steps, clamped outside the knots.
    pub fn at(&self, x: f64) -> f64 {
        let k = &self.knots;
        if x < k[0].0 {
            return k[0].1;
        }
        // last knot with t <= x
        let i = k.partition_point(|&(t, _)| t <= x) - 1;
        if i + 1 == k.len() {
            return k[i].1;
        }
        let (t0, p0) = k[i];
        let (t1, p1) = k[i + 1];
        p0 + (x - t0) * (p1 - p0) / (t1 - t0)
    }

    /// Samples at solver steps `n = 0..n_steps`, `x = n / n_steps`.
    pub fn sample(&self, n_steps: usize) -> Vec<f64> {
        (0..n_steps)
            .map(|n| self.at(n as f64 / n_steps as f64))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_has_ramps_and_steps() {
        let s = PowerSchedule::reference();
        assert_eq!(s.at(0.0), 350.0);
        assert_eq!(s.at(0.1499), 350.0);
        assert_eq!(s.at(0.15), 500.0);
        assert!((s.at(0.225) - 600.0).abs() < 1e-9);
        assert!((s.at(0.5) - 575.0).abs() < 1e-9);
        assert_eq!(s.at(0.85), 650.0);
        assert!((s.at(0.925) - 475.0).abs() < 1e-9);
        assert_eq!(s.at(1.5), 300.0);
    }

    #[test]
    fn bad_rows_are_rejected() {
        assert!(PowerSchedule::parse_csv("0,1\n1,x\n").is_err());
        assert!(PowerSchedule::parse_csv("0,1\n").is_err());
        assert!(PowerSchedule::parse_csv("0.5,1\n0.1,2\n").is_err());
        assert!(PowerSchedule::parse_csv("0,1\n1,2000\n").is_err());
    }
}
