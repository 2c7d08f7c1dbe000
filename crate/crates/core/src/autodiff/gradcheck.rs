use super::{AdError, ParamId, ParamSet, SlotId, Tape};

/// Relative error floor in the denominator.
pub const REL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: ParamId,
    pub name: String,
    pub index: usize,
    pub ad: f64,
    pub fd: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares reverse-mode gradients against central differences for every
/// scalar of every `requires_grad` parameter.
///
/// `build` records a full forward pass for a parameter set and returns the
/// tape with its scalar loss slot. The step for entry `θ` is `eps * max(|θ|, 1e-3)`.
pub fn grad_check<F>(build: F, params: &ParamSet, eps: f64) -> Result<GradCheckReport, AdError>
where
    F: Fn(&ParamSet) -> Result<(Tape, SlotId), AdError>,
{
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(AdError::InvalidArgument(format!(
            "eps {eps} outside [1e-8, 1e-3]"
        )));
    }
    let (tape, loss) = build(params)?;
    let grads = tape.backward(loss, 1.0)?;
    drop(tape);

    let eval = |p: &ParamSet, id: ParamId| -> Result<f64, AdError> {
        let (t, l) = build(p)?;
        let v = t.value(l)[0];
        if !v.is_finite() {
            return Err(AdError::NonFiniteCheck {
                param: id,
                name: p.get(id).name.clone(),
            });
        }
        Ok(v)
    };

    let mut entries = Vec::new();
    for (id, param) in params.iter() {
        if !param.requires_grad {
            continue;
        }
        let ad = grads.param(id).expect("requires_grad param has a gradient");
        for index in 0..param.value.len() {
            let theta = param.value[index];
            let h = eps * theta.abs().max(1e-3);
            let mut plus = params.clone();
            plus.get_mut(id).value[index] = theta + h;
            let mut minus = params.clone();
            minus.get_mut(id).value[index] = theta - h;
            let fd = (eval(&plus, id)? - eval(&minus, id)?) / (2.0 * h);
            let rel_error = (ad[index] - fd).abs() / fd.abs().max(REL_FLOOR);
            entries.push(GradCheckEntry {
                param: id,
                name: param.name.clone(),
                index,
                ad: ad[index],
                fd,
                rel_error,
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops::{ParamRead, Square, Sum};

    fn sum_of_squares(p: &ParamSet) -> Result<(Tape, SlotId), AdError> {
        let mut tape = Tape::new(p.clone());
        let x = tape.record_step(Box::new(ParamRead::new(0)), &[])?;
        let sq = tape.record_step(Box::new(Square), &[x])?;
        let s = tape.record_step(Box::new(Sum), &[sq])?;
        Ok((tape, s))
    }

    #[test]
    fn exact_quadratic() {
        let mut p = ParamSet::new();
        p.add("x", vec![1.0, 2.0, 3.0], true).unwrap();
        let report = grad_check(sum_of_squares, &p, 1e-6).unwrap();
        assert_eq!(report.entries.len(), 3);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function() {
        let mut p = ParamSet::new();
        p.add_scalar("unused", 4.0, true).unwrap();
        p.add_scalar("c", 2.0, false).unwrap();
        let report = grad_check(
            |p| {
                let mut tape = Tape::new(p.clone());
                let c = tape.record_step(Box::new(ParamRead::new(1)), &[])?;
                let s = tape.record_step(Box::new(Sum), &[c])?;
                Ok((tape, s))
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.entries[0].ad, 0.0);
        assert_eq!(report.entries[0].fd, 0.0);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let p = ParamSet::new();
        assert!(grad_check(sum_of_squares, &p, 1e-2).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let mut p = ParamSet::new();
        p.add_scalar("x", 1e155, true).unwrap();
        // the base evaluation overflows inside the tape first
        let err = grad_check(sum_of_squares, &p, 1e-3).unwrap_err();
        assert!(matches!(
            err,
            AdError::NumericOverflow { .. } | AdError::NonFiniteCheck { .. }
        ));
    }
}
