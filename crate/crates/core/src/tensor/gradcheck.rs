use super::{ParamSet, Scalar, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |autodiff - central| / max(|autodiff|, |central|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter index and element of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Number of scalar entries compared (tracked parameters only).
    pub checked: usize,
}

/// Compares tape gradients against central finite differences.
///
/// `f` builds a scalar loss from the bound parameters. Untracked parameters
/// are bound but excluded from the comparison.
pub fn grad_check<T, F>(params: &ParamSet<T>, eps: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(eps > 1e-5 && eps < 1e-2) {
        return Err(Error::invalid(
            "grad_check",
            format!("epsilon must lie in (1e-5, 1e-2), got {eps}"),
        ));
    }
    let eval = |p: &ParamSet<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar(loss).as_f64())
    };

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = f(&mut tape, &vars)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            element: 0,
            context: "loss at the unperturbed point".into(),
        });
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for (pi, ((_, t), &v)) in params.iter().zip(&vars).enumerate() {
        if !t.is_tracked() {
            continue;
        }
        let analytic = grads.get(v).expect("tracked leaf has a gradient");
        for e in 0..t.len() {
            let orig = t.data()[e];
            let set = |probe: &mut ParamSet<T>, val: T| {
                probe.tensors_mut().nth(pi).unwrap().data_mut()[e] = val;
            };
            set(&mut probe, T::from_f64(orig.as_f64() + eps));
            let plus = eval(&probe)?;
            set(&mut probe, T::from_f64(orig.as_f64() - eps));
            let minus = eval(&probe)?;
            set(&mut probe, orig);
            if !plus.is_finite() || !minus.is_finite() || !analytic[e].is_finite() {
                return Err(Error::NonFinite {
                    index: pi,
                    element: e,
                    context: "perturbed loss or gradient".into(),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[e].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_model_is_exact() {
        let mut p = ParamSet::<f64>::new();
        p.push("w", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap().tracked());
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, -3.0]).unwrap();
        let r = grad_check(&p, 1e-3, |tape, v| {
            let xv = tape.constant(x.clone());
            let prod = tape.mul(v[0], xv)?;
            Ok(tape.sum(prod))
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn frozen_parameters_are_excluded() {
        let mut p = ParamSet::<f64>::new();
        p.push("w", Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap().tracked());
        p.push("frozen", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let r = grad_check(&p, 1e-3, |tape, v| {
            let prod = tape.mul(v[0], v[1])?;
            Ok(tape.sum(prod))
        })
        .unwrap();
        assert_eq!(r.checked, 2);
        assert_eq!(r.worst.map(|w| w.0), Some(0));
    }

    #[test]
    fn epsilon_range_enforced() {
        let p = ParamSet::<f64>::new();
        for eps in [1e-6, 0.5, f64::NAN] {
            assert!(grad_check(&p, eps, |tape, _| Ok(tape.constant(Tensor::scalar(0.0)))).is_err());
        }
    }

    #[test]
    fn non_finite_reported_with_index() {
        let mut p = ParamSet::<f64>::new();
        p.push("a", Tensor::from_f64(&[1], &[1.0]).unwrap().tracked());
        p.push("b", Tensor::from_f64(&[2], &[1.0, 1e300]).unwrap().tracked());
        let err = grad_check(&p, 1e-3, |tape, v| {
            let sq = tape.square(v[1]);
            let s = tape.sum(sq);
            let a = tape.sum(v[0]);
            tape.add(s, a)
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}
