use super::fisher::FisherAnchor;
use crate::tensor::{ParamSet, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Rows with a smaller Euclidean norm are rejected by the contrastive loss.
pub const MIN_NORM: f64 = 1e-12;

fn check_norms<T: Scalar>(what: &str, norms: &[T]) -> Result<()> {
    if let Some((row, n)) = norms.iter().enumerate().find(|(_, n)| !(n.as_f64() > MIN_NORM)) {
        return Err(Error::invalid(
            "fcl_loss",
            format!("{what} row {row} has norm {:e}, need > {MIN_NORM:e}", n.as_f64()),
        ));
    }
    Ok(())
}

/// `mean_b (2 - 2 q_b.t_b / (|q_b| |t_b|))` recorded on the tape.
pub fn fcl_loss_tape<T: Scalar>(tape: &mut Tape<T>, q: Var, t: Var) -> Result<Var> {
    let qn = tape.row_norm(q)?;
    check_norms("q", tape.value(qn))?;
    let tn = tape.row_norm(t)?;
    check_norms("t", tape.value(tn))?;
    let dot = tape.row_dot(q, t)?;
    let denom = tape.mul(qn, tn)?;
    let cos = tape.div(dot, denom)?;
    let m = tape.mean(cos);
    let s = tape.scale(m, -2.0);
    Ok(tape.add_scalar(s, 2.0))
}

/// Value of the contrastive loss for `[B, D]` tensors.
pub fn fcl_loss<T: Scalar>(q: &Tensor<T>, t: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(q.cast());
    let t = tape.constant(t.cast());
    let l = fcl_loss_tape(&mut tape, q, t)?;
    Ok(tape.scalar(l))
}

/// `sum_p F_p (θ_p - θ*_p)^2` over the vars bound from the query extractor.
pub fn ewc_penalty_tape<T: Scalar>(tape: &mut Tape<T>, theta: &[Var], anchor: &FisherAnchor) -> Result<Var> {
    if theta.len() != anchor.fisher.len() {
        return Err(Error::Misaligned(format!(
            "{} parameters against an anchor of {}",
            theta.len(),
            anchor.fisher.len()
        )));
    }
    let mut total: Option<Var> = None;
    for ((&v, (name, f)), star) in theta.iter().zip(anchor.fisher.iter()).zip(anchor.theta_star.tensors()) {
        if tape.shape(v) != f.shape() {
            return Err(Error::Misaligned(format!(
                "`{name}`: {:?} against anchor {:?}",
                tape.shape(v),
                f.shape()
            )));
        }
        let s = tape.constant(star.cast::<T>());
        let w = tape.constant(f.cast::<T>());
        let d = tape.sub(v, s)?;
        let sq = tape.square(d);
        let wsq = tape.mul(sq, w)?;
        let term = tape.sum(wsq);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Misaligned("empty anchor".into()))
}

/// Value of the EWC penalty for `params` against `anchor`.
pub fn ewc_penalty(params: &ParamSet, anchor: &FisherAnchor) -> Result<f64> {
    params.check_aligned(&anchor.fisher)?;
    let mut sum = 0.0f64;
    for ((p, f), s) in params
        .tensors()
        .zip(anchor.fisher.tensors())
        .zip(anchor.theta_star.tensors())
    {
        for ((&p, &f), &s) in p.data().iter().zip(f.data()).zip(s.data()) {
            let d = p as f64 - s as f64;
            sum += f as f64 * d * d;
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(&[rows, data.len() / rows], data.to_vec()).unwrap()
    }

    #[test]
    fn endpoints() {
        let q = t(1, &[1.0, 2.0, -0.5]);
        assert!(fcl_loss(&q, &q).unwrap().abs() < 1e-12);
        assert!((fcl_loss(&q, &t(1, &[-1.0, -2.0, 0.5])).unwrap() - 4.0).abs() < 1e-12);
        assert!((fcl_loss(&t(1, &[1.0, 0.0]), &t(1, &[0.0, 3.0])).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_row_rejected() {
        let err = fcl_loss(&t(2, &[1.0, 0.0, 0.0, 0.0]), &t(2, &[1.0, 1.0, 1.0, 1.0])).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn ewc_direct_formula() {
        let mut theta = ParamSet::new();
        theta.push("a", Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap());
        let mut zero = ParamSet::new();
        zero.push("a", Tensor::zeros(&[2]));
        let anchor = FisherAnchor::new(
            {
                let mut f = ParamSet::new();
                f.push("a", Tensor::full(&[2], 1.0));
                f
            },
            zero,
            1,
        )
        .unwrap();
        assert_eq!(ewc_penalty(&theta, &anchor).unwrap(), 5.0);
        assert_eq!(ewc_penalty(&anchor.theta_star, &anchor).unwrap(), 0.0);
    }
}
