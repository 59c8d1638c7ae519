use crate::detector::{
    decoder_forward, det_loss_tape, features_forward, images_to_tensor, DetLossConfig, DetTargets, DetectorModel, Scene,
};
use crate::par;
use crate::tensor::{ParamSet, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Diagonal Fisher values paired with the parameters they anchor to.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherAnchor {
    pub fisher: ParamSet,
    pub theta_star: ParamSet,
    pub sample_count: usize,
}

impl FisherAnchor {
    pub fn new(fisher: ParamSet, theta_star: ParamSet, sample_count: usize) -> Result<Self> {
        fisher.check_aligned(&theta_star)?;
        if let Some((name, _)) = fisher.iter().find(|(_, t)| t.data().iter().any(|&v| !(v >= 0.0))) {
            return Err(Error::invalid(
                "fisher",
                format!("`{name}` has negative or NaN entries"),
            ));
        }
        Ok(Self {
            fisher,
            theta_star,
            sample_count,
        })
    }
}

/// Mean over samples of squared per-sample gradients of `loss(tape, vars, i)`
/// for `i in 0..n_samples`. Per-sample passes may run in parallel; the sum is
/// taken in sample order.
pub fn empirical_fisher<T, F>(params: &ParamSet<T>, n_samples: usize, loss: F) -> Result<ParamSet<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var], usize) -> Result<Var> + Sync,
{
    if n_samples == 0 {
        return Err(Error::invalid("estimate_fisher", "no samples"));
    }
    let per_sample = par::map_range(n_samples, |i| -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let l = loss(&mut tape, &vars, i)?;
        let mut grads = tape.backward(l)?;
        Ok(vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![T::zero(); t.len()]))
            .collect())
    });
    let mut acc: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
    for sample in per_sample {
        for (a, g) in acc.iter_mut().zip(sample?) {
            for (a, g) in a.iter_mut().zip(g) {
                *a += g.as_f64() * g.as_f64();
            }
        }
    }
    let mut out = ParamSet::new();
    for ((name, t), a) in params.iter().zip(acc) {
        let mean: Vec<f64> = a.iter().map(|v| v / n_samples as f64).collect();
        out.push(name, Tensor::from_f64(t.shape(), &mean)?);
    }
    Ok(out)
}

/// Empirical Fisher of the detection loss w.r.t. `θ_f`, one labelled day
/// scene per sample (cycling through `day_set`), plus a snapshot of `θ_f`.
pub fn estimate_fisher(
    model: &DetectorModel,
    day_set: &[&Scene],
    n_samples: usize,
    loss_cfg: &DetLossConfig,
) -> Result<FisherAnchor> {
    if day_set.is_empty() {
        return Err(Error::invalid("estimate_fisher", "empty batch"));
    }
    let mut features = model.features.clone();
    features.set_tracked(true);
    let fisher = empirical_fisher(&features, n_samples, |tape, f, i| {
        let scene = day_set[i % day_set.len()];
        let x = tape.constant(images_to_tensor(&[&scene.image])?);
        let d = model.decoder.bind_frozen(tape);
        let feat = features_forward(tape, x, f)?;
        let (logits, deltas) = decoder_forward(tape, feat, &d)?;
        let targets = DetTargets::from_scenes(&[scene], tape.shape(logits)[2]);
        Ok(det_loss_tape(tape, logits, deltas, &targets, loss_cfg)?.total)
    })?;
    let mut fisher = fisher;
    fisher.set_tracked(false);
    let mut theta_star = model.features.clone();
    theta_star.set_tracked(false);
    FisherAnchor::new(fisher, theta_star, n_samples)
}
