//! Randomised finite-difference checks of every tape operation and of the
//! combined contrastive loss on a miniature model.

use rand::Rng;

use crate::contrastive::{ewc_penalty_tape, fcl_loss_tape, stage2_loss_tape, FisherAnchor, ProjectionConfig};
use crate::detector::{det_loss_tape, features_forward, Annotation, BBox, BackboneConfig, DetLossConfig, DetTargets};
use crate::rng::{indexed, Rng as StdRng, Stream};
use crate::tensor::{grad_check, ParamSet, Tape, Tensor, Var};
use crate::{Error, Result};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Central-difference step.
pub const EPS: f64 = 3e-5;
/// Draws whose nearest ReLU or smooth-L1 kink is closer than this are
/// redrawn.
pub const KINK_MARGIN: f64 = 1e-2;
/// Trials per case; with every case that is over a hundred in total.
pub const DEFAULT_TRIALS: usize = 4;
const MAX_DRAWS: usize = 200;

type Forward = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync>;

struct Trial {
    params: ParamSet<f64>,
    forward: Forward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub trials: usize,
    /// Draws discarded for sitting too close to a kink.
    pub rejected: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSummary {
    pub cases: Vec<CaseResult>,
}

impl GradCheckSummary {
    pub fn trials(&self) -> usize {
        self.cases.iter().map(|c| c.trials).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < TOLERANCE)
    }
}

fn uniform(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Magnitudes in `[lo, hi)` with random sign.
fn away_from_zero(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn params(tensors: Vec<Tensor<f64>>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (i, t) in tensors.into_iter().enumerate() {
        p.push(format!("p{i}"), t.tracked());
    }
    p
}

fn unary(rng: &mut StdRng, shape: &[usize], op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Trial {
    Trial {
        params: params(vec![uniform(rng, shape, -2.0, 2.0)]),
        forward: Box::new(move |t, v| op(t, v[0])),
    }
}

fn binary(rng: &mut StdRng, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Trial {
    let shape = [rng.random_range(1..4), rng.random_range(1..5)];
    Trial {
        params: params(vec![uniform(rng, &shape, -2.0, 2.0), uniform(rng, &shape, -2.0, 2.0)]),
        forward: Box::new(move |t, v| op(t, v[0], v[1])),
    }
}

fn small_shape(rng: &mut StdRng) -> Vec<usize> {
    vec![rng.random_range(1..4), rng.random_range(2..6)]
}

fn conv_trial(rng: &mut StdRng, k: usize) -> Trial {
    let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
    let (h, w) = (rng.random_range(k..k + 4), rng.random_range(k..k + 4));
    Trial {
        params: params(vec![
            uniform(rng, &[n, c, h, w], -1.0, 1.0),
            uniform(rng, &[o, c, k, k], -1.0, 1.0),
            uniform(rng, &[o], -0.5, 0.5),
        ]),
        forward: Box::new(|t, v| t.conv2d(v[0], v[1], v[2])),
    }
}

fn random_anchor(rng: &mut StdRng, like: &ParamSet<f64>) -> Result<FisherAnchor> {
    let mut fisher = ParamSet::new();
    let mut star = ParamSet::new();
    for (name, t) in like.iter() {
        fisher.push(name, uniform(rng, t.shape(), 0.0, 2.0).cast());
        let mut s = t.clone();
        for v in s.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        star.push(name, s.cast());
    }
    FisherAnchor::new(fisher, star, 1)
}

/// Zero biases would park the units of a flat region right on the ReLU kink.
fn positive_biases(rng: &mut StdRng, p: &mut ParamSet<f64>) {
    for (_, t) in p.iter_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v = rng.random_range(0.05..0.3);
            }
        }
    }
}

/// Biases whose only path to the loss is a per-column shift ahead of a batch
/// standardization. `pro2.b` reaches the loss only through the predictor.
const STANDARDIZED_BIASES: [&str; 3] = ["pro1.b", "pro2.b", "pre1.b"];

/// Contrastive loss of a miniature model: 8x8 inputs, feature width 8,
/// projector 8 -> 8 -> 4, predictor 4 -> 8 -> 4, batch 3.
fn stage2_trial(rng: &mut StdRng) -> Result<Trial> {
    let backbone = BackboneConfig {
        channels: [2, 3, 4],
        feature_dim: 8,
        input_channels: 3,
    };
    let proj = ProjectionConfig {
        feature_dim: 8,
        hidden: 8,
        out: 4,
        pred_hidden: 8,
    };
    let mut f = backbone.init(rng).cast::<f64>();
    let mut pro = proj.init_projector(rng).cast::<f64>();
    let mut pre = proj.init_predictor(rng).cast::<f64>();
    positive_biases(rng, &mut f);
    // A query row with every predictor unit off would otherwise be exactly
    // zero, which the cosine loss rejects.
    *pre.get_mut("pre2.b").expect("layer exists") = uniform(rng, &[proj.out], -0.3, 0.3).tracked();
    // These biases have an identically zero
    // gradient, so their central differences are pure round-off and the
    // relative error is meaningless. They are frozen here and covered by
    // `standardized_bias_gradient_is_zero`.
    for name in STANDARDIZED_BIASES {
        let set = if name.starts_with("pro") { &mut pro } else { &mut pre };
        set.get_mut(name).expect("layer exists").set_tracked(false);
    }
    let mut all = ParamSet::new();
    for (prefix, set) in [("f", &f), ("pro", &pro), ("pre", &pre)] {
        for (name, t) in set.iter() {
            all.push(format!("{prefix}.{name}"), t.clone());
        }
    }
    let anchor = random_anchor(rng, &f)?;
    let x = uniform(rng, &[3, 3, 8, 8], 0.0, 1.0);
    let target = uniform(rng, &[3, 4], -1.0, 1.0);
    let lambda = rng.random_range(0.05..0.95);
    let (nf, npro) = (f.len(), pro.len());
    Ok(Trial {
        params: all,
        forward: Box::new(move |t, v| {
            let xv = t.constant(x.clone());
            let tv = t.constant(target.clone());
            let vars = stage2_loss_tape(t, xv, tv, &v[..nf], &v[nf..nf + npro], &v[nf + npro..], &anchor, lambda)?;
            Ok(vars.total)
        }),
    })
}

fn det_trial(rng: &mut StdRng) -> Result<Trial> {
    let (n, g) = (2, 2);
    let mut anns = Vec::new();
    for _ in 0..n {
        let mut scene = Vec::new();
        for _ in 0..rng.random_range(0..3) {
            let (x1, y1) = (rng.random_range(0.0..10.0f32), rng.random_range(0.0..10.0f32));
            let (w, h) = (rng.random_range(2.0..6.0f32), rng.random_range(2.0..6.0f32));
            scene.push(Annotation {
                class_id: rng.random_range(0..3),
                bbox: BBox::new(x1, y1, x1 + w, y1 + h)?,
            });
        }
        anns.push(scene);
    }
    let refs: Vec<&[Annotation]> = anns.iter().map(|a| a.as_slice()).collect();
    let targets = DetTargets::build(&refs, g);
    let cfg = DetLossConfig {
        pos_weight: rng.random_range(1.0..10.0),
    };
    Ok(Trial {
        params: params(vec![
            uniform(rng, &[n, 3, g, g], -3.0, 3.0),
            uniform(rng, &[n, 4, g, g], -2.0, 2.0),
        ]),
        forward: Box::new(move |t, v| Ok(det_loss_tape(t, v[0], v[1], &targets, &cfg)?.total)),
    })
}

type Builder = fn(&mut StdRng) -> Result<Trial>;

/// Every case of the suite, in run order.
const CASES: &[(&str, Builder)] = &[
    ("add", |r| Ok(binary(r, |t, a, b| t.add(a, b)))),
    ("sub", |r| Ok(binary(r, |t, a, b| t.sub(a, b)))),
    ("mul", |r| Ok(binary(r, |t, a, b| t.mul(a, b)))),
    ("div", |r| {
        let shape = small_shape(r);
        Ok(Trial {
            params: params(vec![uniform(r, &shape, -2.0, 2.0), away_from_zero(r, &shape, 0.5, 2.0)]),
            forward: Box::new(|t, v| t.div(v[0], v[1])),
        })
    }),
    ("scale", |r| {
        let s = small_shape(r);
        Ok(unary(r, &s, |t, a| Ok(t.scale(a, -1.7))))
    }),
    ("add_scalar", |r| {
        let s = small_shape(r);
        Ok(unary(r, &s, |t, a| Ok(t.add_scalar(a, 0.3))))
    }),
    ("square", |r| {
        let s = small_shape(r);
        Ok(unary(r, &s, |t, a| Ok(t.square(a))))
    }),
    ("sum", |r| {
        let s = small_shape(r);
        Ok(unary(r, &s, |t, a| Ok(t.sum(a))))
    }),
    ("mean", |r| {
        let s = small_shape(r);
        Ok(unary(r, &s, |t, a| Ok(t.mean(a))))
    }),
    ("relu", |r| {
        let s = small_shape(r);
        Ok(unary(r, &s, |t, a| Ok(t.relu(a))))
    }),
    ("sigmoid", |r| {
        let s = small_shape(r);
        Ok(unary(r, &s, |t, a| Ok(t.sigmoid(a))))
    }),
    ("smooth_l1", |r| {
        let s = small_shape(r);
        Ok(unary(r, &s, |t, a| Ok(t.smooth_l1(a))))
    }),
    ("reshape", |r| Ok(unary(r, &[2, 3], |t, a| t.reshape(a, &[3, 2])))),
    ("flatten", |r| Ok(unary(r, &[2, 2, 3], |t, a| t.flatten(a)))),
    ("matmul", |r| {
        let (m, k, n) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..4));
        Ok(Trial {
            params: params(vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)]),
            forward: Box::new(|t, v| t.matmul(v[0], v[1])),
        })
    }),
    ("linear", |r| {
        let (n, i, o) = (r.random_range(1..4), r.random_range(1..10), r.random_range(1..5));
        Ok(Trial {
            params: params(vec![
                uniform(r, &[n, i], -1.0, 1.0),
                uniform(r, &[o, i], -1.0, 1.0),
                uniform(r, &[o], -1.0, 1.0),
            ]),
            forward: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
        })
    }),
    ("conv2d_1x1", |r| Ok(conv_trial(r, 1))),
    ("conv2d_3x3", |r| Ok(conv_trial(r, 3))),
    ("avg_pool2d", |r| {
        let (h, w) = (2 * r.random_range(1..4), 2 * r.random_range(1..4));
        Ok(unary(r, &[2, 2, h, w], |t, a| t.avg_pool2d(a, 2)))
    }),
    ("global_avg_pool", |r| {
        Ok(unary(r, &[2, 3, 3, 2], |t, a| t.global_avg_pool(a)))
    }),
    ("row_dot", |r| Ok(binary(r, |t, a, b| t.row_dot(a, b)))),
    ("row_norm", |r| {
        let s = small_shape(r);
        Ok(Trial {
            params: params(vec![away_from_zero(r, &s, 0.2, 2.0)]),
            forward: Box::new(|t, v| t.row_norm(v[0])),
        })
    }),
    ("bce_with_logits", |r| {
        let s = small_shape(r);
        let targets = uniform(r, &s, 0.0, 1.0);
        Ok(Trial {
            params: params(vec![uniform(r, &s, -4.0, 4.0)]),
            forward: Box::new(move |t, v| {
                let tv = t.constant(targets.clone());
                t.bce_with_logits(v[0], tv)
            }),
        })
    }),
    ("batch_standardize", |r| {
        let shape = [r.random_range(2..6), r.random_range(1..4)];
        Ok(unary(r, &shape, |t, a| t.batch_standardize(a, 1e-5)))
    }),
    ("fcl_loss", |r| {
        let s = [r.random_range(1..4), r.random_range(2..6)];
        Ok(Trial {
            params: params(vec![away_from_zero(r, &s, 0.2, 2.0), away_from_zero(r, &s, 0.2, 2.0)]),
            forward: Box::new(|t, v| fcl_loss_tape(t, v[0], v[1])),
        })
    }),
    ("ewc_penalty", |r| {
        let p = params(vec![uniform(r, &[3, 2], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)]);
        let anchor = random_anchor(r, &p)?;
        Ok(Trial {
            params: p,
            forward: Box::new(move |t, v| ewc_penalty_tape(t, v, &anchor)),
        })
    }),
    ("det_loss", det_trial),
    ("features", |r| {
        let cfg = BackboneConfig {
            channels: [2, 2, 3],
            feature_dim: 4,
            input_channels: 3,
        };
        let mut p = cfg.init(r).cast::<f64>();
        positive_biases(r, &mut p);
        let x = uniform(r, &[2, 3, 8, 8], 0.0, 1.0);
        Ok(Trial {
            params: p,
            forward: Box::new(move |t, v| {
                let xv = t.constant(x.clone());
                features_forward(t, xv, v)
            }),
        })
    }),
    ("stage2_combined", stage2_trial),
];

pub fn case_names() -> impl Iterator<Item = &'static str> {
    CASES.iter().map(|c| c.0)
}

/// Draws one trial that keeps clear of kinks and checks it.
fn run_trial(build: Builder, rng: &mut StdRng) -> Result<(f64, usize)> {
    for draw in 0..MAX_DRAWS {
        let trial = build(rng)?;
        let mut tape = Tape::new();
        let vars = trial.params.bind(&mut tape);
        let out = (trial.forward)(&mut tape, &vars)?;
        if tape.kink_margin().is_some_and(|m| m < KINK_MARGIN) {
            continue;
        }
        // Random projection of the output so every Jacobian row is probed.
        let readout = uniform(rng, tape.shape(out), -1.0, 1.0);
        let forward = &trial.forward;
        let report = grad_check(&trial.params, EPS, |t, v| {
            let y = forward(t, v)?;
            let r = t.constant(readout.clone());
            let prod = t.mul(y, r)?;
            Ok(t.sum(prod))
        })?;
        return Ok((report.max_rel_error, draw));
    }
    Err(Error::invalid(
        "gradcheck",
        format!("no kink-free draw in {MAX_DRAWS} attempts"),
    ))
}

/// Runs `trials` randomised draws of every case in [`CASES`].
pub fn run_suite(seed: u64, trials: usize) -> Result<GradCheckSummary> {
    if trials == 0 {
        return Err(Error::invalid("gradcheck", "need at least one trial per case"));
    }
    let mut cases = Vec::with_capacity(CASES.len());
    for (ci, &(name, build)) in CASES.iter().enumerate() {
        let mut rng = indexed(seed, Stream::Init, 1000 + ci as u64, 0);
        let mut result = CaseResult {
            name,
            trials,
            rejected: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..trials {
            let (err, rejected) = run_trial(build, &mut rng)?;
            result.max_rel_error = result.max_rel_error.max(err);
            result.rejected += rejected;
        }
        log::debug!("gradcheck {name}: max rel error {:.3e}", result.max_rel_error);
        cases.push(result);
    }
    Ok(GradCheckSummary { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_trial_per_case_passes() {
        let s = run_suite(3, 1).unwrap();
        assert_eq!(s.cases.len(), CASES.len());
        assert!(s.passed(), "{s:#?}");
    }

    #[test]
    fn standardized_bias_gradient_is_zero() {
        let mut rng = indexed(5, Stream::Init, 0, 0);
        let trial = stage2_trial(&mut rng).unwrap();
        let mut p = trial.params.clone();
        p.set_tracked(true);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let loss = (trial.forward)(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut seen = 0;
        for ((name, _), v) in p.iter().zip(&vars) {
            if STANDARDIZED_BIASES.iter().any(|b| name.ends_with(b)) {
                let g = grads.get(*v).unwrap();
                assert!(g.iter().all(|x| x.abs() < 1e-12), "{name}: {g:?}");
                seen += 1;
            } else if name.ends_with(".w") {
                assert!(grads.get(*v).unwrap().iter().any(|x| x.abs() > 1e-9), "{name}");
            }
        }
        assert_eq!(seen, 3);
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(run_suite(0, 0).is_err());
    }
}
