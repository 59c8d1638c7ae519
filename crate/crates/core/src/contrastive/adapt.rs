use rand::Rng;

use super::augment::sample_crop;
use super::fisher::FisherAnchor;
use super::loss::{ewc_penalty_tape, fcl_loss_tape};
use super::siamese::{query_forward, SiameseState};
use crate::detector::images_to_tensor;
use crate::fourier::{fda_translate, BetaSchedule, ImagePlane};
use crate::par;
use crate::rng::{stream, Rng as StdRng, Stream};
use crate::tensor::{Scalar, SgdConfig, SgdState, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub lambda_ewc: f64,
    pub sgd: SgdConfig,
    pub beta: BetaSchedule,
    /// Probability of cropping a pair instead of using the full images.
    pub crop_probability: f64,
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ewc) {
            return Err(Error::invalid(
                "adapt",
                format!("lambda_ewc {} outside [0, 1]", self.lambda_ewc),
            ));
        }
        if !(0.0..=1.0).contains(&self.crop_probability) {
            return Err(Error::invalid(
                "adapt",
                format!("crop probability {} outside [0, 1]", self.crop_probability),
            ));
        }
        self.sgd.validate()
    }
}

/// Random sources of the adaptation stage, one stream each.
#[derive(Debug, Clone)]
pub struct AdaptRngs {
    pub beta: StdRng,
    pub crop: StdRng,
    pub night: StdRng,
}

impl AdaptRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            beta: stream(seed, Stream::Beta),
            crop: stream(seed, Stream::Crop),
            night: stream(seed, Stream::Night),
        }
    }

    /// Day-to-night translations, one random night image and β per day image.
    pub fn translate_batch(
        &mut self,
        day: &[&ImagePlane],
        night_pool: &[&ImagePlane],
        schedule: &BetaSchedule,
    ) -> Result<Vec<ImagePlane>> {
        if night_pool.is_empty() {
            return Err(Error::invalid("adapt", "empty night pool"));
        }
        let jobs: Vec<(&ImagePlane, &ImagePlane, f64)> = day
            .iter()
            .map(|&d| {
                let n = night_pool[self.night.random_range(0..night_pool.len())];
                (d, n, schedule.sample(&mut self.beta))
            })
            .collect();
        par::map(&jobs, |(d, n, beta)| fda_translate(d, n, *beta))
            .into_iter()
            .collect()
    }
}

/// Optimizers of the three query-side groups.
#[derive(Debug, Clone)]
pub struct AdaptOptim {
    pub features: SgdState,
    pub projector: SgdState,
    pub predictor: SgdState,
}

impl AdaptOptim {
    pub fn new(sgd: SgdConfig) -> Self {
        Self {
            features: SgdState::new(sgd),
            projector: SgdState::new(sgd),
            predictor: SgdState::new(sgd),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdaptRecord {
    pub l_fcl: f64,
    pub l_ewc: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Stage2Vars {
    pub l_fcl: Var,
    pub l_ewc: Var,
    pub total: Var,
}

/// `(1-λ) L_FCL(q(x), t) + λ L_EWC(θ_{f-q})` on the tape. `t` is a constant.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    t: Var,
    f: &[Var],
    pro: &[Var],
    pre: &[Var],
    anchor: &FisherAnchor,
    lambda: f64,
) -> Result<Stage2Vars> {
    let q = query_forward(tape, x, f, pro, pre)?;
    let l_fcl = fcl_loss_tape(tape, q, t)?;
    let l_ewc = ewc_penalty_tape(tape, f, anchor)?;
    let a = tape.scale(l_fcl, 1.0 - lambda);
    let b = tape.scale(l_ewc, lambda);
    let total = tape.add(a, b)?;
    Ok(Stage2Vars { l_fcl, l_ewc, total })
}

/// One contrastive adaptation step: translate, augment (same crop on both
/// views), key targets, loss, SGD on the query side, EMA on the key side.
pub fn adapt_step(
    state: &mut SiameseState,
    anchor: &FisherAnchor,
    day_batch: &[&ImagePlane],
    night_pool: &[&ImagePlane],
    rngs: &mut AdaptRngs,
    cfg: &AdaptConfig,
    optim: &mut AdaptOptim,
) -> Result<AdaptRecord> {
    cfg.validate()?;
    if day_batch.is_empty() {
        return Err(Error::invalid("adapt", "empty day batch"));
    }
    let translated = rngs.translate_batch(day_batch, night_pool, &cfg.beta)?;
    let crops: Vec<_> = day_batch
        .iter()
        .map(|d| sample_crop(d.height(), d.width(), cfg.crop_probability, &mut rngs.crop))
        .collect();
    let pairs: Vec<usize> = (0..day_batch.len()).collect();
    let views = par::map(&pairs, |&i| {
        (day_batch[i].apply_crop(crops[i]), translated[i].apply_crop(crops[i]))
    });
    let days: Vec<&ImagePlane> = views.iter().map(|v| &v.0).collect();
    let nights: Vec<&ImagePlane> = views.iter().map(|v| &v.1).collect();

    let t = state.forward_key(&nights)?;
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(images_to_tensor(&days)?);
    let t = tape.constant(t);
    let f = state.query_f.bind(&mut tape);
    let pro = state.query_pro.bind(&mut tape);
    let pre = state.predictor.bind(&mut tape);
    let v = stage2_loss_tape(&mut tape, x, t, &f, &pro, &pre, anchor, cfg.lambda_ewc)?;
    let record = AdaptRecord {
        l_fcl: tape.scalar(v.l_fcl) as f64,
        l_ewc: tape.scalar(v.l_ewc) as f64,
        combined: tape.scalar(v.total) as f64,
    };
    if !(record.l_fcl.is_finite() && record.l_ewc.is_finite() && record.combined.is_finite()) {
        return Err(Error::NonFinite {
            index: 0,
            element: 0,
            context: format!("stage-2 loss {record:?}"),
        });
    }
    let mut grads = tape.backward(v.total)?;
    state.query_f.store_grads(&mut grads, &f)?;
    state.query_pro.store_grads(&mut grads, &pro)?;
    state.predictor.store_grads(&mut grads, &pre)?;
    optim.features.step(&mut state.query_f)?;
    optim.projector.step(&mut state.query_pro)?;
    optim.predictor.step(&mut state.predictor)?;
    state.ema_update()?;
    Ok(record)
}
