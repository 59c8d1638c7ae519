use rand::seq::index::sample;

use super::loss::{det_loss_tape, DetLoss, DetLossConfig, DetTargets};
use super::model::{decoder_forward, features_forward, images_to_tensor, BackboneConfig, DetectorModel};
use super::scene::{Annotation, Scene};
use crate::fourier::ImagePlane;
use crate::rng::{stream, Rng as StdRng, Stream};
use crate::tensor::{ParamSet, SgdConfig, SgdState, Tape};
use crate::{Error, Result};

/// Draws batches of distinct indices uniformly from `0..n`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: StdRng,
    n: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(rng: StdRng, n: usize, batch: usize) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::invalid("batch_sampler", format!("cannot draw {batch} of {n}")));
        }
        Ok(Self {
            rng,
            n,
            batch: batch.min(n),
        })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        sample(&mut self.rng, self.n, self.batch).into_vec()
    }

    pub fn next_batch<'a, S>(&mut self, items: &'a [S]) -> Vec<&'a S> {
        self.next_indices().into_iter().map(|i| &items[i]).collect()
    }
}

/// Optimizers for both parameter groups of a detector.
#[derive(Debug, Clone)]
pub struct DetTrainer {
    pub features_opt: SgdState,
    pub decoder_opt: SgdState,
    pub loss: DetLossConfig,
}

impl DetTrainer {
    pub fn new(sgd: SgdConfig, loss: DetLossConfig) -> Self {
        Self {
            features_opt: SgdState::new(sgd),
            decoder_opt: SgdState::new(sgd),
            loss,
        }
    }

    /// One SGD step on the detection loss. `θ_f` is only updated when
    /// `train_features` is set; `θ_d` always is.
    pub fn step_images(
        &mut self,
        model: &mut DetectorModel,
        images: &[&ImagePlane],
        annotations: &[&[Annotation]],
        train_features: bool,
    ) -> Result<DetLoss> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(images_to_tensor(images)?);
        let f = if train_features {
            model.features.bind(&mut tape)
        } else {
            model.features.bind_frozen(&mut tape)
        };
        let d = model.decoder.bind(&mut tape);
        let feat = features_forward(&mut tape, x, &f)?;
        let (logits, deltas) = decoder_forward(&mut tape, feat, &d)?;
        let targets = DetTargets::build(annotations, tape.shape(logits)[2]);
        let l = det_loss_tape(&mut tape, logits, deltas, &targets, &self.loss)?;
        let record = DetLoss {
            l_cls: tape.scalar(l.l_cls) as f64,
            l_boxreg: tape.scalar(l.l_boxreg) as f64,
        };
        if !record.combined().is_finite() {
            return Err(Error::NonFinite {
                index: 0,
                element: 0,
                context: "detection loss".into(),
            });
        }
        let mut grads = tape.backward(l.total)?;
        model.decoder.store_grads(&mut grads, &d)?;
        self.decoder_opt.step(&mut model.decoder)?;
        if train_features {
            model.features.store_grads(&mut grads, &f)?;
            self.features_opt.step(&mut model.features)?;
        }
        Ok(record)
    }

    pub fn step(&mut self, model: &mut DetectorModel, batch: &[&Scene], train_features: bool) -> Result<DetLoss> {
        let images: Vec<&ImagePlane> = batch.iter().map(|s| &s.image).collect();
        let anns: Vec<&[Annotation]> = batch.iter().map(|s| s.annotations.as_slice()).collect();
        self.step_images(model, &images, &anns, train_features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurnInConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub loss: DetLossConfig,
    pub backbone: BackboneConfig,
}

impl Default for BurnInConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            batch_size: 16,
            sgd: SgdConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            loss: DetLossConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

/// Resumable supervised training on labelled day scenes.
#[derive(Debug, Clone)]
pub struct BurnInState {
    pub model: DetectorModel,
    pub trainer: DetTrainer,
    pub sampler: BatchSampler,
    pub history: Vec<DetLoss>,
}

impl BurnInState {
    pub fn new(cfg: &BurnInConfig, seed: u64, set_len: usize) -> Result<Self> {
        cfg.sgd.validate()?;
        let model = DetectorModel::new(cfg.backbone, &mut stream(seed, Stream::Init));
        Ok(Self {
            model,
            trainer: DetTrainer::new(cfg.sgd, cfg.loss),
            sampler: BatchSampler::new(stream(seed, Stream::Batch), set_len, cfg.batch_size)?,
            history: Vec::new(),
        })
    }

    pub fn run(&mut self, day_set: &[Scene], iters: usize) -> Result<()> {
        for _ in 0..iters {
            let step = self.history.len();
            let batch = self.sampler.next_batch(day_set);
            let l = self
                .trainer
                .step(&mut self.model, &batch, true)
                .map_err(|e| e.in_stage("burn-in", step))?;
            log::trace!("burn-in step {step}: cls {:.5} box {:.5}", l.l_cls, l.l_boxreg);
            self.history.push(l);
        }
        Ok(())
    }
}

/// Trains `θ_f` and `θ_d` jointly on `day_set`; returns the model and the
/// per-step loss record.
pub fn burn_in(day_set: &[Scene], cfg: &BurnInConfig, seed: u64) -> Result<(DetectorModel, Vec<DetLoss>)> {
    let mut state = BurnInState::new(cfg, seed, day_set.len())?;
    state.run(day_set, cfg.iters)?;
    Ok((state.model, state.history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage3Mode {
    /// `θ_f <- θ_{f-q}`, then only `θ_d` trains.
    OneWay,
    /// `θ_f <- θ_{f-q}`, both train, then `θ_{f-q} <- μ θ_{f-q} + (1-μ) θ_f`.
    TwoWay,
}

/// Decoder update: one step per batch, then the optional back-signal.
pub fn decoder_update(
    model: &mut DetectorModel,
    theta_fq: &mut ParamSet,
    batches: &[Vec<&Scene>],
    mode: Stage3Mode,
    mu: f64,
    trainer: &mut DetTrainer,
) -> Result<Vec<DetLoss>> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid("decoder_update", format!("mu {mu} outside [0, 1]")));
    }
    model.features.copy_values_from(theta_fq)?;
    let two_way = mode == Stage3Mode::TwoWay;
    let mut losses = Vec::with_capacity(batches.len());
    for batch in batches {
        losses.push(trainer.step(model, batch, two_way)?);
    }
    if two_way {
        theta_fq.ema_from(&model.features, mu)?;
    }
    Ok(losses)
}

/// `θ_f <- μ θ_f + (1-μ) θ*_{f-q}`.
pub fn no_ewc_variant(model: &mut DetectorModel, theta_fq_star: &ParamSet, mu: f64) -> Result<()> {
    model.features.ema_from(theta_fq_star, mu)
}
