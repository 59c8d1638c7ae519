use rand::Rng;

use crate::detector::{features_forward, images_to_tensor};
use crate::fourier::ImagePlane;
use crate::rng::Rng as StdRng;
use crate::tensor::{ParamSet, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Epsilon of the batch standardization inside projector and predictor.
pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Layer widths: projector `feature -> hidden -> out`, predictor
/// `out -> pred_hidden -> out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub out: usize,
    pub pred_hidden: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            feature_dim: 512,
            hidden: 512,
            out: 128,
            pred_hidden: 512,
        }
    }
}

fn linear_layer(p: &mut ParamSet, name: &str, i: usize, o: usize, rng: &mut StdRng) {
    let bound = (1.0 / i as f32).sqrt();
    let w = (0..i * o).map(|_| rng.random_range(-bound..=bound)).collect();
    p.push(format!("{name}.w"), Tensor::new(&[o, i], w).expect("shape").tracked());
    p.push(format!("{name}.b"), Tensor::zeros(&[o]).tracked());
}

impl ProjectionConfig {
    pub fn init_projector(&self, rng: &mut StdRng) -> ParamSet {
        let mut p = ParamSet::new();
        linear_layer(&mut p, "pro1", self.feature_dim, self.hidden, rng);
        linear_layer(&mut p, "pro2", self.hidden, self.out, rng);
        p
    }

    pub fn init_predictor(&self, rng: &mut StdRng) -> ParamSet {
        let mut p = ParamSet::new();
        linear_layer(&mut p, "pre1", self.out, self.pred_hidden, rng);
        linear_layer(&mut p, "pre2", self.pred_hidden, self.out, rng);
        p
    }
}

/// `linear -> standardize -> relu -> linear`. Standardization needs at least
/// two rows and is skipped for a single one.
fn mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &[Var]) -> Result<Var> {
    if p.len() != 4 {
        return Err(Error::Misaligned(format!("mlp expects 4 tensors, got {}", p.len())));
    }
    let mut h = tape.linear(x, p[0], p[1])?;
    if tape.shape(h)[0] >= 2 {
        h = tape.batch_standardize(h, STANDARDIZE_EPS)?;
    }
    let h = tape.relu(h);
    tape.linear(h, p[2], p[3])
}

pub fn projector_forward<T: Scalar>(tape: &mut Tape<T>, h: Var, p: &[Var]) -> Result<Var> {
    mlp(tape, h, p)
}

pub fn predictor_forward<T: Scalar>(tape: &mut Tape<T>, z: Var, p: &[Var]) -> Result<Var> {
    mlp(tape, z, p)
}

/// `projector(flatten(avgpool(features(x))))`.
pub fn embed_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, f: &[Var], pro: &[Var]) -> Result<Var> {
    let feat = features_forward(tape, x, f)?;
    let pooled = tape.global_avg_pool(feat)?;
    let flat = tape.flatten(pooled)?;
    projector_forward(tape, flat, pro)
}

/// `predictor(projector(flatten(avgpool(features(x)))))`.
pub fn query_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, f: &[Var], pro: &[Var], pre: &[Var]) -> Result<Var> {
    let z = embed_forward(tape, x, f, pro)?;
    predictor_forward(tape, z, pre)
}

/// Query branch (`θ_{f-q}`, `θ_{pro-q}`, predictor) and its EMA key copy.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseState {
    pub query_f: ParamSet,
    pub query_pro: ParamSet,
    pub key_f: ParamSet,
    pub key_pro: ParamSet,
    pub predictor: ParamSet,
    pub mu: f64,
}

impl SiameseState {
    /// Both branches start from the burn-in feature extractor and one
    /// freshly drawn projector.
    pub fn new(features: &ParamSet, cfg: &ProjectionConfig, mu: f64, rng: &mut StdRng) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::invalid("siamese", format!("mu {mu} outside [0, 1]")));
        }
        let width = features
            .get("embed.b")
            .map(|t| t.len())
            .ok_or_else(|| Error::Misaligned("feature extractor lacks `embed.b`".into()))?;
        if width != cfg.feature_dim {
            return Err(Error::shape("siamese", &[cfg.feature_dim], &[width]));
        }
        let query_pro = cfg.init_projector(rng);
        let predictor = cfg.init_predictor(rng);
        let mut key_f = features.clone();
        let mut key_pro = query_pro.clone();
        key_f.set_tracked(false);
        key_pro.set_tracked(false);
        Ok(Self {
            query_f: features.clone(),
            query_pro,
            key_f,
            key_pro,
            predictor,
            mu,
        })
    }

    /// `q` for a batch of images, `[B, out]`, evaluated without gradients.
    pub fn forward_query(&self, images: &[&ImagePlane]) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(images_to_tensor(images)?);
        let f = self.query_f.bind_frozen(&mut tape);
        let pro = self.query_pro.bind_frozen(&mut tape);
        let pre = self.predictor.bind_frozen(&mut tape);
        let q = query_forward(&mut tape, x, &f, &pro, &pre)?;
        Ok(tape.to_tensor(q))
    }

    /// Key target `t`, `[B, out]`; computed on a private tape so nothing
    /// downstream can send gradients into the key parameters.
    pub fn forward_key(&self, images: &[&ImagePlane]) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(images_to_tensor(images)?);
        let f = self.key_f.bind_frozen(&mut tape);
        let pro = self.key_pro.bind_frozen(&mut tape);
        let t = embed_forward(&mut tape, x, &f, &pro)?;
        Ok(tape.to_tensor(t))
    }

    /// `key <- μ key + (1-μ) query`.
    pub fn ema_update(&mut self) -> Result<()> {
        self.key_f.ema_from(&self.query_f, self.mu)?;
        self.key_pro.ema_from(&self.query_pro, self.mu)
    }
}
