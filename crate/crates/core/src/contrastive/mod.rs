//! Siamese query/key learner with the cosine contrastive loss, EMA key
//! updates and the EWC anchor on the query feature extractor.

mod adapt;
mod augment;
mod fisher;
mod loss;
mod siamese;

pub use adapt::{adapt_step, stage2_loss_tape, AdaptConfig, AdaptOptim, AdaptRecord, AdaptRngs, Stage2Vars};
pub use augment::{augment, sample_crop, CROP_PROBABILITY};
pub use fisher::{empirical_fisher, estimate_fisher, FisherAnchor};
pub use loss::{ewc_penalty, ewc_penalty_tape, fcl_loss, fcl_loss_tape, MIN_NORM};
pub use siamese::{
    embed_forward, predictor_forward, projector_forward, query_forward, ProjectionConfig, SiameseState, STANDARDIZE_EPS,
};
