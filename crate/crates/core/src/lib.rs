//! Continual Fourier contrastive learning for day-to-night domain adaptation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape, SGD with momentum,
//!   finite-difference gradient checking and the flat checkpoint format.
//! * [`fourier`]: 2-D DFT analysis/synthesis and the amplitude-swap image
//!   translation with its low-frequency square mask.
//! * [`contrastive`]: query/key siamese branches with projector and predictor,
//!   the cosine contrastive loss, EMA key updates, diagonal Fisher and the
//!   elastic weight consolidation penalty.
//! * [`detector`]: a small grid detector, the synthetic day/night scene
//!   generator, detection losses, training stages and AP evaluation.
//! * [`pipeline`]: run configuration, the experiment variants, run artifacts
//!   and reporting.

pub mod contrastive;
pub mod detector;
pub mod error;
pub mod fourier;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
