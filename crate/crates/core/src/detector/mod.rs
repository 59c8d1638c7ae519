//! Desk-scale single-stage detector, synthetic day/night scenes, training
//! stages and AP evaluation.

mod dataset;
mod loss;
mod metrics;
mod model;
mod scene;
mod train;

pub use dataset::{read_split, write_split};
pub use loss::{det_loss, det_loss_tape, DetLoss, DetLossConfig, DetLossVars, DetTargets};
pub use metrics::{
    ap_from_detections, average_precision_11pt, decode_predictions, detect_all, eval_ap, evaluate, iou, nms, ApResult,
    Detection, EvalReport, SCORE_THRESHOLD,
};
pub use model::{
    decoder_forward, det_forward, features_forward, images_to_tensor, BackboneConfig, DetOutput, DetectorModel, STRIDE,
};
pub use scene::{gen_scene, gen_scenes, Annotation, BBox, Domain, NightShift, Scene, SceneLayout};
pub use train::{
    burn_in, decoder_update, no_ewc_variant, BatchSampler, BurnInConfig, BurnInState, DetTrainer, Stage3Mode,
};

/// Side of the square synthetic images.
pub const IMAGE_SIZE: usize = 64;
/// Number of object classes.
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];
/// Cells per side of the prediction grid.
pub const GRID: usize = 8;
