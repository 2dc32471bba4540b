//! Desk-scale single-stage detector on synthetic grayscale scenes.

mod detect;
mod loss;
mod manifest;
mod metrics;
mod model;
mod scene;
mod timing;

pub use detect::{decode, detect, nms, DecodeParams, Detection};
pub use loss::{CellTarget, DetectionLoss, GridTargets, BOX_WEIGHT};
pub use manifest::{Manifest, ManifestEntry};
pub use metrics::{class_ap, eval_map};
pub use model::{
    DetectorModel, ModelArch, CELL, FEATURE_CHANNELS, GRID, HEAD_CHANNELS, IMAGE_SIZE,
    MAX_FEEDBACK_FRACTION, NUM_CLASSES, PRIOR, W1, W1_BIAS, W2,
};
pub use scene::{
    gen_dataset, gen_scene, mix_seed, render, sample_objects, BBox, SceneObject, SceneSpec,
    ShapeClass, SyntheticScene,
};
pub use timing::{timing_probe, TimingReport, MIN_TIMING_IMAGES};
