//! Train a small detector once and check what a trained model should do.

use std::sync::OnceLock;

use iff_core::iff::IffConfig;
use iff_core::tensor::Tensor;
use iff_core::toydet::{
    detect, gen_dataset, render, timing_probe, BBox, DecodeParams, DetectorModel, ModelArch,
    SceneObject, SceneSpec, ShapeClass, IMAGE_SIZE,
};
use iff_core::traingraph::{train, LrSchedule, TrainConfig, TrainOutcome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained() -> &'static TrainOutcome {
    static MODEL: OnceLock<TrainOutcome> = OnceLock::new();
    MODEL.get_or_init(|| {
        let data = gen_dataset(200, 77, &SceneSpec::default()).unwrap();
        let init = DetectorModel::new(5, ModelArch::default()).unwrap();
        let tc = TrainConfig {
            epochs: 30,
            schedule: LrSchedule::Cosine {
                base: 0.01,
                floor: 5e-4,
            },
            seed: 5,
            ..TrainConfig::default()
        };
        train(&init, &data, &IffConfig::with_iterations(1), &tc).unwrap()
    })
}

#[test]
fn thirty_epochs_halve_the_loss() {
    let out = trained();
    let first = out.curve[0].loss;
    let last = out.final_loss();
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn noiseless_single_disc_is_found() {
    let model = &trained().model;
    let truth = BBox::new(16.0, 16.0, 16.0, 16.0);
    let obj = SceneObject {
        class: ShapeClass::Disc,
        bbox: truth,
        intensity: 1.0,
    };
    let image = render(&[obj], IMAGE_SIZE, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    let dets = detect(model, &image, &IffConfig::with_iterations(1), &DecodeParams::default()).unwrap();
    assert_eq!(dets.len(), 1, "{dets:?}");
    assert!(dets[0].bbox.iou(&truth) >= 0.5, "{dets:?}");
}

#[test]
fn zero_feedback_collapses_to_open_loop_after_training() {
    let open = trained().model.without_feedback();
    let scenes = gen_dataset(20, 3, &SceneSpec::default()).unwrap();
    let p = DecodeParams::for_evaluation();
    for s in &scenes {
        let base = detect(&open, &s.image, &IffConfig::with_iterations(0), &p).unwrap();
        for mi in 1..=3 {
            assert_eq!(detect(&open, &s.image, &IffConfig::with_iterations(mi), &p).unwrap(), base);
        }
    }
}

#[test]
fn latency_ratios() {
    let model = &trained().model;
    let images: Vec<Tensor> = gen_dataset(100, 9, &SceneSpec::default())
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect();
    let c = |mi| IffConfig::with_iterations(mi);
    let same = timing_probe(model, &images, &c(0), &c(0), 3).unwrap();
    assert!((0.8..=1.25).contains(&same.ratio()), "M_I=0 vs itself: {}", same.ratio());
    let deeper = timing_probe(model, &images, &c(1), &c(2), 3).unwrap();
    // Each extra iteration adds a head and a feedback convolution.
    assert!(deeper.candidate >= 0.98 * deeper.baseline, "{deeper:?}");
}
