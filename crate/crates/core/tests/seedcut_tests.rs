use proptest::prelude::*;
use semiconv::kernels::{KernelParams, SeedMode};
use semiconv::seedcut::{
    cut_region, evaluate_boxes, instance_boxes, rle_decode, rle_encode, train_seedcut, Rect,
    RegionProposal, SeedcutConfig,
};
use semiconv::synth::{embed_dense, generate_scene, train, Mode, SceneConfig, TrainConfig};
use semiconv::tensor::Tensor;

/// 4 x 4 region; `labels` gives 0 for background or an instance id per pixel.
fn region(labels: &[u8; 16], scores: Vec<f64>) -> RegionProposal {
    let mut rows = Vec::new();
    for &l in labels {
        rows.extend_from_slice(&match l {
            1 => [0.0, 0.0],
            2 => [50.0, 0.0],
            _ => [0.0, 100.0],
        });
    }
    let rect = Rect { x0: 0, y0: 0, x1: 4, y1: 4 };
    RegionProposal::new(rect, scores, Tensor::new([16, 2], rows).unwrap()).unwrap()
}

const ONE: [u8; 16] = [0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0];
const TWO: [u8; 16] = [1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 2, 2, 0, 0, 2, 2];

#[test]
fn perfect_separation() {
    for (mode, top) in [(SeedMode::Hard, 3.0), (SeedMode::Soft, 30.0)] {
        let mut s: Vec<f64> = ONE.iter().map(|&l| f64::from(l)).collect();
        s[5] = top;
        let cut = cut_region(&region(&ONE, s.clone()), &KernelParams::default(), mode, 0.5).unwrap();
        let want: Vec<bool> = ONE.iter().map(|&l| l == 1).collect();
        assert_eq!(cut.mask, want, "{mode:?}");
        assert_eq!(cut.seed_index, 5);
    }
}

#[test]
fn all_negative_scores() {
    let cut = cut_region(&region(&ONE, vec![-4.0; 16]), &KernelParams::default(), SeedMode::Hard, 0.5)
        .unwrap();
    assert!(cut.mask.iter().all(|&m| !m));
}

#[test]
fn two_instances_seed_in_first() {
    let mut s = vec![2.0; 16];
    s[1] = 5.0;
    let cut = cut_region(&region(&TWO, s), &KernelParams::default(), SeedMode::Hard, 0.5).unwrap();
    let want: Vec<bool> = TWO.iter().map(|&l| l == 1).collect();
    assert_eq!(cut.mask, want);
}

#[test]
fn empty_and_mismatched_regions_rejected() {
    let rect = Rect { x0: 2, y0: 2, x1: 2, y1: 4 };
    assert!(RegionProposal::new(rect, vec![], Tensor::zeros([0, 2])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn monotone_rescaling_keeps_seed(s in prop::collection::vec(-3.0f64..3.0, 16), a in 0.1f64..10.0, b in -5.0f64..5.0, cubic in any::<bool>()) {
        let f = |x: f64| if cubic { x * x * x + b } else { a * x + b };
        let r = region(&TWO, s.clone());
        let moved = region(&TWO, s.iter().map(|&x| f(x)).collect());
        let p = KernelParams::default();
        let c1 = cut_region(&r, &p, SeedMode::Hard, 0.5).unwrap();
        let c2 = cut_region(&moved, &p, SeedMode::Hard, 0.5).unwrap();
        prop_assert_eq!(c1.seed_index, c2.seed_index);
    }

    #[test]
    fn rle_round_trips(mask in prop::collection::vec(any::<bool>(), 0..64)) {
        let counts = rle_encode(&mask);
        prop_assert_eq!(rle_decode(&counts), mask.clone());
        prop_assert_eq!(counts.iter().sum::<usize>(), mask.len());
    }
}

fn seed_scene() -> semiconv::synth::Scene {
    generate_scene(&SceneConfig {
        rows: 2,
        cols: 2,
        dot_radius: 2,
        spacing: 12,
        ..SceneConfig::default()
    })
    .unwrap()
}

#[test]
fn zero_bce_weight_is_plain_training() {
    let scene = seed_scene();
    let train_cfg = TrainConfig {
        epochs: 20,
        seed: 5,
        ..TrainConfig::default()
    };
    let cfg = SeedcutConfig {
        train: train_cfg.clone(),
        bce_weight: 0.0,
        ..SeedcutConfig::default()
    };
    let boxes = instance_boxes(&scene.gt, 2);
    let joint = train_seedcut(&scene, &boxes, &cfg).unwrap();
    let plain = train(&scene, &train_cfg).unwrap();
    assert_eq!(joint.losses, plain.losses);
    assert_eq!(joint.backbone, plain.backbone);
}

#[test]
fn trained_cuts_match_instances() {
    let scene = seed_scene();
    let cfg = SeedcutConfig {
        train: TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        },
        ..SeedcutConfig::default()
    };
    let boxes = instance_boxes(&scene.gt, cfg.box_pad);
    let out = train_seedcut(&scene, &boxes, &cfg).unwrap();
    assert!(out.sigmas.iter().all(|s| s.is_finite() && *s > 0.0));
    let field = embed_dense(&out.backbone, &scene.image, Mode::Semiconv).unwrap();
    let results =
        evaluate_boxes(&scene, &field, &boxes, &out.kernel, SeedMode::Hard, cfg.threshold).unwrap();
    let mean = results.iter().map(|r| r.iou).sum::<f64>() / results.len() as f64;
    assert!(mean >= 0.9, "{mean}");
}
