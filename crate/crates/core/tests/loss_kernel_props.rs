use proptest::prelude::*;
use semiconv::kernels::{
    factorized_kernel, fuse_scores, gaussian_kernel, steered_laplacian, KernelFamily, KernelParams,
    SeedMode,
};
use semiconv::losses::{mask_bce, pull_to_mean_loss, PullLossOptions, SegmentSet};
use semiconv::semiconv::EmbeddingField;
use semiconv::tensor::{Tape, Tensor};

const H: usize = 4;
const W: usize = 5;

fn loss_of(values: &[f64], dims: usize, segs: &SegmentSet) -> f64 {
    let tape = Tape::new();
    let t = Tensor::new([dims, H, W], values.to_vec()).unwrap();
    let f = EmbeddingField::convolutional(tape.constant(t)).unwrap();
    pull_to_mean_loss(&f, segs, PullLossOptions::default()).unwrap().item().unwrap()
}

/// Reference loss computed by plain loops.
fn oracle_loss(values: &[f64], dims: usize, segs: &[Vec<usize>], eps: f64) -> f64 {
    let plane = H * W;
    segs.iter()
        .map(|s| {
            let mean: Vec<f64> = (0..dims)
                .map(|c| s.iter().map(|&p| values[c * plane + p]).sum::<f64>() / s.len() as f64)
                .collect();
            s.iter()
                .map(|&p| {
                    let sq: f64 = (0..dims).map(|c| (values[c * plane + p] - mean[c]).powi(2)).sum();
                    (sq + eps).sqrt()
                })
                .sum::<f64>()
                / s.len() as f64
        })
        .sum()
}

fn segments_from(assign: &[u8]) -> SegmentSet {
    let mut segs = vec![Vec::new(); 3];
    let mut bg = Vec::new();
    for (p, &a) in assign.iter().enumerate() {
        match a {
            0 => bg.push(p),
            k => segs[k as usize - 1].push(p),
        }
    }
    segs.retain(|s| !s.is_empty());
    SegmentSet::new(segs, bg, H * W).unwrap()
}

fn embedding(dims: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, dims * H * W)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn loss_matches_loop_oracle(v in embedding(3), assign in prop::collection::vec(0u8..4, H * W)) {
        prop_assume!(assign.iter().any(|&a| a != 0));
        let segs = segments_from(&assign);
        let got = loss_of(&v, 3, &segs);
        let want = oracle_loss(&v, 3, segs.segments(), 1e-8);
        prop_assert!(got >= 0.0);
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn loss_is_translation_invariant(v in embedding(3), shift in prop::collection::vec(-50.0f64..50.0, 3), assign in prop::collection::vec(0u8..4, H * W)) {
        prop_assume!(assign.iter().any(|&a| a != 0));
        let segs = segments_from(&assign);
        let moved: Vec<f64> = v.iter().enumerate().map(|(i, x)| x + shift[i / (H * W)]).collect();
        prop_assert!((loss_of(&v, 3, &segs) - loss_of(&moved, 3, &segs)).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_background(v in embedding(2), noise in embedding(2), assign in prop::collection::vec(0u8..4, H * W)) {
        prop_assume!(assign.iter().any(|&a| a != 0));
        let segs = segments_from(&assign);
        let mut perturbed = v.clone();
        for &p in segs.background() {
            for c in 0..2 {
                perturbed[c * H * W + p] += noise[c * H * W + p];
            }
        }
        prop_assert_eq!(loss_of(&v, 2, &segs), loss_of(&perturbed, 2, &segs));
    }

    #[test]
    fn loss_is_permutation_invariant(v in embedding(2), rot in 1usize..5) {
        // One segment holding pixels 0..10, permuted by rotation.
        let seg: Vec<usize> = (0..10).collect();
        let segs = SegmentSet::new(vec![seg.clone()], (10..H * W).collect(), H * W).unwrap();
        let mut permuted = v.clone();
        for c in 0..2 {
            for &p in &seg {
                permuted[c * H * W + p] = v[c * H * W + (p + rot) % 10];
            }
        }
        prop_assert!((loss_of(&v, 2, &segs) - loss_of(&permuted, 2, &segs)).abs() < 1e-12);
    }

    #[test]
    fn constant_segments_have_eps_bounded_loss(consts in prop::collection::vec(-5.0f64..5.0, 6), assign in prop::collection::vec(0u8..4, H * W)) {
        prop_assume!(assign.iter().any(|&a| a != 0));
        let segs = segments_from(&assign);
        let mut v = vec![0.0; 2 * H * W];
        for (k, s) in segs.segments().iter().enumerate() {
            for &p in s {
                v[p] = consts[2 * k];
                v[H * W + p] = consts[2 * k + 1];
            }
        }
        let k = segs.segments().len() as f64;
        let loss = loss_of(&v, 2, &segs);
        prop_assert!((loss - k * 1e-4).abs() < 1e-12);
        prop_assert!(loss < 1e-3);
    }

    #[test]
    fn kernels_symmetric_and_bounded(a in prop::collection::vec(-3.0f64..3.0, 4), b in prop::collection::vec(-3.0f64..3.0, 4), sigma in 0.05f64..5.0) {
        let g = gaussian_kernel(&a, &b).unwrap();
        prop_assert_eq!(g, gaussian_kernel(&b, &a).unwrap());
        prop_assert!(g > 0.0 && g <= 1.0);
        prop_assert_eq!(gaussian_kernel(&a, &a).unwrap(), 1.0);
        let l = steered_laplacian(&a, &b, sigma).unwrap();
        prop_assert_eq!(l, steered_laplacian(&b, &a, sigma).unwrap());
        prop_assert!(l > 0.0 && l <= 1.0);
        prop_assert_eq!(steered_laplacian(&a, &a, sigma).unwrap(), 1.0);
    }

    #[test]
    fn gaussian_equals_factorized(u in prop::array::uniform2(0.0f64..8.0), v in prop::array::uniform2(0.0f64..8.0),
                                  gu in prop::array::uniform2(-2.0f64..2.0), gv in prop::array::uniform2(-2.0f64..2.0),
                                  au in prop::collection::vec(-2.0f64..2.0, 3), av in prop::collection::vec(-2.0f64..2.0, 3)) {
        let pu: Vec<f64> = [u[0] + gu[0], u[1] + gu[1]].into_iter().chain(au.iter().copied()).collect();
        let pv: Vec<f64> = [v[0] + gv[0], v[1] + gv[1]].into_iter().chain(av.iter().copied()).collect();
        let k7 = gaussian_kernel(&pu, &pv).unwrap();
        let k8 = factorized_kernel(u, v, gu, gv, &au, &av).unwrap();
        prop_assert!((k7 - k8).abs() < 1e-12);
    }

    #[test]
    fn laplacian_decreasing_in_distance(d1 in 0.0f64..10.0, d2 in 0.0f64..10.0, sigma in 0.1f64..3.0) {
        prop_assume!((d1 - d2).abs() > 1e-9);
        let k1 = steered_laplacian(&[0.0], &[d1], sigma).unwrap();
        let k2 = steered_laplacian(&[0.0], &[d2], sigma).unwrap();
        prop_assert_eq!(d1 < d2, k1 > k2);
    }

    #[test]
    fn fusion_never_raises_scores(scores in prop::collection::vec(-5.0f64..5.0, 1..12), seed in any::<u64>(), soft in any::<bool>(), sigma in 0.1f64..3.0, gauss in any::<bool>()) {
        let n = scores.len();
        let emb: Vec<f64> = (0..n * 3).map(|i| ((seed.wrapping_add(i as u64 * 2654435761) % 997) as f64) / 100.0).collect();
        let family = if gauss { KernelFamily::Gaussian } else { KernelFamily::SteeredLaplacian };
        let tape = Tape::new();
        let kernel = KernelParams::new(family, sigma).unwrap().bind(&tape, false);
        let mode = if soft { SeedMode::Soft } else { SeedMode::Hard };
        let f = fuse_scores(tape.constant(Tensor::from_vec(scores.clone())), tape.constant(Tensor::new([n, 3], emb).unwrap()), &kernel, mode).unwrap();
        let fused = f.fused_scores.value();
        for (s_hat, s) in fused.data().iter().zip(&scores) {
            prop_assert!(s_hat <= s);
        }
        if !soft {
            prop_assert_eq!(fused.data()[f.seed_index], scores[f.seed_index]);
        }
    }

    #[test]
    fn soft_fusion_is_continuous(scores in prop::collection::vec(-3.0f64..3.0, 6), emb in prop::collection::vec(-2.0f64..2.0, 18), i in 0usize..6) {
        let fused = |s: &[f64]| -> Vec<f64> {
            let tape = Tape::new();
            let kernel = KernelParams::default().bind(&tape, false);
            let f = fuse_scores(tape.constant(Tensor::from_vec(s.to_vec())), tape.constant(Tensor::new([6, 3], emb.clone()).unwrap()), &kernel, SeedMode::Soft).unwrap();
            f.fused_scores.value().data().to_vec()
        };
        let base = fused(&scores);
        for delta in [1e-3, 1e-5, 1e-7] {
            let mut s = scores.clone();
            s[i] += delta;
            let moved = fused(&s);
            let change = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            // Lipschitz bound: the seed moves by at most 2·δ·max‖Ψ‖, the log kernel by that over σ.
            prop_assert!(change <= delta * (1.0 + 2.0 * 2.0 * 3f64.sqrt() * 2.0) + 1e-12);
        }
    }

    #[test]
    fn soft_matches_hard_with_dominant_score(scores in prop::collection::vec(-3.0f64..3.0, 8), emb in prop::collection::vec(-2.0f64..2.0, 24), top in 0usize..8) {
        let mut s = scores.clone();
        s[top] = scores.iter().cloned().fold(f64::MIN, f64::max) + 20.0;
        let seed_of = |mode| {
            let tape = Tape::new();
            let kernel = KernelParams::default().bind(&tape, false);
            let f = fuse_scores(tape.constant(Tensor::from_vec(s.clone())), tape.constant(Tensor::new([8, 3], emb.clone()).unwrap()), &kernel, mode).unwrap();
            (f.seed_index, f.seed_embedding.value().data().to_vec())
        };
        let (hi, hard) = seed_of(SeedMode::Hard);
        let (_, soft) = seed_of(SeedMode::Soft);
        prop_assert_eq!(hi, top);
        for (a, b) in hard.iter().zip(&soft) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_matches_closed_form(p in prop::collection::vec(0.01f64..0.99, 1..10), m in prop::collection::vec(any::<bool>(), 10)) {
        let mask = &m[..p.len()];
        let tape = Tape::new();
        let got = mask_bce(tape.constant(Tensor::from_vec(p.clone())), mask).unwrap().item().unwrap();
        let want = -p.iter().zip(mask).map(|(&k, &y)| if y { k.ln() } else { (1.0 - k).ln() }).sum::<f64>() / p.len() as f64;
        prop_assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn loss_hand_example() {
    let tape = Tape::new();
    let t = Tensor::new([1, 1, 2], vec![0.0, 2.0]).unwrap();
    let f = EmbeddingField::convolutional(tape.constant(t)).unwrap();
    let segs = SegmentSet::new(vec![vec![0, 1]], vec![], 2).unwrap();
    let l = pull_to_mean_loss(&f, &segs, PullLossOptions::default()).unwrap().item().unwrap();
    assert!((l - 1.0).abs() < 1e-8);
}

#[test]
fn bce_examples() {
    let tape = Tape::new();
    let half = mask_bce(tape.constant(Tensor::full([4], 0.5)), &[true, false, true, false]).unwrap();
    assert!((half.item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    let e = mask_bce(tape.constant(Tensor::full([3], (-1.0f64).exp())), &[true; 3]).unwrap();
    assert!((e.item().unwrap() - 1.0).abs() < 1e-15);
    let exact = mask_bce(tape.constant(Tensor::from_vec(vec![1.0, 0.0, 1.0])), &[true, false, true]).unwrap();
    assert!(exact.item().unwrap() < 1e-6);
    assert!(mask_bce(tape.constant(Tensor::full([3], 0.5)), &[true; 2]).is_err());
}

#[test]
fn soft_mode_uniform_scores_give_mean_seed() {
    let tape = Tape::new();
    let kernel = KernelParams::default().bind(&tape, false);
    let emb = Tensor::new([3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 8.0]).unwrap();
    let f = fuse_scores(tape.constant(Tensor::full([3], 0.7)), tape.constant(emb), &kernel, SeedMode::Soft).unwrap();
    let seed = f.seed_embedding.value();
    assert!((seed.data()[0] - 2.0).abs() < 1e-15);
    assert!((seed.data()[1] - 4.0).abs() < 1e-15);
}
