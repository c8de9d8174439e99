use proptest::prelude::*;
use semiconv::dilemma::{
    assign_region, conv_collision_witness, is_boundary, make_signal, max_semiconv_error, pv_verify,
    pv_verify_thresholded, region_count, run, semiconv_color, ConvStack1d,
};
use semiconv::tensor::PaddingMode;

fn step_for(i: usize) -> f64 {
    [1.0, 0.5, 0.25, 0.125, 0.0625][i]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn signal_is_periodic_triangle(periods in 1usize..5, si in 0usize..5) {
        let l = 2.0 * periods as f64;
        let step = step_for(si);
        let sig = make_signal(l, step).unwrap();
        let per = sig.per_period();
        for i in 0..sig.samples().len() {
            let u = sig.positions()[i];
            if i + per < sig.samples().len() {
                prop_assert_eq!(sig.samples()[i], sig.samples()[i + per]);
            }
            // Triangle oracle: distance to the nearest even integer.
            let want = 1.0 - (u - 2.0 * (u / 2.0).round()).abs();
            prop_assert!((sig.samples()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn semiconv_colors_every_interior_point(periods in 1usize..5, si in 0usize..5) {
        let sig = make_signal(2.0 * periods as f64, step_for(si)).unwrap();
        prop_assert!(max_semiconv_error(&sig) < 1e-9);
        for (&c, &u) in semiconv_color(&sig).iter().zip(sig.positions()) {
            if !is_boundary(u) {
                prop_assert_eq!(assign_region(c), assign_region(u));
                prop_assert_eq!((c / 2.0).round() * 2.0, 2.0 * assign_region(u) as f64);
            }
        }
    }

    #[test]
    fn collision_is_weight_independent(seed in any::<u64>(), depth in 1usize..4, width in 1usize..4) {
        let sig = make_signal(6.0, 0.25).unwrap();
        let mut c = vec![3usize; depth - 1];
        c.push(1);
        let widths = vec![2 * width + 1; depth];
        let op = ConvStack1d::random(&c, &widths, PaddingMode::Circular, seed).unwrap();
        prop_assert!(conv_collision_witness(&sig, &op).unwrap() < 1e-9);
    }

    #[test]
    fn centres_are_one_per_region(periods in 1usize..5, si in 0usize..5) {
        let l = 2.0 * periods as f64;
        let sig = make_signal(l, step_for(si)).unwrap();
        let centres = pv_verify(&sig);
        prop_assert_eq!(centres.len(), region_count(&sig));
        let want: Vec<f64> = (-(periods as i64)..=periods as i64).map(|k| 2.0 * k as f64).collect();
        prop_assert_eq!(&centres, &want);
        prop_assert_eq!(pv_verify_thresholded(&sig), want);
    }
}

#[test]
fn hand_values() {
    let sig = make_signal(4.0, 0.25).unwrap();
    let colors = semiconv_color(&sig);
    let at = |u: f64| colors[((u + 4.0) / 0.25) as usize];
    assert!((at(0.5) - 0.0).abs() < 1e-12);
    assert!((at(2.25) - 2.0).abs() < 1e-12);
    for k in -2..=2 {
        assert_eq!(at(2.0 * k as f64), 2.0 * k as f64);
    }
    assert_eq!(pv_verify(&sig), vec![-4.0, -2.0, 0.0, 2.0, 4.0]);
}

#[test]
fn identity_and_semiconv_peaks() {
    let sig = make_signal(4.0, 0.5).unwrap();
    assert_eq!(conv_collision_witness(&sig, &ConvStack1d::identity()).unwrap(), 0.0);
    let zero = ConvStack1d::random(&[1], &[3], PaddingMode::Zero, 3).unwrap();
    assert!(conv_collision_witness(&sig, &zero).is_err());
    let colors = semiconv_color(&sig);
    for &i in &sig.peak_indices() {
        for &j in &sig.peak_indices() {
            let du = sig.positions()[i] - sig.positions()[j];
            assert_eq!(colors[i] - colors[j], du);
        }
    }
}

#[test]
fn off_grid_steps_rejected() {
    assert!(make_signal(4.0, 0.3).is_err());
    assert!(make_signal(3.0, 0.25).is_err());
    assert!(make_signal(4.0, 0.0).is_err());
}

#[test]
fn report_over_many_stacks() {
    let r = run(4.0, 0.25, 8, 11).unwrap();
    assert!(r.max_conv_spread < 1e-9);
    assert!(r.max_semiconv_error < 1e-9);
    assert_eq!(r.n_regions, 5);
    assert_eq!(r.centers.len(), 5);
}
