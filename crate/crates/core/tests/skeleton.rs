mod common;

use ipay::skeleton::{augment, normalize_sequence, resample_uniform, rotate_shift, select_joints, JointLayout, SkeletonSequence};
use ipay::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hips_ok(x: &SkeletonSequence<f64>) {
    let l = x.layout().clone();
    for m in 0..x.persons() {
        for t in 0..x.frames() {
            let (a, b) = (x.point(m, t, l.left_hip), x.point(m, t, l.right_hip));
            let mid: f64 = (0..3).map(|c| ((a[c] + b[c]) / 2.0).powi(2)).sum::<f64>().sqrt();
            let d: f64 = (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
            assert!(mid < 1e-6, "midpoint {mid}");
            assert!((d - 1.0).abs() < 1e-6, "hip distance {d}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_hips_are_centred_and_unit(seed in any::<u64>(), m in 1usize..3, t in 2usize..12) {
        let x = common::random_clip(&mut ChaCha8Rng::seed_from_u64(seed), &JointLayout::test21(), m, t);
        hips_ok(normalize_sequence(&x).unwrap().sequence());
    }

    #[test]
    fn translation_and_scale_cancel(seed in any::<u64>(), c in prop::array::uniform3(-50.0f64..50.0), s in 0.05f64..20.0) {
        let x = common::random_clip(&mut ChaCha8Rng::seed_from_u64(seed), &JointLayout::test21(), 1, 6);
        let base = normalize_sequence(&x).unwrap().into_sequence();
        let moved = normalize_sequence(&x.translated(c)).unwrap().into_sequence();
        let scaled = normalize_sequence(&x.scaled(s)).unwrap().into_sequence();
        prop_assert!(base.tensor().max_abs_diff(moved.tensor()) < 1e-6);
        prop_assert!(base.tensor().max_abs_diff(scaled.tensor()) < 1e-6);
    }

    #[test]
    fn resample_picks_floor_index(seed in any::<u64>(), t_in in 1usize..40, t_out in 1usize..40) {
        let x = common::random_clip(&mut ChaCha8Rng::seed_from_u64(seed), &common::five_joint_layout(), 1, t_in);
        let y = resample_uniform(&x, t_out).unwrap();
        prop_assert_eq!(y.frames(), t_out);
        for i in 0..t_out {
            let src = (i * t_in) / t_out;
            for v in 0..5 {
                prop_assert_eq!(y.point(0, i, v), x.point(0, src, v));
            }
        }
        let again = resample_uniform(&y, t_out).unwrap();
        prop_assert_eq!(&again, &y);
    }

    #[test]
    fn augmentation_is_seeded_and_shift_normalizes_away(seed in any::<u64>(), aug_seed in any::<u64>()) {
        let x = common::random_clip(&mut ChaCha8Rng::seed_from_u64(seed), &JointLayout::test21(), 1, 5);
        let a = augment(&x, 0.5, 0.3, &mut ChaCha8Rng::seed_from_u64(aug_seed));
        let b = augment(&x, 0.5, 0.3, &mut ChaCha8Rng::seed_from_u64(aug_seed));
        prop_assert_eq!(&a, &b);
        let shifted = augment(&x, 0.5, 0.0, &mut ChaCha8Rng::seed_from_u64(aug_seed));
        let d = normalize_sequence(&shifted).unwrap().into_sequence().tensor()
            .max_abs_diff(normalize_sequence(&x).unwrap().into_sequence().tensor());
        prop_assert!(d < 1e-9);
    }
}

#[test]
fn resample_examples() {
    let x = common::random_clip(&mut ChaCha8Rng::seed_from_u64(1), &common::five_joint_layout(), 1, 50);
    let up = resample_uniform(&x, 100).unwrap();
    for i in 0..100 {
        assert_eq!(up.point(0, i, 2), x.point(0, i / 2, 2));
    }
    let x = common::random_clip(&mut ChaCha8Rng::seed_from_u64(2), &common::five_joint_layout(), 1, 200);
    let down = resample_uniform(&x, 100).unwrap();
    for i in 0..100 {
        assert_eq!(down.point(0, i, 4), x.point(0, 2 * i, 4));
    }
    assert_eq!(resample_uniform(&down, 100).unwrap(), down);
}

#[test]
fn rotation_about_vertical_axis() {
    let x = common::random_clip(&mut ChaCha8Rng::seed_from_u64(3), &common::five_joint_layout(), 1, 2);
    let mut y = x.clone();
    y.set_point(0, 0, 2, [1.0, 0.0, 0.0]);
    let r = rotate_shift(&y, std::f64::consts::PI, [0.0; 3]);
    let p = r.point(0, 0, 2);
    assert!((p[0] + 1.0).abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] == 0.0);
    let id = augment(&x, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(id, x);
}

#[test]
fn upper_body_selection_and_missing_hip() {
    let l = JointLayout::test21();
    let x = common::random_clip(&mut ChaCha8Rng::seed_from_u64(4), &l, 1, 3);
    let upper = l.upper_body();
    let y = select_joints(&x, &upper).unwrap();
    assert_eq!(y.joints(), l.num_joints() - 10);
    let kept = y.layout();
    for &(a, b) in &kept.edges {
        let (na, nb) = (&kept.names[a], &kept.names[b]);
        assert!(l.edges.iter().any(|&(p, q)| {
            let (lp, lq) = (&l.names[p], &l.names[q]);
            (lp == na && lq == nb) || (lp == nb && lq == na)
        }));
    }
    let within = l.edges.iter().filter(|(a, b)| upper.contains(a) && upper.contains(b)).count();
    assert_eq!(kept.edges.len(), within);
    let all: Vec<usize> = (0..l.num_joints()).collect();
    assert_eq!(select_joints(&x, &all).unwrap(), x);
    let no_hip: Vec<usize> = all.iter().copied().filter(|&j| j != l.left_hip).collect();
    assert!(matches!(select_joints(&x, &no_hip), Err(Error::MissingRequiredJoint(_))));
}

#[test]
fn degenerate_hips_and_empty_sequences_are_rejected() {
    let l = common::five_joint_layout();
    let mut x = common::random_clip(&mut ChaCha8Rng::seed_from_u64(5), &l, 1, 4);
    let p = x.point(0, 2, l.left_hip);
    x.set_point(0, 2, l.right_hip, p);
    assert!(matches!(normalize_sequence(&x), Err(Error::DegenerateHips { frame: 2, .. })));
    let empty = ipay::Tensor::<f64>::zeros([1, 3, 0, 5]);
    assert!(matches!(SkeletonSequence::new(empty, std::sync::Arc::new(l)), Err(Error::EmptySequence)));
}
