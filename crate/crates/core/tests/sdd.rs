mod common;

use ipay::model::Stream;
use ipay::sdd::{compute_anchor, hand_centric_features, top_k_renormalized};
use ipay::skeleton::{normalize_sequence, JointLayout, NormalizedSkeleton};
use ipay::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clip(seed: u64, t: usize) -> NormalizedSkeleton<f64> {
    let x = common::random_clip(&mut ChaCha8Rng::seed_from_u64(seed), &JointLayout::test21(), 1, t);
    normalize_sequence(&x).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.0..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn anchor_matches_brute_force(seed in any::<u64>(), k in 1usize..22, t in 1usize..10) {
        let x = clip(seed, t);
        let w = random_weights(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), 21);
        let a = compute_anchor(&w, &x, k).unwrap();
        let o = common::oracle_anchor(&w, &x, k);
        for c in 0..3 {
            prop_assert!((a[c] - o[c]).abs() < 1e-12);
        }
        let (idx, ws) = top_k_renormalized(&w, k);
        prop_assert_eq!(idx.len(), k);
        prop_assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(ws.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn anchor_lies_in_the_box_of_mean_positions(seed in any::<u64>(), k in 1usize..22) {
        let x = clip(seed, 6);
        let w = random_weights(&mut ChaCha8Rng::seed_from_u64(seed ^ 2), 21);
        let a = compute_anchor(&w, &x, k).unwrap();
        let seq = x.sequence();
        for c in 0..3 {
            let means: Vec<f64> = (0..21).map(|j| (0..6).map(|t| seq.point(0, t, j)[c]).sum::<f64>() / 6.0).collect();
            let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a[c] >= lo - 1e-12 && a[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn features_follow_their_definition(seed in any::<u64>(), t in 1usize..12) {
        let x = clip(seed, t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let l: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let f = hand_centric_features(&x, l, r);
        let seq = x.sequence();
        let hands = [(seq.layout().left_hand, l), (seq.layout().right_hand, r)];
        prop_assert_eq!(f.frames(), t);
        for ti in 0..t {
            let row = f.row(ti);
            for (h, (j, a)) in hands.iter().enumerate() {
                let p = seq.point(0, ti, *j);
                let d: Vec<f64> = (0..3).map(|c| p[c] - a[c]).collect();
                let base = h * 7;
                for c in 0..3 {
                    prop_assert!((row[base + c] - d[c]).abs() < 1e-12);
                    let delta = if ti == 0 { 0.0 } else { d[c] - (seq.point(0, ti - 1, *j)[c] - a[c]) };
                    prop_assert!((row[base + 3 + c] - delta).abs() < 1e-12);
                }
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((row[base + 6] - norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_translation_cancels(seed in any::<u64>(), shift in prop::array::uniform3(-5.0f64..5.0)) {
        let x = clip(seed, 5);
        let moved = NormalizedSkeleton::assume_normalized(x.sequence().translated(shift));
        let w = random_weights(&mut ChaCha8Rng::seed_from_u64(seed ^ 4), 21);
        let a = compute_anchor(&w, &x, 5).unwrap();
        let b = compute_anchor(&w, &moved, 5).unwrap();
        for c in 0..3 {
            prop_assert!((b[c] - a[c] - shift[c]).abs() < 1e-10);
        }
        let f = hand_centric_features(&x, a, a);
        let g = hand_centric_features(&moved, b, b);
        prop_assert!(f.data.max_abs_diff(&g.data) < 1e-10);
    }
}

#[test]
fn k_out_of_range_is_rejected() {
    let x = clip(1, 3);
    let w = vec![1.0 / 21.0; 21];
    assert!(compute_anchor(&w, &x, 0).is_err());
    assert!(compute_anchor(&w, &x, 22).is_err());
}

#[test]
fn zeroed_attention_mlp_gives_uniform_weights() {
    let cfg = common::tiny_config();
    let (mut model, batch) = common::tiny_model_and_batch(&cfg, 2, 21);
    let sdd = model.sdd.clone().unwrap();
    for id in [sdd.mlp_out.weight, sdd.mlp_out.bias.unwrap()] {
        let p = model.params.get_mut(id);
        *p = Tensor::zeros(p.shape());
    }
    let mut tape = Tape::new(&model.params);
    let out = model.forward(&mut tape, &batch).unwrap().sdd.unwrap();
    assert!(tape.value(out.weights).data().iter().all(|&w| (w - 1.0 / 21.0).abs() < 1e-12));
}

#[test]
fn in_graph_anchors_match_standalone_formula() {
    let cfg = common::tiny_config();
    let (model, batch) = common::tiny_model_and_batch(&cfg, 3, 22);
    let sdd = model.sdd.as_ref().unwrap();
    let mut tape = Tape::new(&model.params);
    let out = model.forward(&mut tape, &batch).unwrap().sdd.unwrap();
    let (t, v) = (cfg.data.frames, 21);
    for b in 0..3 {
        let pair = sdd.anchor_pair(&tape, &out, b);
        let one = Tensor::from_vec([1, 3, t, v], batch.skeleton.data()[b * 3 * t * v..(b + 1) * 3 * t * v].to_vec());
        let seq = ipay::skeleton::SkeletonSequence::new(one, model.layout.clone()).unwrap();
        let x = NormalizedSkeleton::assume_normalized(seq);
        let left = compute_anchor(&pair.weights_left, &x, cfg.model.sdd.k).unwrap();
        let right = compute_anchor(&pair.weights_right, &x, cfg.model.sdd.k).unwrap();
        for c in 0..3 {
            assert!((left[c] - pair.left[c]).abs() < 1e-12);
            assert!((right[c] - pair.right[c]).abs() < 1e-12);
        }
        let f = hand_centric_features(&x, left, right);
        let fv = tape.value(out.features);
        for ti in 0..t {
            for ch in 0..14 {
                assert!((fv.at(&[b, ch, ti, 0]) - f.row(ti)[ch]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sdd_loss_reaches_the_attention_mlp() {
    let (model, batch) = common::tiny_model_and_batch(&common::tiny_config(), 4, 23);
    let mut tape = Tape::new(&model.params);
    let out = model.forward(&mut tape, &batch).unwrap();
    let loss = tape.cross_entropy(out.stream(Stream::Sdd).unwrap(), &batch.labels);
    let grads = tape.backward(loss);
    let sdd = model.sdd.as_ref().unwrap();
    for id in [sdd.mlp_hidden.weight, sdd.mlp_out.weight] {
        let g = grads.param(id).expect("gradient present");
        assert!(g.data().iter().any(|&v| v != 0.0), "{}", model.params.name(id));
    }
}
