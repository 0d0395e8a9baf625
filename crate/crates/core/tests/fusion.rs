mod common;

use ipay::config::FusionHead;
use ipay::fusion::{CrossAttention, GatedFusion};
use ipay::model::Stream;
use ipay::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), nq in 1usize..6, nk in 1usize..6, heads in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let att = CrossAttention::new(&mut store, "a", 4, heads, &mut rng);
        let mut tape = Tape::new(&store);
        let q = tape.input(Tensor::randn([2, nq, 4], 2.0, &mut rng));
        let kv = tape.input(Tensor::randn([2, nk, 4], 2.0, &mut rng));
        let out = att.forward(&mut tape, q, kv).unwrap();
        prop_assert_eq!(out.weights.len(), heads);
        for &w in &out.weights {
            prop_assert_eq!(tape.shape(w), &[2, nq, nk]);
            for row in tape.value(w).data().chunks(nk) {
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        prop_assert_eq!(tape.shape(out.fused), &[2, 4]);
    }
}

#[test]
fn gates_stay_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1000 {
        let mut store = ParamStore::<f64>::new();
        let g = GatedFusion::new(&mut store, 3, 5, FusionHead::LinearAfterGate, &mut rng);
        let w = store.get_mut(g.gate.weight);
        let scale = rng.random_range(0.1..50.0);
        *w = Tensor::randn(w.shape(), scale, &mut rng);
        let mut tape = Tape::new(&store);
        let a = tape.input(Tensor::randn([4, 3], scale, &mut rng));
        let b = tape.input(Tensor::randn([4, 3], scale, &mut rng));
        let (_, gates) = g.forward(&mut tape, a, b).unwrap();
        for row in tape.value(gates).data().chunks(2) {
            assert!(row[0] >= 0.0 && row[1] >= 0.0, "trial {trial}");
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12, "trial {trial}");
        }
    }
}

#[test]
fn duplicate_keys_share_weight_and_return_their_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let att = CrossAttention::new(&mut store, "a", 4, 1, &mut rng);
    let token = Tensor::randn([1, 1, 4], 1.0, &mut rng);
    let twice = Tensor::from_vec([1, 2, 4], [token.data(), token.data()].concat());
    let mut tape = Tape::new(&store);
    let q = tape.input(Tensor::randn([1, 3, 4], 1.0, &mut rng));
    let kv = tape.input(twice);
    let out = att.forward(&mut tape, q, kv).unwrap();
    assert!(tape.value(out.weights[0]).data().iter().all(|&w| (w - 0.5).abs() < 1e-12));
    // The value projection of the single distinct token, computed by hand.
    let wv = store.get(att.value.weight);
    let bv = store.get(att.value.bias.unwrap());
    let expect: Vec<f64> = (0..4).map(|o| bv.data()[o] + (0..4).map(|i| token.data()[i] * wv.at(&[i, o])).sum::<f64>()).collect();
    for (a, b) in tape.value(out.attended).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn fused_is_gate_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let g = GatedFusion::new(&mut store, 3, 5, FusionHead::Identity, &mut rng);
    let mut tape = Tape::new(&store);
    let (av, bv) = (Tensor::randn([2, 3], 1.0, &mut rng), Tensor::randn([2, 3], 1.0, &mut rng));
    let a = tape.input(av.clone());
    let b = tape.input(bv.clone());
    let (mixed, gates) = g.forward(&mut tape, a, b).unwrap();
    let gv = tape.value(gates).clone();
    for i in 0..2 {
        for c in 0..3 {
            let want = gv.at(&[i, 0]) * av.at(&[i, c]) + gv.at(&[i, 1]) * bv.at(&[i, c]);
            assert!((tape.value(mixed).at(&[i, c]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn fusion_loss_reaches_both_backbones() {
    let (model, batch) = common::tiny_model_and_batch(&common::tiny_config(), 3, 14);
    let mut tape = Tape::new(&model.params);
    let out = model.forward(&mut tape, &batch).unwrap();
    let logits = out.stream(Stream::Fusion).unwrap();
    let loss = tape.cross_entropy(logits, &batch.labels);
    let grads = tape.backward(loss);
    let mut reached = [false; 2];
    for id in model.params.ids() {
        let name = model.params.name(id);
        let nonzero = grads.param(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
        if name.starts_with("skeleton.block") && nonzero {
            reached[0] = true;
        }
        if name.starts_with("rgb.") && !name.starts_with("rgb.head") && nonzero {
            reached[1] = true;
        }
        if name.starts_with("sdd.") || name.ends_with(".head.weight") && !name.starts_with("fusion") {
            assert!(!nonzero, "{name} should not see the fusion loss");
        }
    }
    assert_eq!(reached, [true, true]);
}
