mod common;

use ipay::config::Config;
use ipay::flops::{self, LayerSpec};
use ipay::model::{count_flops_params, IPayModel};
use ipay::skeleton::JointLayout;
use ipay::Error;

fn check(cfg: &Config, flops: u64, params: u64) {
    let layout = common::five_joint_layout();
    assert_eq!(count_flops_params(cfg, &layout).unwrap(), (flops, params));
    let model = IPayModel::<f64>::new(cfg, &layout).unwrap();
    assert_eq!(model.params.num_scalars() as u64, params);
}

// Backbone on 5 joints, 4 frames, one block 3 -> 2 channels:
// adjacency offset 25 params; A-multiply 2*12*5*5 = 600;
// spatial 1x1 2*3*2*20 = 240 (8 params); temporal k3 2*3*2*2*20 = 480 (14);
// residual 1x1 240 (8). Head 2 -> 5: 20 flops, 15 params.

#[test]
fn skeleton_only_by_hand() {
    check(&common::micro(common::streams(true, false, false, false)), 600 + 240 + 480 + 240 + 20, 25 + 8 + 14 + 8 + 15);
}

// SDD on top of the headless backbone: MLP 2 -> 3 -> 2 over 5 joints
// (60 + 60 flops, 9 + 8 params), anchor product 2*2*2*3 = 24,
// TCN k3 14 -> 4 over 4 frames 1344 (172), 4 -> 4 384 (52), head 4 -> 5 40 (25).
#[test]
fn sdd_only_by_hand() {
    let backbone = (1560, 55);
    let sdd = (60 + 60 + 24 + 1344 + 384 + 40, 9 + 8 + 172 + 52 + 25);
    check(&common::micro(common::streams(false, false, false, true)), backbone.0 + sdd.0, backbone.1 + sdd.1);
}

// 8x8 mosaic. Stem 3x3/2: 4x4 out, 2*9*3*2*16 = 1728 (56). Block stride 2:
// conv1 2x2 out 2*9*2*3*4 = 432 (57), conv2 2*9*3*3*4 = 648 (84),
// shortcut 2*2*3*4 = 48 (9). Head 3 -> 5: 30 (20).
#[test]
fn rgb_only_by_hand() {
    check(&common::micro(common::streams(false, true, false, false)), 1728 + 432 + 648 + 48 + 30, 56 + 57 + 84 + 9 + 20);
}

// Fusion with 4 pooled skeleton tokens and 2x2 = 4 RGB tokens at d = 4:
// tokenizers 64 (12) + 96 (16); each direction three 4 -> 4 projections over
// 4 rows (3*128 flops, 60 params) plus attention 2*2*4*4*4 = 256;
// gate 8 -> 2: 32 (18); head 4 -> 5: 40 (25).
#[test]
fn fusion_only_by_hand() {
    let fusion = (64 + 96 + 2 * (384 + 256) + 32 + 40, 12 + 16 + 2 * 60 + 18 + 25);
    let backbones = (1560 + 2856, 55 + 206);
    check(&common::micro(common::streams(false, false, true, false)), backbones.0 + fusion.0, backbones.1 + fusion.1);
}

#[test]
fn parameter_count_matches_store_for_presets() {
    let layout = JointLayout::test21();
    for preset in ["desk", "desk+ablation_2ensemble", "desk+sdd_only", "desk+upper_body", "desk+single_attn_rgb", "default"] {
        let cfg = Config::preset(preset).unwrap();
        let (_, params) = count_flops_params(&cfg, &layout).unwrap();
        let model = IPayModel::<f32>::new(&cfg, &layout).unwrap();
        assert_eq!(params, model.params.num_scalars() as u64, "{preset}");
    }
}

#[test]
fn json_layer_lists() {
    let v = serde_json::json!([
        {"kind": "linear", "inputs": 10, "outputs": 5, "rows": 1, "bias": true},
        {"kind": "conv", "kernel": 9, "c_in": 3, "c_out": 8, "spatial_out": 100, "bias": true},
        {"kind": "attention", "n_q": 3, "n_k": 7, "d": 16}
    ]);
    let want = (100 + 43200 + 1344, 55 + 224);
    assert_eq!(flops::total_from_json(&v).unwrap(), want);
    let bad = serde_json::json!([{"kind": "lstm", "hidden": 3}]);
    assert!(matches!(flops::total_from_json(&bad), Err(Error::UnknownLayer(k)) if k == "lstm"));
    assert_eq!(flops::total(&[LayerSpec::Params { count: 7 }]), (0, 7));
}
