use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ipay::config::{Config, RgbConfig, SddConfig, SkeletonConfig};
use ipay::dataset::{DatasetManifest, Split};
use ipay::report::EvalReport;
use ipay::synthgen::table1_counts;

fn ipay(args: &[&str], seed: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ipay"));
    c.args(args).env("RUST_LOG", "warn").env_remove("IPAY_SEED");
    if let Some(s) = seed {
        c.env("IPAY_SEED", s);
    }
    c.output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut c = Config::preset("desk").unwrap();
    c.model.skeleton = SkeletonConfig { widths: vec![4, 6], strides: vec![1, 2], temporal_kernel: 3 };
    c.model.rgb = RgbConfig { stem_width: 4, widths: vec![4], ..c.model.rgb };
    c.model.fusion.dim = 4;
    c.model.sdd = SddConfig { k: 4, mlp_hidden: 4, tcn_width: 4, tcn_kernel: 3 };
    c.data.frames = 12;
    c.data.roi.box_size = 16;
    c.data.roi.box_out = 8;
    c.train.epochs = 2;
    c.train.warmup_epochs = 0.5;
    c.train.cosine_end_epoch = 1.0;
    c.train.step_milestones = vec![1.0];
    c.train.batch_size = 8;
    let path = dir.join("tiny.toml");
    fs::write(&path, c.to_toml_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn synth(dir: &Path, per_class: &str) -> String {
    ok(&ipay(&["synth", "--out", p(dir), "--per-class", per_class, "--seed", "7"], None));
    p(&dir.join("manifest.json")).to_string()
}

#[test]
fn synth_writes_deterministic_balanced_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), "10");
    let b = synth(&tmp.path().join("b"), "10");
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    let m = DatasetManifest::load(Path::new(&a)).unwrap();
    assert_eq!(m.samples.len(), 50);
    for label in 0..5 {
        assert_eq!(m.samples.iter().filter(|s| s.label == label).count(), 10);
    }
}

#[test]
fn synth_table1_proportions() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ipay(&["synth", "--out", p(tmp.path()), "--table1-proportions", "--total", "60", "--seed", "1"], None);
    ok(&o);
    let m = DatasetManifest::load(&tmp.path().join("manifest.json")).unwrap();
    let mut counts = [0usize; 5];
    m.samples.iter().for_each(|s| counts[s.label] += 1);
    assert_eq!(counts, table1_counts(60));
    assert_eq!(ipay(&["synth", "--out", p(tmp.path()), "--table1-proportions"], None).status.code(), Some(2));
}

#[test]
fn train_eval_extract_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"), "4");
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&ipay(&["train", "--data", &data, "--config", &cfg, "--out", p(&run)], None));
    for f in ["model.ckpt", "config.toml", "train_log.jsonl", "report.json", "report.txt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt = run.join("model.ckpt");
    let json = tmp.path().join("eval.json");
    let o = ipay(&["eval", "--data", &data, "--ckpt", p(&ckpt), "--config", &cfg, "--out", p(&json)], None);
    ok(&o);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("QR Code") && table.contains("Avg.") && table.contains("Params."));
    let text = fs::read_to_string(&json).unwrap();
    let report = EvalReport::from_json(&text).unwrap();
    assert_eq!(report.to_json(), text);
    assert!(report.flops > 0 && report.params > 0);
    let m = DatasetManifest::load(Path::new(&data)).unwrap();
    assert_eq!(report.samples, m.samples.iter().filter(|s| s.split == Split::Test).count());
    assert_eq!(report.stream_accuracy.len(), 4);

    let o = ipay(&["eval", "--data", &data, "--ckpt", p(&ckpt), "--config", "desk"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));

    let feats = tmp.path().join("feats");
    ok(&ipay(&["extract-features", "--data", &data, "--ckpt", p(&ckpt), "--out", p(&feats), "--dump-roi"], None));
    let csv = fs::read_to_string(feats.join("features.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 21);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 20 * 12);
    for r in &rows {
        assert_eq!(r.len(), 21);
        assert!(r[1..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
    for id in rows.iter().map(|r| r[0]) {
        assert_eq!(rows.iter().filter(|r| r[0] == id).count(), 12);
    }
    assert_eq!(fs::read_dir(feats.join("roi")).unwrap().count(), 20);
}

#[test]
fn seed_override_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"), "3");
    let cfg = tiny_config(tmp.path());
    let train = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        ok(&ipay(&["train", "--data", &data, "--config", &cfg, "--out", p(&out)], Some(seed)));
        (fs::read_to_string(out.join("train_log.jsonl")).unwrap(), fs::read(out.join("model.ckpt")).unwrap())
    };
    let a = train("a", "5");
    let b = train("b", "5");
    let c = train("c", "6");
    assert_eq!(a, b);
    assert_ne!(a.1, c.1);
    let o = ipay(&["train", "--data", &data, "--config", &cfg, "--out", p(&tmp.path().join("d"))], Some("x"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validation_and_runtime_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"), "1");
    let out = p(&tmp.path().join("run")).to_string();
    let o = ipay(&["train", "--data", &data, "--config", "no_such_preset", "--out", &out], None);
    assert_eq!(o.status.code(), Some(2));

    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&data).unwrap()).unwrap();
    m["samples"][0]["label"] = 9.into();
    fs::write(&data, serde_json::to_string(&m).unwrap()).unwrap();
    let o = ipay(&["train", "--data", &data, "--config", "desk", "--out", &out], None);
    assert_eq!(o.status.code(), Some(2));

    let o = ipay(&["eval", "--data", &data, "--ckpt", p(&tmp.path().join("missing.ckpt"))], None);
    assert_eq!(o.status.code(), Some(3));
}
