mod common;

use std::path::Path;

use ipay::dataset::{Dataset, DatasetManifest, Split};
use ipay::model::IPayModel;
use ipay::rgb::RoiGeometry;
use ipay::synthgen::{self, SynthConfig};
use ipay::Error;

fn written(dir: &Path) -> DatasetManifest {
    let cfg = SynthConfig { frames_per_clip: 2, ..SynthConfig::balanced(2, 13) };
    synthgen::generate_dataset(&cfg, dir).unwrap()
}

fn rejects(dir: &Path, m: &DatasetManifest, what: &str) {
    match m.validate(dir) {
        Err(Error::Manifest(_)) | Err(Error::LabelOutOfRange { .. }) | Err(Error::Io { .. }) | Err(Error::InvalidLayout(_)) => {}
        other => panic!("{what}: expected a manifest error, got {other:?}"),
    }
}

#[test]
fn generated_manifest_validates_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = written(dir.path());
    m.validate(dir.path()).unwrap();
    assert_eq!(DatasetManifest::load(&dir.path().join("manifest.json")).unwrap(), m);
}

#[test]
fn structural_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let good = written(dir.path());
    let d = dir.path();

    let mut m = good.clone();
    m.version = 99;
    rejects(d, &m, "version");

    let mut m = good.clone();
    m.layout = "unknown_layout".into();
    rejects(d, &m, "layout");

    let mut m = good.clone();
    m.samples[1].id = m.samples[0].id.clone();
    rejects(d, &m, "duplicate id");

    let mut m = good.clone();
    m.samples[0].label = 5;
    assert!(matches!(m.validate(d), Err(Error::LabelOutOfRange { label: 5, classes: 5 })));

    let mut m = good.clone();
    m.samples[0].skeleton.dims[2] += 1;
    rejects(d, &m, "byte count");

    let mut m = good.clone();
    m.samples[0].skeleton.dims[3] = 20;
    rejects(d, &m, "joint count");

    let mut m = good.clone();
    m.samples[0].frames[0] = "frames/missing.png".into();
    rejects(d, &m, "missing frame");

    let mut m = good.clone();
    m.samples[0].joints2d.pop();
    rejects(d, &m, "joints2d rows");

    let mut m = good.clone();
    m.samples[0].joints2d[0].pop();
    rejects(d, &m, "joints2d width");

    let mut m = good.clone();
    m.informative_joints.clear();
    rejects(d, &m, "informative joints");

    let mut m = good;
    m.samples[0].skeleton.file = "skeletons/none.bin".into();
    rejects(d, &m, "missing skeleton");
}

#[test]
fn unknown_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    written(dir.path());
    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\"", "\"colour\": 1, \"version\"", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(Error::Manifest(_))));
}

#[test]
fn load_and_prepare_for_a_model() {
    let dir = tempfile::tempdir().unwrap();
    written(dir.path());
    let mut cfg = common::tiny_config();
    cfg.data.roi.informative_joints = vec!["left_hand".into(), "right_hand".into()];
    let ds = Dataset::load(&dir.path().join("manifest.json"), RoiGeometry::from(&cfg.data.roi)).unwrap();
    assert_eq!(ds.clips.len(), 10);
    let model = IPayModel::<f32>::new(&cfg, &ds.layout).unwrap();
    let data = ds.prepare(&model, None).unwrap();
    assert!(data.dropped.is_empty());
    for s in &data.samples {
        assert_eq!(s.skeleton.frames(), cfg.data.frames);
        assert_eq!(s.rgb.as_ref().unwrap().shape(), &[3, cfg.data.roi.height(), cfg.data.roi.width()]);
    }
    assert_eq!(data.split(Split::Train).len() + data.split(Split::Test).len(), 10);
}
