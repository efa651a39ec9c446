use std::collections::BTreeSet;

use kgprobe::extraction::TaskTag;
use kgprobe::pipeline::{
    run_experiment, BackendConfig, MockConfig, PcaConfig, RunConfig, SizeCurveConfig,
};

fn json_keys(v: &serde_json::Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let Some(o) = v.as_object() {
        for (k, child) in o {
            let path = format!("{prefix}.{k}");
            out.insert(path.clone());
            if k != "config" {
                json_keys(child, &path, out);
            }
        }
    }
}

#[test]
fn mock_run_selects_planted_layer_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::mock_default();
    cfg.pca = Some(PcaConfig::default());
    cfg.sizes = Some(SizeCurveConfig {
        n: vec![100, 400],
        seeds: 2,
    });
    let out = run_experiment(&cfg, Some(dir.path())).unwrap();
    let r = &out.report;
    assert_eq!(r.selected_layer, Some(5));
    assert_eq!(r.layers.len(), 7);
    assert!(r.metrics["accuracy"] >= 0.99);
    assert_eq!(r.sizes.len(), 4);
    assert_eq!(r.sample_counts["train"], 2000);
    for name in ["report.json", "layers.csv", "sizes.csv", "pca.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let layers = std::fs::read_to_string(dir.path().join("layers.csv")).unwrap();
    assert_eq!(layers.lines().next(), Some("layer,valid_acc,test_acc"));
    assert_eq!(layers.lines().count(), 8);
    let pca = std::fs::read_to_string(dir.path().join("pca.csv")).unwrap();
    assert_eq!(pca.lines().count(), 1001);
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(echoed["config"], serde_json::to_value(&cfg).unwrap());
}

#[test]
fn reports_share_a_key_set() {
    let mut a = RunConfig::mock_default();
    a.examples.train = 200;
    a.examples.valid = 100;
    a.examples.test = 100;
    a.probe.epochs = 2;
    let mut b = a.clone();
    b.backend = BackendConfig::Mock(MockConfig {
        margin: 0.0,
        planted: vec![2],
        ..Default::default()
    });
    b.probe.seed = 9;
    let keys = |c: &RunConfig| {
        let v = serde_json::to_value(&run_experiment(c, None).unwrap().report).unwrap();
        let mut k = BTreeSet::new();
        json_keys(&v, "", &mut k);
        k
    };
    assert_eq!(keys(&a), keys(&b));
}

#[test]
fn relation_prediction_run() {
    let mut cfg = RunConfig::mock_default();
    cfg.task = TaskTag::RelationPrediction;
    cfg.examples.valid = 500;
    cfg.examples.test = 500;
    cfg.backend = BackendConfig::Mock(MockConfig {
        margin: 3.0,
        ..Default::default()
    });
    cfg.probe.learning_rate = 1e-3;
    let out = run_experiment(&cfg, None).unwrap();
    assert_eq!(out.report.selected_layer, Some(5));
    assert_eq!(out.test.header.num_classes(), 5);
    assert!(out.report.metrics.contains_key("hits_at_1"));
    assert_eq!(
        out.report.metrics["hits_at_1"],
        out.report.metrics["accuracy"]
    );
}

#[test]
fn stage_errors_name_the_stage() {
    let mut cfg = RunConfig::mock_default();
    cfg.examples.train = 1_000_000;
    let err = run_experiment(&cfg, None).err().unwrap();
    assert_eq!(err.stage, "sample");
    let mut cfg = RunConfig::mock_default();
    cfg.extract.layers = vec![8];
    assert_eq!(run_experiment(&cfg, None).err().unwrap().stage, "extract");
}
