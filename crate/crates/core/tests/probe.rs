use std::sync::Arc;

use kgprobe::extraction::{
    extract_records, ExtractOptions, HiddenStateStore, MockLm, PromptRecord, SignalShape,
};
use kgprobe::probe::{
    store_accuracy, sweep_layers, ModelKind, ProbeModel, Standardizer, SweepOptions, TrainConfig,
};
use proptest::prelude::*;

fn parity(t: &str) -> i32 {
    t.bytes().map(|b| b as u32).sum::<u32>() as i32 % 2
}

fn mock_store(planted: &[usize], margin: f64, n: usize, offset: usize) -> HiddenStateStore {
    let lm = MockLm::new(
        11,
        32,
        8,
        planted.iter().copied(),
        margin,
        SignalShape::Binary,
        Arc::new(parity),
    );
    let prompts: Vec<PromptRecord> = (0..n)
        .map(|i| {
            let text = format!("example number {}", i + offset);
            PromptRecord {
                id: i as u64,
                label: parity(&text),
                text,
            }
        })
        .collect();
    extract_records(
        &lm,
        &prompts,
        &(1..8).collect::<Vec<_>>(),
        &ExtractOptions::default(),
    )
    .unwrap()
}

#[test]
fn equal_planted_layers_tie_to_the_lower() {
    let train = mock_store(&[3, 5], 1.0, 600, 0);
    let valid = mock_store(&[3, 5], 1.0, 300, 10_000);
    let out = sweep_layers(
        &train,
        &valid,
        None,
        &TrainConfig::default(),
        &SweepOptions::default(),
    )
    .unwrap();
    let acc = |l: usize| {
        out.report
            .entries
            .iter()
            .find(|e| e.layer == l)
            .unwrap()
            .valid_accuracy
    };
    assert_eq!(acc(3), 1.0);
    assert_eq!(acc(5), 1.0);
    assert_eq!(out.report.selected_layer, 3);
}

#[test]
fn no_signal_sweep_is_near_chance_and_well_formed() {
    let train = mock_store(&[], 0.0, 600, 0);
    let valid = mock_store(&[], 0.0, 1000, 10_000);
    let out = sweep_layers(
        &train,
        &valid,
        Some(&valid),
        &TrainConfig::default(),
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(out.report.entries.len(), 7);
    for e in &out.report.entries {
        // sd of chance accuracy on 1000 examples is about 0.016
        assert!((e.valid_accuracy - 0.5).abs() < 0.08, "{e:?}");
    }
    let selected: Vec<_> = out
        .report
        .entries
        .iter()
        .filter(|e| e.test_accuracy.is_some())
        .collect();
    assert_eq!(selected.len(), 1);
    assert_eq!(selected[0].layer, out.report.selected_layer);
}

#[test]
fn unplanted_layer_is_chance_level() {
    let train = mock_store(&[5], 1.0, 2000, 0);
    let test = mock_store(&[5], 1.0, 1000, 50_000);
    let m = kgprobe::probe::train(&train, 2, &TrainConfig::default()).unwrap();
    assert!((store_accuracy(&m, &test).unwrap() - 0.5).abs() <= 0.05);
    let m = kgprobe::probe::train(&train, 5, &TrainConfig::default()).unwrap();
    assert!(store_accuracy(&m, &test).unwrap() >= 0.99);
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let train = mock_store(&[4], 0.5, 300, 0);
    let valid = mock_store(&[4], 0.5, 200, 10_000);
    let cfg = TrainConfig {
        model_kind: ModelKind::Mlp,
        hidden_width: 8,
        epochs: 3,
        ..Default::default()
    };
    let one = sweep_layers(&train, &valid, None, &cfg, &SweepOptions::default()).unwrap();
    let many = sweep_layers(
        &train,
        &valid,
        None,
        &cfg,
        &SweepOptions {
            threads: 4,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(one.report, many.report);
}

#[test]
fn empty_layer_list_is_an_error() {
    let train = mock_store(&[4], 0.5, 20, 0);
    let mut empty = train.clone();
    empty.header.layers.clear();
    assert!(sweep_layers(
        &empty,
        &empty,
        None,
        &TrainConfig::default(),
        &SweepOptions::default()
    )
    .is_err());
}

#[test]
fn saved_model_predicts_like_the_original() {
    let train = mock_store(&[5], 1.0, 400, 0);
    let m = kgprobe::probe::train(&train, 5, &TrainConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.bin");
    m.save(&p).unwrap();
    let back = ProbeModel::load(&p).unwrap();
    assert_eq!(
        back.predict_store(&train).unwrap(),
        m.predict_store(&train).unwrap()
    );
}

fn linear(params: Vec<f64>, classes: usize, dim: usize) -> ProbeModel {
    ProbeModel {
        kind: ModelKind::Logreg,
        layer: 1,
        dim,
        num_classes: classes,
        hidden_width: 0,
        standardizer: Standardizer::identity(dim),
        params,
        config: TrainConfig::default(),
    }
}

proptest! {
    #[test]
    fn shifting_all_logits_keeps_the_label(
        w in prop::collection::vec(-3.0f64..3.0, 12),
        b in prop::collection::vec(-3.0f64..3.0, 4),
        x in prop::collection::vec(-5.0f32..5.0, 3),
        shift in -50.0f64..50.0,
    ) {
        let mut params = w.clone();
        params.extend(&b);
        let m = linear(params, 4, 3);
        let mut shifted_params = w;
        shifted_params.extend(b.iter().map(|v| v + shift));
        let shifted = linear(shifted_params, 4, 3);
        prop_assert_eq!(m.predict(&x).unwrap(), shifted.predict(&x).unwrap());
        let p = m.predict_proba(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn binary_probabilities_are_open_interval(
        w in prop::collection::vec(-2.0f64..2.0, 3),
        b in -2.0f64..2.0,
        x in prop::collection::vec(-5.0f32..5.0, 3),
    ) {
        let mut params = w;
        params.push(b);
        let p = linear(params, 2, 3).predict_proba(&x).unwrap();
        prop_assert!(p[1] > 0.0 && p[1] < 1.0);
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }
}
