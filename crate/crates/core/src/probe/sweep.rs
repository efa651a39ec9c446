use std::thread;

use serde::{Deserialize, Serialize};

use super::{train, ProbeError, ProbeModel, TrainConfig};
use crate::eval::accuracy;
use crate::extraction::HiddenStateStore;
use crate::sampling::derive_seed;

pub const SELECTION_RULE: &str = "argmax validation accuracy, ties to the lowest layer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer: usize,
    pub valid_accuracy: f64,
    /// Never used for selection.
    pub test_accuracy: Option<f64>,
    pub checksum: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepReport {
    pub entries: Vec<LayerResult>,
    pub selected_layer: usize,
    pub rule: String,
}

impl LayerSweepReport {
    pub fn selected(&self) -> &LayerResult {
        self.entries
            .iter()
            .find(|e| e.layer == self.selected_layer)
            .expect("selected layer is among the entries")
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Layers to sweep; empty means every layer in the training store.
    pub layers: Vec<usize>,
    /// Worker threads (0 or 1 runs sequentially).
    pub threads: usize,
    /// Score the test store at every layer instead of only the selected one.
    pub test_all_layers: bool,
}

pub struct SweepOutcome {
    pub report: LayerSweepReport,
    pub models: Vec<ProbeModel>,
}

impl SweepOutcome {
    pub fn selected_model(&self) -> &ProbeModel {
        self.models
            .iter()
            .find(|m| m.layer == self.report.selected_layer)
            .unwrap()
    }
}

fn check_compatible(
    a: &HiddenStateStore,
    b: &HiddenStateStore,
    what: &str,
) -> Result<(), ProbeError> {
    let (ha, hb) = (&a.header, &b.header);
    if ha.dim != hb.dim || ha.layers != hb.layers || ha.labels != hb.labels {
        return Err(ProbeError::StoreMismatch(format!(
            "{what} store differs from the training store in dim, layers or labels"
        )));
    }
    Ok(())
}

/// Picks the best layer; `scores` are (layer, validation accuracy) pairs.
pub fn select_layer(scores: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(layer, acc) in scores {
        best = match best {
            None => Some((layer, acc)),
            Some((bl, ba)) if acc > ba || (acc == ba && layer < bl) => Some((layer, acc)),
            keep => keep,
        };
    }
    best.map(|(l, _)| l)
}

/// Accuracy of `model` over every record of `store`.
pub fn store_accuracy(model: &ProbeModel, store: &HiddenStateStore) -> Result<f64, ProbeError> {
    let pred = model.predict_store(store)?;
    accuracy(&pred, &store.labels()).map_err(|_| ProbeError::Empty)
}

fn score_layer(
    train_store: &HiddenStateStore,
    valid: &HiddenStateStore,
    layer: usize,
    cfg: &TrainConfig,
) -> Result<(ProbeModel, LayerResult), ProbeError> {
    let seed = derive_seed(cfg.seed, layer as u64);
    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let model = train(train_store, layer, &cfg)?;
    let valid_accuracy = store_accuracy(&model, valid)?;
    let result = LayerResult {
        layer,
        valid_accuracy,
        test_accuracy: None,
        checksum: model.checksum(),
        seed,
    };
    Ok((model, result))
}

/// Trains one probe per layer and selects a layer by validation accuracy.
///
/// Each layer's probe is seeded with `derive_seed(cfg.seed, layer)`, so the
/// result does not depend on the thread count or the order of `layers`.
pub fn sweep_layers(
    train_store: &HiddenStateStore,
    valid: &HiddenStateStore,
    test: Option<&HiddenStateStore>,
    cfg: &TrainConfig,
    opts: &SweepOptions,
) -> Result<SweepOutcome, ProbeError> {
    check_compatible(train_store, valid, "validation")?;
    if let Some(t) = test {
        check_compatible(train_store, t, "test")?;
    }
    let mut layers = if opts.layers.is_empty() {
        train_store.header.layers.clone()
    } else {
        opts.layers.clone()
    };
    layers.sort_unstable();
    layers.dedup();
    if layers.is_empty() {
        return Err(ProbeError::NoLayers);
    }

    let results: Vec<Result<(ProbeModel, LayerResult), ProbeError>> = if opts.threads <= 1 {
        layers
            .iter()
            .map(|&l| score_layer(train_store, valid, l, cfg))
            .collect()
    } else {
        let chunk = layers.len().div_ceil(opts.threads);
        thread::scope(|s| {
            let handles: Vec<_> = layers
                .chunks(chunk)
                .map(|ls| {
                    s.spawn(move || {
                        ls.iter()
                            .map(|&l| score_layer(train_store, valid, l, cfg))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    };

    let mut models = Vec::with_capacity(layers.len());
    let mut entries = Vec::with_capacity(layers.len());
    for r in results {
        let (m, e) = r?;
        log::debug!("layer {}: valid {:.4}", e.layer, e.valid_accuracy);
        models.push(m);
        entries.push(e);
    }
    let scores: Vec<(usize, f64)> = entries
        .iter()
        .map(|e| (e.layer, e.valid_accuracy))
        .collect();
    let selected_layer = select_layer(&scores).unwrap();
    if let Some(t) = test {
        for (m, e) in models.iter().zip(entries.iter_mut()) {
            if opts.test_all_layers || e.layer == selected_layer {
                e.test_accuracy = Some(store_accuracy(m, t)?);
            }
        }
    }
    Ok(SweepOutcome {
        report: LayerSweepReport {
            entries,
            selected_layer,
            rule: SELECTION_RULE.into(),
        },
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_low() {
        assert_eq!(select_layer(&[(3, 0.9), (1, 0.9), (2, 0.5)]), Some(1));
        assert_eq!(select_layer(&[(1, 0.5), (2, 0.7), (5, 0.7)]), Some(2));
        assert_eq!(select_layer(&[]), None);
    }
}
