//! Probing classifiers over single-layer hidden states.

pub mod io;
pub mod net;
pub mod sweep;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extraction::HiddenStateStore;
pub use net::{Architecture, ModelKind};
pub use sweep::{
    select_layer, store_accuracy, sweep_layers, LayerResult, LayerSweepReport, SweepOptions,
    SweepOutcome,
};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("layer {0} is not in the store")]
    MissingLayer(usize),
    #[error("training data has a single class ({0}); need at least two")]
    SingleClass(i32),
    #[error("training data is empty")]
    Empty,
    #[error("label {label} outside the {classes}-class label space")]
    LabelOutOfRange { label: i32, classes: usize },
    #[error(
        "non-finite loss {loss} at epoch {epoch}, batch {batch} (max |param| = {max_param:e})"
    )]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
        max_param: f64,
    },
    #[error("input has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("store headers disagree: {0}")]
    StoreMismatch(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty layer list")]
    NoLayers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub hidden_width: usize,
    pub seed: u64,
    pub standardize: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model_kind: ModelKind::Logreg,
            batch_size: 64,
            learning_rate: 3e-5,
            epochs: 30,
            weight_decay: 0.0,
            hidden_width: 256,
            seed: 0,
            standardize: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |m: &str| Err(ProbeError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.model_kind == ModelKind::Mlp && self.hidden_width == 0 {
            return bad("hidden_width must be positive for the MLP");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Per-dimension standardization fit on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and standard deviation; zero-variance dimensions get std 1.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            mean.push(m);
            std.push(if s > 1e-12 { s } else { 1.0 });
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &mut DMatrix<f64>) {
        for (j, mut col) in x.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
    }
}

/// A trained probe for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    pub kind: ModelKind,
    pub layer: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub hidden_width: usize,
    pub standardizer: Standardizer,
    pub params: Vec<f64>,
    pub config: TrainConfig,
}

impl ProbeModel {
    pub fn architecture(&self) -> Architecture {
        Architecture::new(self.kind, self.dim, self.num_classes, self.hidden_width)
    }

    fn prepare(&self, rows: &[&[f32]]) -> Result<DMatrix<f64>, ProbeError> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.dim) {
            return Err(ProbeError::DimensionMismatch {
                expected: self.dim,
                got: r.len(),
            });
        }
        let mut x = net::rows_to_matrix(rows, self.dim);
        self.standardizer.apply(&mut x);
        Ok(x)
    }

    fn distributions(&self, scores: &DMatrix<f64>) -> Vec<Vec<f64>> {
        scores
            .row_iter()
            .map(|row| {
                if self.num_classes == 2 {
                    let p = net::sigmoid(row[0]);
                    vec![1.0 - p, p]
                } else {
                    net::softmax(&row.iter().copied().collect::<Vec<_>>())
                }
            })
            .collect()
    }

    /// Class distribution for one input.
    ///
    /// Binary: `[1 - sigmoid(w.x + b), sigmoid(w.x + b)]` on the standardized
    /// input. Multi-class: softmax of the logits. For the SVM these squash
    /// margins and are not calibrated probabilities.
    pub fn predict_proba(&self, x: &[f32]) -> Result<Vec<f64>, ProbeError> {
        Ok(self.predict_proba_batch(&[x])?.pop().unwrap())
    }

    pub fn predict_proba_batch(&self, rows: &[&[f32]]) -> Result<Vec<Vec<f64>>, ProbeError> {
        let x = self.prepare(rows)?;
        Ok(self.distributions(&net::scores(&self.architecture(), &self.params, &x)))
    }

    /// Most probable class; ties go to the lowest class id.
    pub fn predict(&self, x: &[f32]) -> Result<i32, ProbeError> {
        Ok(self.predict_batch(&[x])?[0])
    }

    pub fn predict_batch(&self, rows: &[&[f32]]) -> Result<Vec<i32>, ProbeError> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.prepare(rows)?;
        let s = net::scores(&self.architecture(), &self.params, &x);
        Ok(s.row_iter()
            .map(|row| {
                if self.num_classes == 2 {
                    (row[0] > 0.0) as i32
                } else {
                    argmax(row.iter().copied()) as i32
                }
            })
            .collect())
    }

    /// Predictions for every record of `store` at this model's layer.
    pub fn predict_store(&self, store: &HiddenStateStore) -> Result<Vec<i32>, ProbeError> {
        let (rows, _) = store
            .layer_matrix(self.layer)
            .ok_or(ProbeError::MissingLayer(self.layer))?;
        self.predict_batch(&rows)
    }

    /// Hex SHA-256 of the parameter bits (first 16 hex digits).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Per-epoch training diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean loss over the full training set after each epoch.
    pub epoch_loss: Vec<f64>,
    pub initial_loss: f64,
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let lr = cfg.learning_rate;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * cfg.weight_decay * params[i];
            params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

fn class_indices(labels: &[i32], num_classes: usize) -> Result<Vec<usize>, ProbeError> {
    if labels.is_empty() {
        return Err(ProbeError::Empty);
    }
    let mut seen = vec![false; num_classes];
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        if l < 0 || l as usize >= num_classes {
            return Err(ProbeError::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
        seen[l as usize] = true;
        out.push(l as usize);
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(ProbeError::SingleClass(labels[0]));
    }
    Ok(out)
}

/// Trains a probe on raw rows.
///
/// Mini-batch AdamW on the mean cross-entropy (hinge for the SVM). The
/// shuffle order of every epoch comes from `cfg.seed`, so the result is
/// bitwise reproducible.
pub fn train_rows(
    rows: &[&[f32]],
    labels: &[i32],
    num_classes: usize,
    layer: usize,
    cfg: &TrainConfig,
) -> Result<(ProbeModel, TrainHistory), ProbeError> {
    cfg.validate()?;
    let y = class_indices(labels, num_classes)?;
    let dim = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(ProbeError::DimensionMismatch {
            expected: dim,
            got: r.len(),
        });
    }
    let mut x = net::rows_to_matrix(rows, dim);
    let standardizer = if cfg.standardize {
        Standardizer::fit(&x)
    } else {
        Standardizer::identity(dim)
    };
    standardizer.apply(&mut x);

    let arch = Architecture::new(cfg.model_kind, dim, num_classes, cfg.hidden_width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = arch.init_params(&mut rng);
    let mut grad = vec![0.0; params.len()];
    let mut opt = AdamW::new(params.len());
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut history = TrainHistory {
        initial_loss: net::loss(&arch, &params, &x, &y),
        ..Default::default()
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let loss = net::loss_and_grad(&arch, &params, &xb, &yb, &mut grad);
            if !loss.is_finite() {
                return Err(ProbeError::NonFiniteLoss {
                    loss,
                    epoch,
                    batch: b,
                    max_param: params.iter().fold(0.0f64, |m, p| m.max(p.abs())),
                });
            }
            opt.step(&mut params, &grad, cfg);
        }
        history.epoch_loss.push(net::loss(&arch, &params, &x, &y));
    }

    let model = ProbeModel {
        kind: cfg.model_kind,
        layer,
        dim,
        num_classes,
        hidden_width: if cfg.model_kind == ModelKind::Mlp {
            cfg.hidden_width
        } else {
            0
        },
        standardizer,
        params,
        config: cfg.clone(),
    };
    Ok((model, history))
}

/// Trains a probe on one layer of a store.
pub fn train(
    store: &HiddenStateStore,
    layer: usize,
    cfg: &TrainConfig,
) -> Result<ProbeModel, ProbeError> {
    train_with_history(store, layer, cfg).map(|(m, _)| m)
}

pub fn train_with_history(
    store: &HiddenStateStore,
    layer: usize,
    cfg: &TrainConfig,
) -> Result<(ProbeModel, TrainHistory), ProbeError> {
    let (rows, labels) = store
        .layer_matrix(layer)
        .ok_or(ProbeError::MissingLayer(layer))?;
    if rows.is_empty() {
        return Err(ProbeError::Empty);
    }
    train_rows(&rows, &labels, store.header.num_classes(), layer, cfg)
}

/// Largest relative error between the analytic gradient and central
/// finite differences (step 1e-5) over every parameter, for a random
/// parameter vector and a random batch of four points.
///
/// Relative error is `|a - n| / max(|a|, |n|)`, taken as 0 when both vanish.
pub fn gradient_check(
    kind: ModelKind,
    dim: usize,
    num_classes: usize,
    hidden: usize,
    seed: u64,
) -> f64 {
    const STEP: f64 = 1e-5;
    let arch = Architecture::new(kind, dim, num_classes, hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<f64> = (0..arch.param_count())
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = 4;
    let x = DMatrix::from_fn(n, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    let mut analytic = vec![0.0; params.len()];
    net::loss_and_grad(&arch, &params, &x, &y, &mut analytic);
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + STEP;
        let up = net::loss(&arch, &params, &x, &y);
        params[i] = orig - STEP;
        let down = net::loss(&arch, &params, &x, &y);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let denom = analytic[i].abs().max(numeric.abs());
        let rel = if denom == 0.0 {
            0.0
        } else {
            (analytic[i] - numeric).abs() / denom
        };
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{HiddenStateRecord, StoreHeader, TaskTag};

    fn store_from(rows: &[Vec<f32>], labels: &[i32], classes: usize) -> HiddenStateStore {
        let labels_space = (0..classes).map(|c| c.to_string()).collect();
        let mut s = HiddenStateStore::new(StoreHeader::new(
            "test",
            rows[0].len(),
            vec![1],
            if classes == 2 {
                TaskTag::TripleClassification
            } else {
                TaskTag::RelationPrediction
            },
            labels_space,
        ));
        for (i, (r, &l)) in rows.iter().zip(labels).enumerate() {
            s.push(HiddenStateRecord {
                example_id: i as u64,
                label: l,
                states: r.clone(),
            })
            .unwrap();
        }
        s
    }

    fn logreg(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            model_kind: ModelKind::Logreg,
            learning_rate: lr,
            epochs,
            ..Default::default()
        }
    }

    #[test]
    fn separable_pair() {
        let s = store_from(&[vec![-1.0], vec![1.0]], &[0, 1], 2);
        let m = train(&s, 1, &logreg(3e-5, 30)).unwrap();
        assert!(m.params[0] > 0.0);
        assert_eq!(m.predict_store(&s).unwrap(), vec![0, 1]);
    }

    #[test]
    fn single_class_rejected() {
        let s = store_from(&[vec![-1.0], vec![1.0]], &[1, 1], 2);
        assert!(matches!(
            train(&s, 1, &logreg(1e-3, 1)),
            Err(ProbeError::SingleClass(1))
        ));
        assert!(matches!(
            train(&s, 2, &logreg(1e-3, 1)),
            Err(ProbeError::MissingLayer(2))
        ));
    }

    #[test]
    fn zero_model_gives_half() {
        let m = ProbeModel {
            kind: ModelKind::Logreg,
            layer: 1,
            dim: 3,
            num_classes: 2,
            hidden_width: 0,
            standardizer: Standardizer::identity(3),
            params: vec![0.0; 4],
            config: TrainConfig::default(),
        };
        assert_eq!(m.predict_proba(&[1.0, -2.0, 3.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(
            m.predict_proba(&[1.0]),
            Err(ProbeError::DimensionMismatch {
                expected: 3,
                got: 1
            })
        ));
    }

    #[test]
    fn negated_logits_flip_labels() {
        let mut m = ProbeModel {
            kind: ModelKind::Logreg,
            layer: 1,
            dim: 2,
            num_classes: 2,
            hidden_width: 0,
            standardizer: Standardizer::identity(2),
            params: vec![0.7, -0.3, 0.1],
            config: TrainConfig::default(),
        };
        let xs: Vec<[f32; 2]> = vec![[1.0, 0.0], [-1.0, 0.5], [0.2, 2.0], [3.0, 1.0]];
        let before: Vec<i32> = xs.iter().map(|x| m.predict(x).unwrap()).collect();
        for p in m.params.iter_mut() {
            *p = -*p;
        }
        let after: Vec<i32> = xs.iter().map(|x| m.predict(x).unwrap()).collect();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(*a, 1 - *b);
        }
    }

    #[test]
    fn multiclass_distributions_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dim = 6;
        let classes = 5;
        let params: Vec<f64> = (0..dim * classes + classes)
            .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let m = ProbeModel {
            kind: ModelKind::Logreg,
            layer: 1,
            dim,
            num_classes: classes,
            hidden_width: 0,
            standardizer: Standardizer::identity(dim),
            params,
            config: TrainConfig::default(),
        };
        for _ in 0..1000 {
            let x: Vec<f32> = (0..dim)
                .map(|_| 4.0 * rng.sample::<f32, _>(StandardNormal))
                .collect();
            let p = m.predict_proba(&x).unwrap();
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            let best = argmax(p.iter().copied()) as i32;
            assert_eq!(m.predict(&x).unwrap(), best);
        }
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax([0.2, 0.4, 0.4].into_iter()), 1);
        assert_eq!(argmax([0.5, 0.5].into_iter()), 0);
    }

    #[test]
    fn standardized_training_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = DMatrix::from_fn(300, 5, |_, j| {
            if j == 4 {
                7.0
            } else {
                (j as f64 + 1.0) * 10.0 + (j as f64 + 0.5) * rng.sample::<f64, _>(StandardNormal)
            }
        });
        let s = Standardizer::fit(&x);
        s.apply(&mut x);
        for (j, col) in x.column_iter().enumerate() {
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 300.0).sqrt();
            assert!(m.abs() < 1e-6);
            if j < 4 {
                assert!((sd - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(s.std[4], 1.0);
    }

    #[test]
    fn full_batch_loss_decreases_on_separable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..80 {
            let l = i % 2;
            let shift = if l == 1 { 2.0 } else { -2.0 };
            rows.push(
                (0..4)
                    .map(|_| shift + rng.sample::<f32, _>(StandardNormal) * 0.3)
                    .collect::<Vec<f32>>(),
            );
            labels.push(l);
        }
        let s = store_from(&rows, &labels, 2);
        let cfg = TrainConfig {
            batch_size: 1000,
            ..logreg(1e-2, 100)
        };
        let (_, h) = train_with_history(&s, 1, &cfg).unwrap();
        let mut prev = h.initial_loss;
        for &l in &h.epoch_loss {
            assert!(l <= prev + 1e-9, "{l} > {prev}");
            prev = l;
        }
        assert!(prev < h.initial_loss * 0.5);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f32>> = (0..100)
            .map(|_| {
                (0..8)
                    .map(|_| rng.sample::<f32, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let labels: Vec<i32> = (0..100).map(|i| i % 2).collect();
        let s = store_from(&rows, &labels, 2);
        let cfg = TrainConfig {
            hidden_width: 16,
            epochs: 3,
            ..Default::default()
        };
        let a = train(&s, 1, &cfg).unwrap();
        let b = train(&s, 1, &cfg).unwrap();
        let bits = |m: &ProbeModel| m.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = train(&s, 1, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn gradient_checks() {
        assert!(gradient_check(ModelKind::Logreg, 8, 2, 0, 1) < 1e-4);
        assert!(gradient_check(ModelKind::Logreg, 8, 5, 0, 2) < 1e-4);
        assert!(gradient_check(ModelKind::Mlp, 8, 2, 4, 3) < 1e-3);
        assert!(gradient_check(ModelKind::Mlp, 8, 4, 4, 4) < 1e-3);
    }

    #[test]
    fn svm_trains_on_separable_data() {
        let s = store_from(
            &[
                vec![-1.0, 0.0],
                vec![1.0, 0.1],
                vec![-2.0, 0.3],
                vec![2.0, -0.2],
            ],
            &[0, 1, 0, 1],
            2,
        );
        let cfg = TrainConfig {
            model_kind: ModelKind::Svm,
            learning_rate: 1e-2,
            epochs: 50,
            ..Default::default()
        };
        let m = train(&s, 1, &cfg).unwrap();
        assert_eq!(m.predict_store(&s).unwrap(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
