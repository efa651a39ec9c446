//! Hidden-state acquisition.
//!
//! An [`ExtractionBackend`] turns prompt texts into last-token hidden states
//! for a set of interior layers `1..=L-1`. Layer `i` is the output of
//! transformer block `i`; the embedding layer 0 is never probed.

pub mod http;
pub mod mock;
pub mod store;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::RenderedPrompt;
pub use http::HttpBackend;
pub use mock::{MockLm, Oracle, SignalShape};
pub use store::{
    read_store, validate_store, write_store, HiddenStateRecord, HiddenStateStore, StoreError,
    StoreHeader, StoreReader, StoreWriter, TaskTag,
};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("layer {layer} outside the interior range 1..={}", num_layers.saturating_sub(1))]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("batch too large")]
    BatchTooLarge,
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("backend failure: {0}")]
    Failed(String),
    #[error("no stored states for example {0}")]
    Missing(u64),
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("{0}")]
    Backend(#[from] BackendError),
    #[error("example {example_id}: {source}")]
    Example {
        example_id: u64,
        #[source]
        source: BackendError,
    },
    #[error("invalid layer request: {0}")]
    Layers(String),
    #[error("{prompts} prompts but {labels} labels")]
    LengthMismatch { prompts: usize, labels: usize },
    #[error("dimension drift at example {example_id}: expected {expected}, got {got}")]
    DimensionDrift {
        example_id: u64,
        expected: usize,
        got: usize,
    },
    #[error("backend returned {got} results for a batch of {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Store(#[from] StoreError),
    #[error("{path}: {message}")]
    Prompts { path: PathBuf, message: String },
}

/// One text to extract, tagged with its example id.
#[derive(Clone, Copy, Debug)]
pub struct ExtractRequest<'a> {
    pub id: u64,
    pub text: &'a str,
}

/// Source of last-token hidden states.
///
/// `extract` returns, for each request in order, one vector per requested
/// layer in order. Implementations must never read the state of a padding
/// position.
pub trait ExtractionBackend: Send + Sync {
    fn extract(
        &self,
        batch: &[ExtractRequest<'_>],
        layers: &[usize],
    ) -> Result<Vec<Vec<Vec<f32>>>, BackendError>;
    /// Hidden size, when known before the first call.
    fn dim(&self) -> Option<usize>;
    /// Total layer count L, when known.
    fn num_layers(&self) -> Option<usize>;
    fn model_name(&self) -> String;
}

/// A line of `prompts.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: u64,
    pub text: String,
    pub label: i32,
}

pub fn write_prompts(path: impl AsRef<Path>, prompts: &[PromptRecord]) -> Result<(), ExtractError> {
    let path = path.as_ref();
    let err = |e: std::io::Error| ExtractError::Prompts {
        path: path.to_owned(),
        message: e.to_string(),
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(err)?);
    for p in prompts {
        serde_json::to_writer(&mut out, p).expect("prompt serializes");
        out.write_all(b"\n").map_err(err)?;
    }
    out.flush().map_err(err)
}

pub fn read_prompts(path: impl AsRef<Path>) -> Result<Vec<PromptRecord>, ExtractError> {
    let path = path.as_ref();
    let err = |message: String| ExtractError::Prompts {
        path: path.to_owned(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ExtractOptions {
    pub batch_size: usize,
    /// Per-text retries after a failed batch.
    pub max_retries: usize,
    pub task: TaskTag,
    pub labels: Vec<String>,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            batch_size: 16,
            max_retries: 2,
            task: TaskTag::TripleClassification,
            labels: StoreHeader::binary_labels(),
        }
    }
}

/// Normalizes and range-checks a layer request.
pub fn check_layers(
    layers: &[usize],
    num_layers: Option<usize>,
) -> Result<Vec<usize>, ExtractError> {
    let mut ls = layers.to_vec();
    ls.sort_unstable();
    ls.dedup();
    if ls.is_empty() {
        return Err(ExtractError::Layers("no layers requested".into()));
    }
    if ls[0] == 0 {
        return Err(ExtractError::Layers(
            "layer 0 is the embedding layer".into(),
        ));
    }
    if let Some(l) = num_layers {
        if let Some(&bad) = ls.iter().find(|&&x| x >= l) {
            return Err(ExtractError::Layers(format!(
                "layer {bad} outside 1..={} for a {l}-layer model",
                l - 1
            )));
        }
    }
    Ok(ls)
}

/// Extracts states for rendered prompts, assigning example ids `0..n`.
pub fn extract_dataset(
    backend: &dyn ExtractionBackend,
    prompts: &[RenderedPrompt],
    labels: &[i32],
    layers: &[usize],
    opts: &ExtractOptions,
) -> Result<HiddenStateStore, ExtractError> {
    if prompts.len() != labels.len() {
        return Err(ExtractError::LengthMismatch {
            prompts: prompts.len(),
            labels: labels.len(),
        });
    }
    let records: Vec<PromptRecord> = prompts
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, &label))| PromptRecord {
            id: i as u64,
            text: p.text.clone(),
            label,
        })
        .collect();
    extract_records(backend, &records, layers, opts)
}

/// Extracts states for `prompts.jsonl` records, keeping their ids and order.
pub fn extract_records(
    backend: &dyn ExtractionBackend,
    prompts: &[PromptRecord],
    layers: &[usize],
    opts: &ExtractOptions,
) -> Result<HiddenStateStore, ExtractError> {
    let layers = check_layers(layers, backend.num_layers())?;
    let batch_size = opts.batch_size.max(1);
    let mut dim = backend.dim();
    let mut rows: Vec<Vec<Vec<f32>>> = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(batch_size) {
        let reqs: Vec<ExtractRequest<'_>> = chunk
            .iter()
            .map(|p| ExtractRequest {
                id: p.id,
                text: &p.text,
            })
            .collect();
        let out = match backend.extract(&reqs, &layers) {
            Ok(out) if out.len() == reqs.len() => out,
            Ok(out) => {
                return Err(ExtractError::ShapeMismatch {
                    expected: reqs.len(),
                    got: out.len(),
                })
            }
            Err(BackendError::LayerOutOfRange { layer, num_layers }) => {
                return Err(BackendError::LayerOutOfRange { layer, num_layers }.into())
            }
            Err(batch_err) => {
                log::warn!("batch failed ({batch_err}); retrying one text at a time");
                let mut out = Vec::with_capacity(reqs.len());
                for req in &reqs {
                    out.push(extract_single(backend, req, &layers, opts.max_retries)?);
                }
                out
            }
        };
        for (req, per_layer) in reqs.iter().zip(out) {
            if per_layer.len() != layers.len() {
                return Err(ExtractError::Example {
                    example_id: req.id,
                    source: BackendError::Failed(format!(
                        "{} layers returned, {} requested",
                        per_layer.len(),
                        layers.len()
                    )),
                });
            }
            for v in &per_layer {
                let expected = *dim.get_or_insert(v.len());
                if v.len() != expected {
                    return Err(ExtractError::DimensionDrift {
                        example_id: req.id,
                        expected,
                        got: v.len(),
                    });
                }
            }
            rows.push(per_layer);
        }
    }
    let header = StoreHeader::new(
        backend.model_name(),
        dim.unwrap_or(1),
        layers,
        opts.task,
        opts.labels.clone(),
    );
    let mut store = HiddenStateStore::new(header);
    for (p, per_layer) in prompts.iter().zip(rows) {
        store.push(HiddenStateRecord {
            example_id: p.id,
            label: p.label,
            states: per_layer.concat(),
        })?;
    }
    Ok(store)
}

fn extract_single(
    backend: &dyn ExtractionBackend,
    req: &ExtractRequest<'_>,
    layers: &[usize],
    retries: usize,
) -> Result<Vec<Vec<f32>>, ExtractError> {
    let mut last = None;
    for _ in 0..=retries {
        match backend.extract(std::slice::from_ref(req), layers) {
            Ok(mut out) if out.len() == 1 => return Ok(out.pop().unwrap()),
            Ok(out) => {
                last = Some(BackendError::Failed(format!(
                    "{} results for one text",
                    out.len()
                )))
            }
            Err(e) => last = Some(e),
        }
    }
    Err(ExtractError::Example {
        example_id: req.id,
        source: last.unwrap(),
    })
}

/// Serves states from a store dumped ahead of time, matched by example id.
pub struct StoreBackend {
    store: HiddenStateStore,
    by_id: HashMap<u64, usize>,
}

impl StoreBackend {
    pub fn new(store: HiddenStateStore) -> Self {
        let by_id = store
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.example_id, i))
            .collect();
        StoreBackend { store, by_id }
    }

    pub fn header(&self) -> &StoreHeader {
        &self.store.header
    }
}

impl ExtractionBackend for StoreBackend {
    fn extract(
        &self,
        batch: &[ExtractRequest<'_>],
        layers: &[usize],
    ) -> Result<Vec<Vec<Vec<f32>>>, BackendError> {
        let h = &self.store.header;
        let positions: Vec<usize> = layers
            .iter()
            .map(|&l| {
                h.layer_position(l)
                    .ok_or_else(|| BackendError::BadRequest(format!("layer {l} not in store")))
            })
            .collect::<Result<_, _>>()?;
        batch
            .iter()
            .map(|req| {
                let idx = *self
                    .by_id
                    .get(&req.id)
                    .ok_or(BackendError::Missing(req.id))?;
                let rec = &self.store.records[idx];
                Ok(positions
                    .iter()
                    .map(|&p| rec.layer_at(p, h.dim).to_vec())
                    .collect())
            })
            .collect()
    }

    fn dim(&self) -> Option<usize> {
        Some(self.store.header.dim)
    }

    fn num_layers(&self) -> Option<usize> {
        None
    }

    fn model_name(&self) -> String {
        self.store.header.model.clone()
    }
}
