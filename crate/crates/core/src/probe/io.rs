//! Model files: `KGPM`, a u32 version, a u32 header length, a JSON header,
//! then the parameters as little-endian f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelKind, ProbeError, ProbeModel, Standardizer, TrainConfig};

pub const MODEL_MAGIC: &[u8; 4] = b"KGPM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    kind: ModelKind,
    layer: usize,
    dim: usize,
    num_classes: usize,
    hidden_width: usize,
    param_count: usize,
    standardizer: Standardizer,
    config: TrainConfig,
}

impl ProbeModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ModelHeader {
            kind: self.kind,
            layer: self.layer,
            dim: self.dim,
            num_classes: self.num_classes,
            hidden_width: self.hidden_width,
            param_count: self.params.len(),
            standardizer: self.standardizer.clone(),
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header).expect("model header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.params.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProbeError> {
        let bad = |m: String| ProbeError::Format(m);
        if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
            return Err(bad("not a probe model file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let h: ModelHeader =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[12 + hlen..];
        if payload.len() != 4 * h.param_count {
            return Err(bad(format!(
                "expected {} parameters, payload holds {} bytes",
                h.param_count,
                payload.len()
            )));
        }
        let model = ProbeModel {
            kind: h.kind,
            layer: h.layer,
            dim: h.dim,
            num_classes: h.num_classes,
            hidden_width: h.hidden_width,
            standardizer: h.standardizer,
            params: payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            config: h.config,
        };
        if model.architecture().param_count() != model.params.len()
            || model.standardizer.mean.len() != model.dim
            || model.standardizer.std.len() != model.dim
        {
            return Err(bad("header does not match the parameter layout".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProbeError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| ProbeError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProbeError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ProbeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
