//! Client for the `/v1/hidden_states` protocol.
//!
//! Request: `{"texts": [..], "layers": [..], "last_token_only": true}`.
//! Response: `{"model": .., "dim": d, "layers": [..], "states": [[[..d], ..], ..]}`
//! with one array per text and, inside it, one d-vector per layer.
//! Status 400 is a malformed request, 413 a batch that is too large (the
//! client halves it and retries), 500 a backend failure.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, ExtractRequest, ExtractionBackend};

pub const ENDPOINT: &str = "/v1/hidden_states";

#[derive(Debug, Serialize, Deserialize)]
pub struct HiddenStatesRequest {
    pub texts: Vec<String>,
    pub layers: Vec<usize>,
    pub last_token_only: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HiddenStatesResponse {
    pub model: String,
    pub dim: usize,
    pub layers: Vec<usize>,
    pub states: Vec<Vec<Vec<f32>>>,
}

pub struct HttpBackend {
    url: String,
    agent: ureq::Agent,
    num_layers: Option<usize>,
    model: Mutex<Option<String>>,
    dim: Mutex<Option<usize>>,
}

impl HttpBackend {
    /// `base_url` is the server root, e.g. `http://127.0.0.1:8000`.
    pub fn new(base_url: &str, num_layers: Option<usize>) -> Self {
        HttpBackend {
            url: format!("{}{ENDPOINT}", base_url.trim_end_matches('/')),
            agent: ureq::Agent::new_with_defaults(),
            num_layers,
            model: Mutex::new(None),
            dim: Mutex::new(None),
        }
    }

    fn post(&self, texts: &[&str], layers: &[usize]) -> Result<HiddenStatesResponse, BackendError> {
        let req = HiddenStatesRequest {
            texts: texts.iter().map(|t| t.to_string()).collect(),
            layers: layers.to_vec(),
            last_token_only: true,
        };
        let resp = self.agent.post(&self.url).send_json(&req);
        let mut resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(400)) => {
                return Err(BackendError::BadRequest(
                    "server rejected request (400)".into(),
                ))
            }
            Err(ureq::Error::StatusCode(413)) => return Err(BackendError::BatchTooLarge),
            Err(ureq::Error::StatusCode(code)) => {
                return Err(BackendError::Failed(format!("server returned {code}")))
            }
            Err(e) => return Err(BackendError::Failed(e.to_string())),
        };
        let body: HiddenStatesResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Failed(format!("bad response body: {e}")))?;
        if body.layers != layers {
            return Err(BackendError::Failed(format!(
                "response layers {:?} differ from requested {:?}",
                body.layers, layers
            )));
        }
        if body.states.len() != texts.len() {
            return Err(BackendError::Failed(format!(
                "{} states for {} texts",
                body.states.len(),
                texts.len()
            )));
        }
        for per_text in &body.states {
            if per_text.len() != layers.len() || per_text.iter().any(|v| v.len() != body.dim) {
                return Err(BackendError::Failed(
                    "response states have the wrong shape".into(),
                ));
            }
        }
        *self.model.lock().unwrap() = Some(body.model.clone());
        *self.dim.lock().unwrap() = Some(body.dim);
        Ok(body)
    }

    fn extract_texts(
        &self,
        texts: &[&str],
        layers: &[usize],
    ) -> Result<Vec<Vec<Vec<f32>>>, BackendError> {
        match self.post(texts, layers) {
            Ok(r) => Ok(r.states),
            Err(BackendError::BatchTooLarge) if texts.len() > 1 => {
                let (a, b) = texts.split_at(texts.len() / 2);
                let mut out = self.extract_texts(a, layers)?;
                out.extend(self.extract_texts(b, layers)?);
                Ok(out)
            }
            Err(e) => Err(e),
        }
    }
}

impl ExtractionBackend for HttpBackend {
    fn extract(
        &self,
        batch: &[ExtractRequest<'_>],
        layers: &[usize],
    ) -> Result<Vec<Vec<Vec<f32>>>, BackendError> {
        if let Some(l) = self.num_layers {
            if let Some(&bad) = layers.iter().find(|&&x| x == 0 || x >= l) {
                return Err(BackendError::LayerOutOfRange {
                    layer: bad,
                    num_layers: l,
                });
            }
        }
        let texts: Vec<&str> = batch.iter().map(|r| r.text).collect();
        self.extract_texts(&texts, layers)
    }

    fn dim(&self) -> Option<usize> {
        *self.dim.lock().unwrap()
    }

    fn num_layers(&self) -> Option<usize> {
        self.num_layers
    }

    fn model_name(&self) -> String {
        self.model
            .lock()
            .unwrap()
            .clone()
            .unwrap_or_else(|| "http".into())
    }
}
