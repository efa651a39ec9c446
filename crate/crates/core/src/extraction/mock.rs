//! A deterministic stand-in for a frozen language model.
//!
//! Every (text, layer) gets a pseudorandom base vector with entries drawn
//! from N(0, 1/d), so its expected squared norm is 1. At planted layers the
//! vector is shifted by `margin` along a class direction chosen by an oracle
//! over the text. Everything is a pure function of the seed, text and layer.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{BackendError, ExtractRequest, ExtractionBackend};

/// Maps a text to its class.
pub type Oracle = Arc<dyn Fn(&str) -> i32 + Send + Sync>;

/// How class membership shifts the planted layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalShape {
    /// Class 1 shifts by +margin along one direction, class 0 by -margin.
    Binary,
    /// Class c shifts by +margin along its own direction.
    MultiClass(usize),
}

#[derive(Clone)]
pub struct MockLm {
    seed: u64,
    dim: usize,
    num_layers: usize,
    planted: BTreeSet<usize>,
    margin: f64,
    shape: SignalShape,
    directions: Vec<Vec<f64>>,
    oracle: Oracle,
}

impl fmt::Debug for MockLm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockLm")
            .field("seed", &self.seed)
            .field("dim", &self.dim)
            .field("num_layers", &self.num_layers)
            .field("planted", &self.planted)
            .field("margin", &self.margin)
            .field("shape", &self.shape)
            .finish()
    }
}

fn hashed_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl MockLm {
    pub fn new(
        seed: u64,
        dim: usize,
        num_layers: usize,
        planted: impl IntoIterator<Item = usize>,
        margin: f64,
        shape: SignalShape,
        oracle: Oracle,
    ) -> Self {
        let n_dirs = match shape {
            SignalShape::Binary => 1,
            SignalShape::MultiClass(c) => c,
        };
        let directions = (0..n_dirs)
            .map(|c| {
                let mut rng =
                    hashed_rng(&[b"direction", &seed.to_le_bytes(), &(c as u64).to_le_bytes()]);
                let v = gaussian(&mut rng, dim);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        MockLm {
            seed,
            dim,
            num_layers,
            planted: planted.into_iter().collect(),
            margin,
            shape,
            directions,
            oracle,
        }
    }

    /// Binary mock whose oracle reads labels from a text → label table;
    /// unknown texts count as class 0.
    pub fn with_lookup(
        seed: u64,
        dim: usize,
        num_layers: usize,
        planted: impl IntoIterator<Item = usize>,
        margin: f64,
        shape: SignalShape,
        labels: HashMap<String, i32>,
    ) -> Self {
        let oracle: Oracle = Arc::new(move |t: &str| labels.get(t).copied().unwrap_or(0));
        Self::new(seed, dim, num_layers, planted, margin, shape, oracle)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn planted_layers(&self) -> &BTreeSet<usize> {
        &self.planted
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Unit direction for class `c` (binary mocks have only direction 0).
    pub fn direction(&self, c: usize) -> &[f64] {
        &self.directions[c]
    }

    pub fn class_of(&self, text: &str) -> i32 {
        (self.oracle)(text)
    }

    /// The unshifted vector for (text, layer).
    pub fn base(&self, text: &str, layer: usize) -> Vec<f64> {
        let mut rng = hashed_rng(&[
            b"state",
            &self.seed.to_le_bytes(),
            &(layer as u64).to_le_bytes(),
            text.as_bytes(),
        ]);
        let scale = 1.0 / (self.dim as f64).sqrt();
        gaussian(&mut rng, self.dim)
            .into_iter()
            .map(|x| x * scale)
            .collect()
    }

    fn check_layer(&self, layer: usize) -> Result<(), BackendError> {
        if layer == 0 || layer >= self.num_layers {
            return Err(BackendError::LayerOutOfRange {
                layer,
                num_layers: self.num_layers,
            });
        }
        Ok(())
    }

    /// Hidden state of `text` at `layer`, in f64.
    pub fn mock_extract(&self, text: &str, layer: usize) -> Result<Vec<f64>, BackendError> {
        self.check_layer(layer)?;
        let mut v = self.base(text, layer);
        if self.planted.contains(&layer) {
            let class = self.class_of(text);
            let (dir, sign) = match self.shape {
                SignalShape::Binary => (0, if class == 1 { 1.0 } else { -1.0 }),
                SignalShape::MultiClass(n) => {
                    if class < 0 || class as usize >= n {
                        return Err(BackendError::Failed(format!(
                            "oracle class {class} outside 0..{n}"
                        )));
                    }
                    (class as usize, 1.0)
                }
            };
            for (x, d) in v.iter_mut().zip(&self.directions[dir]) {
                *x += sign * self.margin * d;
            }
        }
        Ok(v)
    }
}

impl ExtractionBackend for MockLm {
    fn extract(
        &self,
        batch: &[ExtractRequest<'_>],
        layers: &[usize],
    ) -> Result<Vec<Vec<Vec<f32>>>, BackendError> {
        batch
            .iter()
            .map(|req| {
                layers
                    .iter()
                    .map(|&l| {
                        Ok(self
                            .mock_extract(req.text, l)?
                            .into_iter()
                            .map(|x| x as f32)
                            .collect())
                    })
                    .collect()
            })
            .collect()
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn num_layers(&self) -> Option<usize> {
        Some(self.num_layers)
    }

    fn model_name(&self) -> String {
        format!(
            "mock(seed={},d={},L={},planted={:?},margin={})",
            self.seed, self.dim, self.num_layers, self.planted, self.margin
        )
    }
}
