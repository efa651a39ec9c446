//! Random knowledge graphs for tests, demos and mock experiments.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KnowledgeGraph, LabeledTriple, RelationId, Triple, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticGraphConfig {
    pub entities: u32,
    pub relations: u32,
    /// Distinct positive triples across all splits.
    pub triples: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticGraphConfig {
    fn default() -> Self {
        SyntheticGraphConfig {
            entities: 500,
            relations: 5,
            triples: 4000,
            valid_fraction: 0.2,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Distinct triples with head != tail, shuffled and cut into disjoint
/// train/valid/test splits. Entities are named `entity_<i>` and relations
/// `relation_<r>`.
///
/// # Panics
/// If fewer than `triples` distinct triples exist for the given sizes.
pub fn synthetic_graph(cfg: &SyntheticGraphConfig) -> KnowledgeGraph {
    let (ne, nr) = (cfg.entities, cfg.relations);
    let capacity = ne as u64 * ne.saturating_sub(1) as u64 * nr as u64;
    assert!(
        cfg.triples as u64 <= capacity,
        "{} triples requested but only {capacity} exist",
        cfg.triples
    );
    let mut v = Vocab::default();
    for e in 0..ne {
        v.entity(&format!("entity_{e}"));
    }
    for r in 0..nr {
        v.relation(&format!("relation_{r}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::with_capacity(cfg.triples);
    let mut triples = Vec::with_capacity(cfg.triples);
    while triples.len() < cfg.triples {
        let h = rng.random_range(0..ne);
        let t = rng.random_range(0..ne);
        if h == t {
            continue;
        }
        let tr = Triple::new(
            EntityId(h),
            RelationId(rng.random_range(0..nr)),
            EntityId(t),
        );
        if seen.insert(tr) {
            triples.push(tr);
        }
    }
    triples.shuffle(&mut rng);
    let n = triples.len();
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let n_valid = (n as f64 * cfg.valid_fraction).round() as usize;
    let mut it = triples.into_iter().map(LabeledTriple::positive);
    let test: Vec<_> = it.by_ref().take(n_test).collect();
    let valid: Vec<_> = it.by_ref().take(n_valid).collect();
    let train: Vec<_> = it.collect();
    KnowledgeGraph::from_parts(v, train, valid, test)
}
