//! Filtered negative sampling and balanced subsampling.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, LabeledTriple, Split, Triple};

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("no filtered corruption of triple ({head}, {relation}, {tail}) found after {attempts} attempts")]
    Exhausted {
        head: u32,
        relation: u32,
        tail: u32,
        attempts: u32,
    },
    #[error("requested {requested} pairs but the {split} split has only {available} positives")]
    TooManyPairs {
        requested: usize,
        available: usize,
        split: Split,
    },
    #[error("subsample size {k} exceeds {available} available examples")]
    TooLarge { k: usize, available: usize },
    #[error("balanced subsample size must be even, got {0}")]
    OddBalanced(usize),
    #[error("balanced subsample needs {needed} examples of class {class}, found {found}")]
    ClassShortfall {
        class: i32,
        needed: usize,
        found: usize,
    },
    #[error("graph has fewer than two entities")]
    TooFewEntities,
    #[error("invalid sampler config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub seed: u64,
    pub head_corrupt_prob: f64,
    pub max_resample_attempts: u32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            seed: 0,
            head_corrupt_prob: 0.5,
            max_resample_attempts: 100,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if !(0.0..=1.0).contains(&self.head_corrupt_prob) {
            return Err(SampleError::Config(format!(
                "head_corrupt_prob {} outside [0, 1]",
                self.head_corrupt_prob
            )));
        }
        if self.max_resample_attempts == 0 {
            return Err(SampleError::Config(
                "max_resample_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
///
/// Used to give parallel workers and per-layer trainings independent streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Replaces the head or the tail of `triple` with a uniformly drawn entity,
/// resampling until the result is absent from every split of `g`.
pub fn corrupt_triple<R: Rng + ?Sized>(
    g: &KnowledgeGraph,
    triple: &Triple,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Triple, SampleError> {
    let n = g.num_entities() as u32;
    if n < 2 {
        return Err(SampleError::TooFewEntities);
    }
    for _ in 0..cfg.max_resample_attempts {
        let replacement = EntityId(rng.random_range(0..n));
        let mut cand = *triple;
        if rng.random_bool(cfg.head_corrupt_prob) {
            cand.head = replacement;
        } else {
            cand.tail = replacement;
        }
        if cand != *triple && !g.contains(&cand) {
            return Ok(cand);
        }
    }
    Err(SampleError::Exhausted {
        head: triple.head.0,
        relation: triple.relation.0,
        tail: triple.tail.0,
        attempts: cfg.max_resample_attempts,
    })
}

/// Draws `n_pairs` training positives without replacement and pairs each
/// with one filtered corruption. Output alternates positive, negative.
pub fn build_balanced_set(
    g: &KnowledgeGraph,
    n_pairs: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<LabeledTriple>, SampleError> {
    build_balanced_set_from(g, Split::Train, n_pairs, cfg)
}

/// As [`build_balanced_set`], drawing positives from any split.
pub fn build_balanced_set_from(
    g: &KnowledgeGraph,
    split: Split,
    n_pairs: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<LabeledTriple>, SampleError> {
    cfg.validate()?;
    let positives = g.positives(split);
    if n_pairs > positives.len() {
        return Err(SampleError::TooManyPairs {
            requested: n_pairs,
            available: positives.len(),
            split,
        });
    }
    let mut rng = cfg.rng();
    let chosen = index::sample(&mut rng, positives.len(), n_pairs);
    let mut out = Vec::with_capacity(2 * n_pairs);
    for i in chosen.iter() {
        let pos = positives[i];
        let neg = corrupt_triple(g, &pos, cfg, &mut rng)?;
        out.push(LabeledTriple::positive(pos));
        out.push(LabeledTriple::negative(neg));
    }
    Ok(out)
}

/// Positive triples of a split labeled by their relation id, for relation
/// prediction. `n = None` keeps the whole split in file order.
pub fn build_relation_set(
    g: &KnowledgeGraph,
    split: Split,
    n: Option<usize>,
    seed: u64,
) -> Result<Vec<LabeledTriple>, SampleError> {
    let positives = g.positives(split);
    let relabel = |t: Triple| LabeledTriple {
        triple: t,
        label: t.relation.0 as i32,
    };
    match n {
        None => Ok(positives.into_iter().map(relabel).collect()),
        Some(k) if k > positives.len() => Err(SampleError::TooManyPairs {
            requested: k,
            available: positives.len(),
            split,
        }),
        Some(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(index::sample(&mut rng, positives.len(), k)
                .iter()
                .map(|i| relabel(positives[i]))
                .collect())
        }
    }
}

/// Anything carrying a class label.
pub trait Labeled {
    fn class(&self) -> i32;
}

impl Labeled for LabeledTriple {
    fn class(&self) -> i32 {
        self.label
    }
}

impl Labeled for i32 {
    fn class(&self) -> i32 {
        *self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubsampleMode {
    Uniform,
    /// Binary sets: exactly k/2 examples of class 1 and of class 0.
    Balanced,
}

/// Indices of a uniform sample without replacement, in random order.
pub fn subsample_indices<T: Labeled>(
    examples: &[T],
    k: usize,
    seed: u64,
    mode: SubsampleMode,
) -> Result<Vec<usize>, SampleError> {
    if k > examples.len() {
        return Err(SampleError::TooLarge {
            k,
            available: examples.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SubsampleMode::Uniform => Ok(index::sample(&mut rng, examples.len(), k).into_vec()),
        SubsampleMode::Balanced => {
            if !k.is_multiple_of(2) {
                return Err(SampleError::OddBalanced(k));
            }
            let half = k / 2;
            let mut out = Vec::with_capacity(k);
            for class in [1, 0] {
                let members: Vec<usize> = examples
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.class() == class)
                    .map(|(i, _)| i)
                    .collect();
                if members.len() < half {
                    return Err(SampleError::ClassShortfall {
                        class,
                        needed: half,
                        found: members.len(),
                    });
                }
                out.extend(
                    index::sample(&mut rng, members.len(), half)
                        .iter()
                        .map(|j| members[j]),
                );
            }
            out.shuffle(&mut rng);
            Ok(out)
        }
    }
}

pub fn subsample<T: Labeled + Clone>(
    examples: &[T],
    k: usize,
    seed: u64,
    mode: SubsampleMode,
) -> Result<Vec<T>, SampleError> {
    Ok(subsample_indices(examples, k, seed, mode)?
        .into_iter()
        .map(|i| examples[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{RelationId, Vocab};
    use std::collections::HashSet;

    fn random_graph(n_triples: usize, n_entities: u32, seed: u64) -> KnowledgeGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vocab::default();
        for e in 0..n_entities {
            v.entity(&format!("e{e}"));
        }
        v.relation("r0");
        v.relation("r1");
        let mut train = Vec::new();
        let mut test = Vec::new();
        for i in 0..n_triples {
            let t = Triple::new(
                EntityId(rng.random_range(0..n_entities)),
                RelationId(rng.random_range(0..2)),
                EntityId(rng.random_range(0..n_entities)),
            );
            if i % 5 == 0 {
                test.push(LabeledTriple::positive(t));
            } else {
                train.push(LabeledTriple::positive(t));
            }
        }
        KnowledgeGraph::from_parts(v, train, vec![], test)
    }

    #[test]
    fn saturated_graph_errors() {
        let mut v = Vocab::default();
        let names = ["a", "b", "c"];
        let mut train = Vec::new();
        for h in names {
            for t in names {
                train.push(LabeledTriple::positive(v.triple(h, "r", t)));
            }
        }
        let g = KnowledgeGraph::from_parts(v, train, vec![], vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = g.train()[4].triple;
        let err = corrupt_triple(&g, &t, &SamplerConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, SampleError::Exhausted { attempts: 100, .. }));
    }

    #[test]
    fn corruption_is_deterministic() {
        let g = random_graph(100, 30, 2);
        let t = g.train()[3].triple;
        let cfg = SamplerConfig::default();
        let a = corrupt_triple(&g, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = corrupt_triple(&g, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corruptions_are_filtered_single_slot() {
        let g = random_graph(100, 25, 5);
        let all: Vec<Triple> = [Split::Train, Split::Valid, Split::Test]
            .iter()
            .flat_map(|&s| g.split(s).iter().map(|lt| lt.triple))
            .collect();
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..1000 {
            let src = g.train()[i % g.train().len()].triple;
            let neg = corrupt_triple(&g, &src, &cfg, &mut rng).unwrap();
            assert!(!all.contains(&neg));
            assert_eq!(neg.relation, src.relation);
            let diffs = (neg.head != src.head) as u8 + (neg.tail != src.tail) as u8;
            assert_eq!(diffs, 1);
        }
    }

    #[test]
    fn head_only_and_tail_only() {
        let g = random_graph(60, 40, 8);
        let src = g.train()[0].triple;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = SamplerConfig {
            head_corrupt_prob: 1.0,
            ..Default::default()
        };
        let tails = SamplerConfig {
            head_corrupt_prob: 0.0,
            ..Default::default()
        };
        for _ in 0..50 {
            assert_eq!(
                corrupt_triple(&g, &src, &heads, &mut rng).unwrap().tail,
                src.tail
            );
            assert_eq!(
                corrupt_triple(&g, &src, &tails, &mut rng).unwrap().head,
                src.head
            );
        }
    }

    #[test]
    fn balanced_set_interleaves() {
        let g = random_graph(200, 50, 4);
        let set = build_balanced_set(&g, 40, &SamplerConfig::default()).unwrap();
        assert_eq!(set.len(), 80);
        for (i, lt) in set.iter().enumerate() {
            assert_eq!(lt.label, if i % 2 == 0 { 1 } else { 0 });
        }
        let positives: HashSet<Triple> = set.iter().step_by(2).map(|lt| lt.triple).collect();
        assert_eq!(positives.len(), 40.min(positives.len()));
        assert!(build_balanced_set(&g, 0, &SamplerConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn balanced_set_rejects_oversized_request() {
        let g = random_graph(20, 50, 4);
        let n = g.positives(Split::Train).len();
        let err = build_balanced_set(&g, n + 1, &SamplerConfig::default()).unwrap_err();
        assert!(matches!(err, SampleError::TooManyPairs { .. }));
    }

    #[test]
    fn config_validation() {
        let bad = SamplerConfig {
            head_corrupt_prob: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig {
            max_resample_attempts: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn subsample_full_is_permutation() {
        let labels: Vec<i32> = (0..50).map(|i| i % 2).collect();
        let mut idx = subsample_indices(&labels, 50, 4, SubsampleMode::Balanced).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_balanced_counts() {
        let labels: Vec<i32> = (0..2000).map(|i| i % 2).collect();
        for seed in 0..20 {
            let s = subsample(&labels, 400, seed, SubsampleMode::Balanced).unwrap();
            assert_eq!(s.iter().filter(|&&l| l == 1).count(), 200);
            assert_eq!(s.iter().filter(|&&l| l == 0).count(), 200);
        }
        assert_eq!(
            subsample(&labels, 401, 0, SubsampleMode::Balanced).unwrap_err(),
            SampleError::OddBalanced(401)
        );
        assert!(subsample(&labels, 2001, 0, SubsampleMode::Uniform).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: HashSet<u64> = (0..100).map(|w| derive_seed(42, w)).collect();
        assert_eq!(s.len(), 100);
    }
}
