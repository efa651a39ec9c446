//! Metrics, projections and report artifacts.

pub mod pca;
pub mod report;

use thiserror::Error;

pub use pca::{pca_project, PcaResult};
pub use report::{
    peak_memory, write_layers_csv, write_pca_csv, write_sizes_csv, EvalReport, MemoryStat,
    SizePoint, StageTimer, StageTiming,
};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no examples to score")]
    Empty,
    #[error("class {class} outside the {classes}-class label space")]
    UnknownClass { class: i32, classes: usize },
    #[error("cannot project onto {k} components with {n} points in {d} dimensions")]
    TooManyComponents { k: usize, n: usize, d: usize },
}

/// Fraction of positions where `predictions` and `labels` agree.
pub fn accuracy(predictions: &[i32], labels: &[i32]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Share of queries whose top-ranked class is the gold class. With one gold
/// label per query this is plain accuracy over class ids in `0..num_classes`.
pub fn hits_at_1(predicted: &[i32], gold: &[i32], num_classes: usize) -> Result<f64, EvalError> {
    if let Some(&class) = predicted
        .iter()
        .chain(gold)
        .find(|&&c| c < 0 || c as usize >= num_classes)
    {
        return Err(EvalError::UnknownClass {
            class,
            classes: num_classes,
        });
    }
    accuracy(predicted, gold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn direct_counts() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]), Ok(1.0));
        assert_eq!(accuracy(&[1, 0, 0, 0], &[1, 0, 1, 0]), Ok(0.75));
        assert_eq!(
            accuracy(&[1], &[1, 0]),
            Err(EvalError::LengthMismatch {
                predictions: 1,
                labels: 2
            })
        );
        assert_eq!(accuracy(&[], &[]), Err(EvalError::Empty));
    }

    #[test]
    fn hits_checks_label_space() {
        assert_eq!(hits_at_1(&[0, 36], &[0, 36], 37), Ok(1.0));
        assert!(matches!(
            hits_at_1(&[37], &[0], 37),
            Err(EvalError::UnknownClass { class: 37, .. })
        ));
        assert!(hits_at_1(&[0], &[-1], 37).is_err());
    }

    proptest! {
        #[test]
        fn matches_loop_and_hits(pairs in prop::collection::vec((0i32..5, 0i32..5), 1..300)) {
            let (p, l): (Vec<i32>, Vec<i32>) = pairs.into_iter().unzip();
            let mut same = 0usize;
            for i in 0..p.len() {
                if p[i] == l[i] {
                    same += 1;
                }
            }
            let acc = accuracy(&p, &l).unwrap();
            prop_assert_eq!(acc, same as f64 / p.len() as f64);
            prop_assert_eq!(hits_at_1(&p, &l, 5).unwrap(), acc);
        }
    }
}
