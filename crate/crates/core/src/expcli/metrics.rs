use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy, binary F1 (positive class 1) and the confusion matrix indexed
/// `[true label][prediction]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: [[usize; 2]; 2],
}

impl Metrics {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// True when every prediction fell into a single class.
    pub fn single_class_predictions(&self) -> bool {
        let col = |p: usize| self.confusion[0][p] + self.confusion[1][p];
        col(0) == 0 || col(1) == 0
    }
}

pub fn metrics(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            format!("{} predictions", labels.len()),
            format!("{}", predictions.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("metrics over an empty set"));
    }
    let mut confusion = [[0usize; 2]; 2];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p > 1 || y > 1 {
            return Err(Error::InvalidLabel {
                label: p.max(y),
                classes: 2,
            });
        }
        confusion[y][p] += 1;
    }
    let tp = confusion[1][1] as f64;
    let fp = confusion[0][1] as f64;
    let fneg = confusion[1][0] as f64;
    let accuracy = (confusion[0][0] + confusion[1][1]) as f64 / labels.len() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        accuracy,
        f1,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let m = metrics(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!((m.accuracy, m.f1), (1.0, 1.0));
        assert_eq!(m.confusion, [[2, 0], [0, 2]]);
    }

    #[test]
    fn all_positive_on_balanced_set() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let m = metrics(&[1; 100], &labels).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(m.single_class_predictions());
    }

    #[test]
    fn no_positives_gives_zero_f1() {
        let m = metrics(&[0, 0, 0], &[0, 0, 0]).unwrap();
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(metrics(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..50), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let (p, y): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut crate::rng::rng(seed));
            let (ps, ys): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            let a = metrics(&p, &y).unwrap();
            prop_assert_eq!(a, metrics(&ps, &ys).unwrap());
            prop_assert!((0.0..=1.0).contains(&a.f1));
            prop_assert_eq!(a.total(), p.len());
        }
    }
}
