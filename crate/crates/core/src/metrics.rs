use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub worst_group_accuracy: f64,
    pub per_group: BTreeMap<usize, f64>,
    #[serde(default)]
    pub per_batch: Vec<f64>,
}

/// Accuracy, macro-F1 (averaged over classes present in `labels`) and
/// worst-group accuracy (over non-empty groups).
pub fn metrics(preds: &[usize], labels: &[usize], groups: &[usize]) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("metrics need at least one prediction".into()));
    }
    if preds.len() != labels.len() || preds.len() != groups.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} predictions, {} labels, {} groups",
            preds.len(),
            labels.len(),
            groups.len()
        )));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / preds.len() as f64;

    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let f1_sum: f64 = classes
        .iter()
        .map(|&k| {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fn_ = 0usize;
            for (&p, &l) in preds.iter().zip(labels) {
                match (p == k, l == k) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    let macro_f1 = f1_sum / classes.len() as f64;

    let mut tallies: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((&p, &l), &g) in preds.iter().zip(labels).zip(groups) {
        let e = tallies.entry(g).or_default();
        e.0 += usize::from(p == l);
        e.1 += 1;
    }
    let per_group: BTreeMap<usize, f64> = tallies
        .into_iter()
        .map(|(g, (c, n))| (g, c as f64 / n as f64))
        .collect();
    let worst_group_accuracy = per_group.values().copied().fold(f64::INFINITY, f64::min);

    Ok(Metrics {
        accuracy,
        macro_f1,
        worst_group_accuracy,
        per_group,
        per_batch: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], &[0, 1, 2, 3]).unwrap();
        assert_eq!((m.accuracy, m.macro_f1, m.worst_group_accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn confusion_matrix_example() {
        let m = metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        let expected = (2.0 / 3.0 + 0.8) / 2.0;
        assert!((m.macro_f1 - expected).abs() < 1e-15);
        assert!((m.macro_f1 - 0.7333).abs() < 1e-4);
    }

    #[test]
    fn worst_group_is_minimum() {
        let m = metrics(&[0, 0, 0, 1], &[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.per_group[&0], 1.0);
        assert_eq!(m.per_group[&1], 0.5);
        assert_eq!(m.worst_group_accuracy, 0.5);
    }

    #[test]
    fn absent_classes_are_not_averaged() {
        // Class 2 is predicted but never a label: it does not enter the mean.
        let m = metrics(&[0, 2], &[0, 0], &[0, 0]).unwrap();
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_input() {
        assert!(metrics(&[], &[], &[]).is_err());
        assert!(metrics(&[0], &[0, 1], &[0]).is_err());
    }
}
