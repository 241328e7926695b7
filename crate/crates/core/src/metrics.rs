//! Accuracy and mean reciprocal rank.
//!
//! Ranking ties are broken by ascending answer index, both for the predicted
//! answer and for the rank of the correct one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

/// 1-based position of `target` when answers are sorted by descending score,
/// ties broken by ascending index.
pub fn rank_of_correct(scores: &[f64], target: usize) -> usize {
    assert!(target < scores.len(), "target {target} out of range for {} answers", scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.iter().position(|&i| i == target).expect("target is in the order") + 1
}

/// Highest-scoring answer; the lowest index wins ties.
pub fn predicted_answer(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub mrr: f64,
    pub ranks: Vec<usize>,
    /// Accuracy restricted to samples whose true answer is the key.
    pub per_class_accuracy: BTreeMap<usize, f64>,
    /// Run metadata supplied by the caller.
    pub config: serde_json::Value,
}

pub fn evaluate(scores: &[Vec<f64>], targets: &[usize]) -> Result<EvalReport> {
    if scores.is_empty() {
        return contract_err("cannot evaluate an empty batch");
    }
    if scores.len() != targets.len() {
        return contract_err(format!("{} score rows for {} targets", scores.len(), targets.len()));
    }
    for (row, &t) in scores.iter().zip(targets) {
        if t >= row.len() {
            return contract_err(format!("target {t} out of range for {} answers", row.len()));
        }
    }
    let n = scores.len();
    let ranks: Vec<usize> = scores.iter().zip(targets).map(|(s, &t)| rank_of_correct(s, t)).collect();
    let mut hits = 0usize;
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (s, &t) in scores.iter().zip(targets) {
        let ok = predicted_answer(s) == t;
        hits += ok as usize;
        let e = per_class.entry(t).or_default();
        e.0 += ok as usize;
        e.1 += 1;
    }
    let rr: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
    Ok(EvalReport {
        n,
        accuracy: hits as f64 / n as f64,
        mrr: rr / n as f64,
        ranks,
        per_class_accuracy: per_class.into_iter().map(|(k, (h, c))| (k, h as f64 / c as f64)).collect(),
        config: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_correct(&[0.1, 0.9, 0.5], 1), 1);
        assert_eq!(rank_of_correct(&[0.1, 0.9, 0.5], 0), 3);
        assert_eq!(rank_of_correct(&[1.0; 4], 2), 3);
    }

    #[test]
    fn accuracy_three_of_four() {
        let scores = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let r = evaluate(&scores, &[0, 1, 0, 1]).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_class_accuracy[&0], 1.0);
        assert_eq!(r.per_class_accuracy[&1], 0.5);
    }

    #[test]
    fn mrr_seven_twelfths() {
        // target ranks 1, 2, 4
        let scores = vec![
            vec![4.0, 3.0, 2.0, 1.0],
            vec![4.0, 3.0, 2.0, 1.0],
            vec![4.0, 3.0, 2.0, 1.0],
        ];
        let r = evaluate(&scores, &[0, 1, 3]).unwrap();
        assert_eq!(r.ranks, vec![1, 2, 4]);
        assert_eq!(r.mrr, 7.0 / 12.0);
    }

    #[test]
    fn tie_prediction_prefers_lowest_index() {
        assert_eq!(predicted_answer(&[0.5, 0.9, 0.9]), 1);
        let r = evaluate(&[vec![0.2, 0.2]], &[1]).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.ranks, vec![2]);
    }

    #[test]
    fn empty_and_bad_targets() {
        assert!(evaluate(&[], &[]).is_err());
        assert!(evaluate(&[vec![0.0, 1.0]], &[2]).is_err());
    }
}
