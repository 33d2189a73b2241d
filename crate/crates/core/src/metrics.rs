//! Score-based metrics: rank-sum AUC, pessimistic ranks and top-k, and
//! per-entity clinical precision/recall/F1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report_nlp::{ClinicalLabelVector, EntityId};

/// ROC AUC by the Mann-Whitney rank sum with midranks for ties.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!("AUC needs both classes (pos={n_pos}, neg={n_neg})")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// 1 + number of other candidates scoring at least as high (ties count against).
pub fn pessimistic_rank(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores.iter().enumerate().filter(|&(j, s)| j != target && *s >= t).count()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// No positives in either prediction or truth.
    pub fn is_vacuous(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fp) as f64 }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fn_) as f64 }
    }

    pub fn f1(&self) -> f64 {
        if self.is_vacuous() { 0.0 } else { 2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalScores {
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Entities averaged over (those with any positive in prediction or truth).
    pub entities_scored: usize,
    pub per_entity: BTreeMap<String, Confusion>,
}

/// Macro scores over the 13 entities, skipping entities absent from both sides.
/// When every entity is absent everywhere, prediction and truth agree and all
/// scores are 1.
pub fn clinical_scores(predicted: &[ClinicalLabelVector], truth: &[ClinicalLabelVector]) -> Result<ClinicalScores> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid("prediction and truth differ in length"));
    }
    let mut per_entity = BTreeMap::new();
    let (mut f1, mut p, mut r, mut k) = (0.0, 0.0, 0.0, 0usize);
    for e in EntityId::ALL {
        let mut c = Confusion::default();
        for (a, b) in predicted.iter().zip(truth) {
            match (a.get(e), b.get(e)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        if !c.is_vacuous() {
            f1 += c.f1();
            p += c.precision();
            r += c.recall();
            k += 1;
        }
        per_entity.insert(e.name().to_string(), c);
    }
    let avg = |x: f64| if k == 0 { 1.0 } else { x / k as f64 };
    Ok(ClinicalScores { macro_f1: avg(f1), macro_precision: avg(p), macro_recall: avg(r), entities_scored: k, per_entity })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ranks_are_pessimistic() {
        assert_eq!(pessimistic_rank(&[0.3, 0.9, 0.1], 1), 1);
        assert_eq!(pessimistic_rank(&[0.9, 0.9, 0.1], 1), 2);
        assert_eq!(pessimistic_rank(&[0.9, 0.9, 0.1], 0), 2);
    }

    #[test]
    fn clinical_perfect_and_vacuous() {
        use EntityId::*;
        let v = vec![
            ClinicalLabelVector::from_entities([Edema]),
            ClinicalLabelVector::from_entities([Edema, Fracture]),
            ClinicalLabelVector::normal(),
        ];
        let s = clinical_scores(&v, &v).unwrap();
        assert_eq!((s.macro_f1, s.entities_scored), (1.0, 2));
        let n = vec![ClinicalLabelVector::normal(); 2];
        assert_eq!(clinical_scores(&n, &n).unwrap().macro_f1, 1.0);
    }
}
