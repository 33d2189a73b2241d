//! Evaluation protocols over a trained encoder: zero-shot prompt-pair AUC,
//! image-to-report retrieval, CXR-Align triplets, adversarial present/absent
//! queries and normal-report detection.
//!
//! Each protocol has a score-level core (usable with any scorer) and a thin
//! wrapper that computes cosine scores from encoder parameters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_image, encode_texts, text_features, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::{auc, clinical_scores, pessimistic_rank};
use crate::negation_forge::{InsertPosition, TripletRecord};
use crate::numerics::{dot, matmul_bt, Matrix};
use crate::report_nlp::{ClinicalLabelVector, EntityId, Lexicon, Report};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: String,
    /// Rates in [0,1]; keys containing "rank" are ranks (>= 1).
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub breakdown: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, usize>,
}

impl EvalResult {
    pub fn new(task: &str) -> Self {
        Self { task: task.into(), metrics: BTreeMap::new(), breakdown: BTreeMap::new(), counts: BTreeMap::new() }
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn validate(&self) -> Result<()> {
        let nested = self.breakdown.values().flat_map(|m| m.iter());
        for (k, v) in self.metrics.iter().chain(nested) {
            let ok = if k.contains("rank") { *v >= 1.0 } else { (0.0..=1.0).contains(v) };
            if !ok {
                return Err(Error::Verification(format!("metric {k} = {v} out of range")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }
}

/// Unit image embeddings, one row per image.
pub fn embed_images(params: &EncoderParams, features: &Matrix) -> Result<Matrix> {
    Ok(encode_image(features, params)?.unit)
}

/// Unit text embeddings, one row per report.
pub fn embed_reports(params: &EncoderParams, reports: &[Report]) -> Result<Matrix> {
    let inputs: Vec<_> = reports.par_iter().map(|r| text_features(r, params.config.text_hash_dim)).collect();
    Ok(encode_texts(&inputs, params)?.unit)
}

/// "There is {finding}." / "There is no {finding}."
pub fn prompt_pair(entity: EntityId, lexicon: &Lexicon) -> (Report, Report) {
    let c = lexicon.canonical(entity);
    let parse = |t: String| Report::parse_with("prompt", &t, lexicon).expect("prompt text is non-empty");
    (parse(format!("There is {c}.")), parse(format!("There is no {c}.")))
}

/// cos(v, t_pos) − cos(v, t_neg) per image.
pub fn zero_shot_scores(params: &EncoderParams, images: &Matrix, entity: EntityId, lexicon: &Lexicon) -> Result<Vec<f64>> {
    let (pos, neg) = prompt_pair(entity, lexicon);
    let t = embed_reports(params, &[pos, neg])?;
    let v = embed_images(params, images)?;
    Ok(v.row_iter().map(|row| dot(row, t.row(0)) - dot(row, t.row(1))).collect())
}

pub fn zero_shot_eval(
    params: &EncoderParams,
    images: &Matrix,
    truth: &[bool],
    entity: EntityId,
    lexicon: &Lexicon,
) -> Result<EvalResult> {
    let scores = zero_shot_scores(params, images, entity, lexicon)?;
    let mut r = EvalResult::new("zeroshot");
    r.metrics.insert("auc".into(), auc(&scores, truth)?);
    r.counts.insert("positives".into(), truth.iter().filter(|t| **t).count());
    r.counts.insert("images".into(), truth.len());
    Ok(r)
}

/// Per-entity AUC for every entity with both classes present; `mean_auc` over those.
pub fn zero_shot_suite(
    params: &EncoderParams,
    images: &Matrix,
    truth: &[ClinicalLabelVector],
    lexicon: &Lexicon,
) -> Result<EvalResult> {
    let mut r = EvalResult::new("zeroshot");
    let mut per = BTreeMap::new();
    for e in EntityId::ALL {
        let labels: Vec<bool> = truth.iter().map(|t| t.get(e)).collect();
        match zero_shot_eval(params, images, &labels, e, lexicon) {
            Ok(res) => {
                per.insert(e.name().to_string(), res.metrics["auc"]);
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(err) => return Err(err),
        }
    }
    if per.is_empty() {
        return Err(Error::UndefinedMetric("no entity has both classes".into()));
    }
    r.metrics.insert("mean_auc".into(), per.values().sum::<f64>() / per.len() as f64);
    r.counts.insert("entities".into(), per.len());
    r.breakdown.insert("auc".into(), per);
    Ok(r)
}

/// Retrieval from an `images × pool` score matrix; `truth[i]` is image i's report.
pub fn retrieval_from_scores(
    scores: &Matrix,
    truth: &[usize],
    pool_labels: &[ClinicalLabelVector],
    k: usize,
) -> Result<EvalResult> {
    if scores.cols() == 0 || pool_labels.is_empty() {
        return Err(Error::invalid("empty report pool"));
    }
    if scores.rows() != truth.len() || scores.cols() != pool_labels.len() || scores.rows() == 0 {
        return Err(Error::invalid("score matrix does not match images and pool"));
    }
    let mut hits1 = 0;
    let mut hitsk = 0;
    let mut rank_sum = 0.0;
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    for (i, &t) in truth.iter().enumerate() {
        if t >= pool_labels.len() {
            return Err(Error::invalid(format!("true report index {t} outside the pool")));
        }
        let row = scores.row(i);
        let rank = pessimistic_rank(row, t);
        hits1 += (rank == 1) as usize;
        hitsk += (rank <= k) as usize;
        rank_sum += rank as f64;
        let top = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        predicted.push(pool_labels[top]);
        actual.push(pool_labels[t]);
    }
    let n = truth.len() as f64;
    let clin = clinical_scores(&predicted, &actual)?;
    let mut r = EvalResult::new("retrieval");
    r.metrics.insert("top1".into(), hits1 as f64 / n);
    r.metrics.insert(format!("top{k}"), hitsk as f64 / n);
    r.metrics.insert("mean_rank".into(), rank_sum / n);
    r.metrics.insert("macro_f1".into(), clin.macro_f1);
    r.metrics.insert("macro_precision".into(), clin.macro_precision);
    r.metrics.insert("macro_recall".into(), clin.macro_recall);
    r.counts.insert("images".into(), truth.len());
    r.counts.insert("pool".into(), pool_labels.len());
    r.counts.insert("entities_scored".into(), clin.entities_scored);
    Ok(r)
}

pub fn retrieval_eval(
    params: &EncoderParams,
    images: &Matrix,
    truth: &[usize],
    pool: &[Report],
    k: usize,
) -> Result<EvalResult> {
    if pool.is_empty() {
        return Err(Error::invalid("empty report pool"));
    }
    let v = embed_images(params, images)?;
    let t = embed_reports(params, pool)?;
    let labels: Vec<_> = pool.iter().map(Report::labels).collect();
    retrieval_from_scores(&matmul_bt(&v, &t)?, truth, &labels, k)
}

/// Cosine scores of one triplet's image against r, r^n and r^r.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletScores {
    pub entity: EntityId,
    pub position: InsertPosition,
    pub template_index: usize,
    pub original: f64,
    pub negated: f64,
    pub removed: f64,
}

impl TripletScores {
    /// Ties are incorrect.
    pub fn correct_a(&self) -> bool {
        self.original > self.negated
    }

    pub fn correct_b(&self) -> bool {
        self.original > self.removed
    }
}

pub fn cxr_align_from_scores(scores: &[TripletScores]) -> Result<EvalResult> {
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("no triplets".into()));
    }
    let n = scores.len() as f64;
    let mut r = EvalResult::new("cxr_align");
    r.metrics.insert("accuracy_a".into(), scores.iter().filter(|s| s.correct_a()).count() as f64 / n);
    r.metrics.insert("accuracy_b".into(), scores.iter().filter(|s| s.correct_b()).count() as f64 / n);
    r.counts.insert("triplets".into(), scores.len());
    let groups: [(&str, fn(&TripletScores) -> String); 3] = [
        ("entity", |s| s.entity.name().to_string()),
        ("position", |s| s.position.name().to_string()),
        ("template", |s| s.template_index.to_string()),
    ];
    for (name, key) in groups {
        let mut tally: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
        for s in scores {
            let e = tally.entry(key(s)).or_default();
            e.0 += 1;
            e.1 += s.correct_a() as usize;
            e.2 += s.correct_b() as usize;
        }
        let mut a = BTreeMap::new();
        let mut b = BTreeMap::new();
        for (k, (count, ca, cb)) in tally {
            a.insert(k.clone(), ca as f64 / count as f64);
            b.insert(k.clone(), cb as f64 / count as f64);
            r.counts.insert(format!("{name}:{k}"), count);
        }
        r.breakdown.insert(format!("{name}_a"), a);
        r.breakdown.insert(format!("{name}_b"), b);
    }
    Ok(r)
}

pub fn cxr_align_scores(
    params: &EncoderParams,
    triplets: &[TripletRecord],
    images: &BTreeMap<String, Vec<f64>>,
) -> Result<Vec<TripletScores>> {
    let d = params.config.feature_dim;
    let mut feats = Matrix::zeros(triplets.len(), d);
    for (i, t) in triplets.iter().enumerate() {
        let f = images
            .get(&t.image_id)
            .ok_or_else(|| Error::invalid(format!("no image features for {}", t.image_id)))?;
        if f.len() != d {
            return Err(Error::invalid(format!("image {} has {} features, expected {d}", t.image_id, f.len())));
        }
        feats.row_mut(i).copy_from_slice(f);
    }
    let v = embed_images(params, &feats)?;
    let reports: Vec<Report> =
        triplets.iter().flat_map(|t| [t.original.clone(), t.negated.clone(), t.removed.clone()]).collect();
    let t = embed_reports(params, &reports)?;
    Ok(triplets
        .iter()
        .enumerate()
        .map(|(i, rec)| TripletScores {
            entity: rec.selected_entity,
            position: rec.insertion_position,
            template_index: rec.template_index,
            original: dot(v.row(i), t.row(3 * i)),
            negated: dot(v.row(i), t.row(3 * i + 1)),
            removed: dot(v.row(i), t.row(3 * i + 2)),
        })
        .collect())
}

pub fn cxr_align_eval(
    params: &EncoderParams,
    triplets: &[TripletRecord],
    images: &BTreeMap<String, Vec<f64>>,
) -> Result<EvalResult> {
    cxr_align_from_scores(&cxr_align_scores(params, triplets, images)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarialCase {
    pub image: usize,
    pub present: EntityId,
    pub absent: EntityId,
}

/// One case per image with at least one present and one absent entity.
pub fn adversarial_cases(truth: &[ClinicalLabelVector], rng_seed: u64) -> Vec<AdversarialCase> {
    let mut out = Vec::new();
    for (i, t) in truth.iter().enumerate() {
        let present = t.positive_entities();
        let absent: Vec<EntityId> = EntityId::ALL.into_iter().filter(|e| !t.get(*e)).collect();
        if present.is_empty() || absent.is_empty() {
            continue;
        }
        let mut rng = seed::rng(rng_seed, &[0xad, i as u64]);
        out.push(AdversarialCase {
            image: i,
            present: present[rng.random_range(0..present.len())],
            absent: absent[rng.random_range(0..absent.len())],
        });
    }
    out
}

/// Correct iff score(present) > 0 and score(absent) < 0. Also tallies the
/// sign of each query in a present/absent × positive/negative table.
pub fn adversarial_eval<F>(cases: &[AdversarialCase], score: F) -> Result<EvalResult>
where
    F: Fn(usize, EntityId) -> f64,
{
    if cases.is_empty() {
        return Err(Error::UndefinedMetric("no adversarial cases".into()));
    }
    let mut correct = 0;
    let mut table = [[0usize; 2]; 2];
    for c in cases {
        let sp = score(c.image, c.present);
        let sa = score(c.image, c.absent);
        table[0][(sp > 0.0) as usize] += 1;
        table[1][(sa > 0.0) as usize] += 1;
        correct += (sp > 0.0 && sa < 0.0) as usize;
    }
    let mut r = EvalResult::new("adversarial");
    r.metrics.insert("accuracy".into(), correct as f64 / cases.len() as f64);
    r.counts.insert("cases".into(), cases.len());
    r.counts.insert("present_predicted_positive".into(), table[0][1]);
    r.counts.insert("present_predicted_negative".into(), table[0][0]);
    r.counts.insert("absent_predicted_positive".into(), table[1][1]);
    r.counts.insert("absent_predicted_negative".into(), table[1][0]);
    Ok(r)
}

pub fn adversarial_eval_model(
    params: &EncoderParams,
    images: &Matrix,
    cases: &[AdversarialCase],
    lexicon: &Lexicon,
) -> Result<EvalResult> {
    let mut table: BTreeMap<EntityId, Vec<f64>> = BTreeMap::new();
    for c in cases {
        for e in [c.present, c.absent] {
            if !table.contains_key(&e) {
                table.insert(e, zero_shot_scores(params, images, e, lexicon)?);
            }
        }
    }
    adversarial_eval(cases, |i, e| table[&e][i])
}

/// Normal detection from an `images × pool` score matrix.
pub fn normal_detection_from_scores(scores: &Matrix, normal_index: usize) -> Result<EvalResult> {
    if scores.rows() == 0 || normal_index >= scores.cols() {
        return Err(Error::invalid("empty image set or normal index outside the pool"));
    }
    let ranks: Vec<usize> = scores.row_iter().map(|row| pessimistic_rank(row, normal_index)).collect();
    let n = ranks.len() as f64;
    let mut r = EvalResult::new("normal_detect");
    r.metrics.insert("accuracy".into(), ranks.iter().filter(|&&k| k == 1).count() as f64 / n);
    r.metrics.insert("mean_rank".into(), ranks.iter().sum::<usize>() as f64 / n);
    r.counts.insert("images".into(), ranks.len());
    r.counts.insert("pool".into(), scores.cols());
    Ok(r)
}

/// Index of the single normal report in `pool`.
pub fn single_normal_index(pool: &[Report]) -> Result<usize> {
    let normals: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].labels().no_findings()).collect();
    match normals.as_slice() {
        [i] => Ok(*i),
        _ => Err(Error::Config(format!("report pool must contain exactly one normal report, found {}", normals.len()))),
    }
}

pub fn normal_detection_eval(params: &EncoderParams, normal_images: &Matrix, pool: &[Report]) -> Result<EvalResult> {
    let idx = single_normal_index(pool)?;
    let v = embed_images(params, normal_images)?;
    let t = embed_reports(params, pool)?;
    normal_detection_from_scores(&matmul_bt(&v, &t)?, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report_nlp::EntityId::*;

    fn ts(a: f64, n: f64, r: f64, e: EntityId, p: InsertPosition) -> TripletScores {
        TripletScores { entity: e, position: p, template_index: 0, original: a, negated: n, removed: r }
    }

    #[test]
    fn cxr_align_ties_are_wrong() {
        let s = vec![ts(0.5, 0.5, 0.1, Edema, InsertPosition::End), ts(0.5, 0.5, 0.6, Edema, InsertPosition::End)];
        let r = cxr_align_from_scores(&s).unwrap();
        assert_eq!(r.metric("accuracy_a"), Some(0.0));
        assert_eq!(r.metric("accuracy_b"), Some(0.5));
        r.validate().unwrap();
    }

    #[test]
    fn adversarial_scorers() {
        let cases = vec![
            AdversarialCase { image: 0, present: Edema, absent: Fracture },
            AdversarialCase { image: 1, present: Fracture, absent: Edema },
        ];
        let truth = [[Edema], [Fracture]];
        let oracle = adversarial_eval(&cases, |i, e| if truth[i][0] == e { 1.0 } else { -1.0 }).unwrap();
        assert_eq!(oracle.metric("accuracy"), Some(1.0));
        let yes = adversarial_eval(&cases, |_, _| 1.0).unwrap();
        assert_eq!(yes.metric("accuracy"), Some(0.0));
        assert_eq!(yes.counts["present_predicted_positive"], 2);
        assert_eq!(yes.counts["absent_predicted_positive"], 2);
    }

    #[test]
    fn normal_pool_must_have_one_normal() {
        let lex = Lexicon::default_ref();
        let p = |t: &str| Report::parse_with("x", t, lex).unwrap();
        let pool = vec![p("There is edema."), p("There is fracture.")];
        assert!(matches!(single_normal_index(&pool), Err(Error::Config(_))));
        let pool = vec![p("There is edema."), p("No acute cardiopulmonary process.")];
        assert_eq!(single_normal_index(&pool).unwrap(), 1);
    }

    #[test]
    fn aligned_normal_is_rank_one() {
        let scores = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.2, 0.9, -0.1]]).unwrap();
        let r = normal_detection_from_scores(&scores, 1).unwrap();
        assert_eq!(r.metric("accuracy"), Some(1.0));
        assert_eq!(r.metric("mean_rank"), Some(1.0));
    }

    #[test]
    fn retrieval_identity_pool() {
        let labels = vec![
            ClinicalLabelVector::from_entities([Edema]),
            ClinicalLabelVector::from_entities([Fracture]),
            ClinicalLabelVector::normal(),
        ];
        let r = retrieval_from_scores(&Matrix::identity(3), &[0, 1, 2], &labels, 5).unwrap();
        assert_eq!(r.metric("top1"), Some(1.0));
        assert_eq!(r.metric("macro_f1"), Some(1.0));
        assert!(retrieval_from_scores(&Matrix::zeros(1, 0), &[0], &[], 5).is_err());
    }

    #[test]
    fn clinically_identical_retrieval_counts_for_f1() {
        // Image 0's true report is pool 0; pool 1 is a paraphrase with the same labels.
        let labels = vec![ClinicalLabelVector::from_entities([Edema]), ClinicalLabelVector::from_entities([Edema])];
        let scores = Matrix::from_rows(&[vec![0.1, 0.9]]).unwrap();
        let r = retrieval_from_scores(&scores, &[0], &labels, 1).unwrap();
        assert_eq!(r.metric("top1"), Some(0.0));
        assert_eq!(r.metric("macro_f1"), Some(1.0));
    }
}
