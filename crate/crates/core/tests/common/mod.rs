//! Independent reference implementations used by the oracle, property and
//! acceptance tests. Plain `Vec<Vec<f64>>` loops, no shared code with the crate
//! beyond the input types.
#![allow(dead_code)]

use clinalign::numerics::Matrix;
use clinalign::report_nlp::ClinicalLabelVector;
use clinalign::soft_contrastive::{LossConfig, Modality, Stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn matrix(rows: &Rows) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

fn clinical_rows(labels: &[ClinicalLabelVector]) -> Rows {
    labels.iter().map(|l| l.flags().iter().map(|&f| if f { 1.0 } else { 0.0 }).collect()).collect()
}

/// Thresholded, rescaled, row-normalized targets from raw source rows.
pub fn naive_targets(src: &Rows, tau: f64) -> Rows {
    let n = src.len();
    let mut y = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let s = if i == j { 1.0 } else { cosine(&src[i], &src[j]) };
            y[i][j] = if s > tau { (s - tau) / (1.0 - tau) } else { 0.0 };
        }
        let t: f64 = y[i].iter().sum();
        for v in y[i].iter_mut() {
            *v /= t;
        }
    }
    y
}

fn identity(n: usize) -> Rows {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Mean-over-queries KL between the row-renormalized `nq x nk` target block
/// and softmax(q·k/τ).
pub fn naive_direction(q: &[Vec<f64>], k: &[Vec<f64>], y: &Rows, temperature: f64) -> f64 {
    let mut total = 0.0;
    for (i, qi) in q.iter().enumerate() {
        let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / temperature).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let row: Vec<f64> = y[i][..k.len()].to_vec();
        let rs: f64 = row.iter().sum();
        for (j, t) in row.iter().enumerate() {
            let t = t / rs;
            if t > 0.0 {
                let log_p = logits[j] - m - z.ln();
                total += t * (t.ln() - log_p);
            }
        }
    }
    total / q.len() as f64
}

pub struct NaiveBatch {
    pub images: Rows,
    pub texts: Rows,
    pub graphs: Rows,
    pub labels: Vec<ClinicalLabelVector>,
}

/// Per-stream targets and weights over the full `[originals; negatives]` index space.
pub fn naive_stream_targets(b: &NaiveBatch, cfg: &LossConfig) -> Vec<(Rows, f64)> {
    let n = b.texts.len();
    cfg.streams
        .iter()
        .map(|s| match s {
            Stream::Identity => (identity(n), cfg.w_i),
            Stream::Text => (naive_targets(&b.texts, cfg.tau_t), cfg.w_t),
            Stream::Clinical => (naive_targets(&clinical_rows(&b.labels), cfg.tau_c), cfg.w_c),
            Stream::Graph => (naive_targets(&b.graphs, cfg.tau_g), cfg.w_g),
        })
        .collect()
}

/// Weighted loss with the given targets held fixed.
pub fn naive_loss_frozen(b: &NaiveBatch, cfg: &LossConfig, targets: &[(Rows, f64)]) -> f64 {
    let bsz = b.images.len();
    let n = b.texts.len();
    let side = |m: Modality| match m {
        Modality::Image => &b.images,
        Modality::Text => &b.texts,
        Modality::Graph => &b.graphs,
    };
    let mut total = 0.0;
    for &from in &cfg.modalities {
        for &to in &cfg.modalities {
            if from == to {
                continue;
            }
            let nq = if from == Modality::Image || to == Modality::Image { bsz } else { n };
            let nk = if to == Modality::Image { bsz } else { n };
            for (y, w) in targets {
                total += w * naive_direction(&side(from)[..nq], &side(to)[..nk], y, cfg.temperature);
            }
        }
    }
    total
}

/// Full weighted loss written directly from the definitions.
pub fn naive_total_loss(b: &NaiveBatch, cfg: &LossConfig) -> f64 {
    naive_loss_frozen(b, cfg, &naive_stream_targets(b, cfg))
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Rows drawn near a few shared anchors so that some pairs clear the thresholds.
pub fn clustered_units(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    let anchors: Rows = (0..3).map(|_| random_unit(rng, d)).collect();
    (0..n)
        .map(|_| {
            let a = &anchors[rng.random_range(0..anchors.len())];
            let spread = [0.0, 0.05, 0.3, 1.5][rng.random_range(0..4)];
            unit(a.iter().map(|x| x + spread * rng.random_range(-1.0..1.0)).collect())
        })
        .collect()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<ClinicalLabelVector> {
    use clinalign::report_nlp::EntityId;
    (0..n)
        .map(|_| {
            if rng.random_bool(0.4) {
                ClinicalLabelVector::normal()
            } else {
                let picks: Vec<EntityId> =
                    EntityId::ALL.into_iter().filter(|_| rng.random_bool(0.2)).collect();
                ClinicalLabelVector::from_entities(picks)
            }
        })
        .collect()
}

/// Area under the empirical ROC curve by the trapezoid rule over distinct thresholds.
pub fn trapezoid_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let p = positive.iter().filter(|x| **x).count() as f64;
    let n = positive.len() as f64 - p;
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = scores.iter().zip(positive).filter(|(s, y)| **s >= t && **y).count() as f64;
        let fp = scores.iter().zip(positive).filter(|(s, y)| **s >= t && !**y).count() as f64;
        pts.push((fp / n, tp / p));
    }
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Macro F1 over entities with any positive in prediction or truth; 1 if none.
pub fn confusion_macro_f1(pred: &[ClinicalLabelVector], truth: &[ClinicalLabelVector]) -> f64 {
    let mut f1s = Vec::new();
    for e in 0..13 {
        let mut m = [[0usize; 2]; 2];
        for (a, b) in pred.iter().zip(truth) {
            m[a.flags()[e] as usize][b.flags()[e] as usize] += 1;
        }
        let (tp, fp, fn_) = (m[1][1], m[1][0], m[0][1]);
        if tp + fp + fn_ == 0 {
            continue;
        }
        let prec = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rec = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        f1s.push(if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) });
    }
    if f1s.is_empty() { 1.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 }
}

/// 1-based position of `target` after a full descending sort that places
/// `target` behind every tied competitor.
pub fn full_sort_rank(scores: &[f64], target: usize) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then_with(|| (a == target).cmp(&(b == target)))
    });
    idx.iter().position(|&i| i == target).unwrap() + 1
}

/// Random batch with clustered text/graph rows and random clinical labels.
pub fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, hard_negatives: bool) -> NaiveBatch {
    let n = if hard_negatives { 2 * b } else { b };
    NaiveBatch {
        images: (0..b).map(|_| random_unit(rng, d)).collect(),
        texts: clustered_units(rng, n, d),
        graphs: clustered_units(rng, n, d),
        labels: random_labels(rng, n),
    }
}

pub fn to_embeddings(b: &NaiveBatch) -> (clinalign::encoders::BatchEmbeddings, Matrix) {
    let emb = clinalign::encoders::BatchEmbeddings {
        images: matrix(&b.images),
        texts: matrix(&b.texts),
        graphs: Some(matrix(&b.graphs)),
    };
    (emb, clinalign::soft_contrastive::clinical_matrix(&b.labels))
}
