//! Dynamic soft-label contrastive loss.
//!
//! Intra-modal similarity matrices (text, clinical labels, graph) are
//! thresholded and rescaled into row-stochastic targets; each ordered pair of
//! modalities contributes the KL divergence between those targets and the
//! temperature-scaled cross-modal softmax, weighted per stream.
//!
//! Label index space is `[originals; hard negatives]`. Image row `i` pairs
//! with label row `i`. Directions that touch the image use the top-left
//! `nq×nk` block of each label matrix, row-renormalized.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{BatchEmbeddings, EmbeddingGrads};
use crate::error::{Error, Result};
use crate::numerics::{kl_rows, matmul, matmul_at, matmul_bt, norm, softmax_rows, sum_sorted, Matrix};
use crate::report_nlp::{clinical_vector_normalized, ClinicalLabelVector, LABEL_DIM};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Graph,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Graph => "graph",
        }
    }
}

/// Source of a label matrix. `Identity` gives one-hot InfoNCE targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stream {
    #[serde(rename = "i")]
    Identity,
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "c")]
    Clinical,
    #[serde(rename = "g")]
    Graph,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Identity => "i",
            Stream::Text => "t",
            Stream::Clinical => "c",
            Stream::Graph => "g",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub tau_t: f64,
    pub tau_c: f64,
    pub tau_g: f64,
    pub w_t: f64,
    pub w_c: f64,
    pub w_g: f64,
    pub w_i: f64,
    pub modalities: Vec<Modality>,
    pub streams: Vec<Stream>,
    pub hard_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            tau_t: 0.9,
            tau_c: 0.8,
            tau_g: 0.7,
            w_t: 0.167,
            w_c: 0.167,
            w_g: 0.167,
            w_i: 0.167,
            modalities: vec![Modality::Image, Modality::Text, Modality::Graph],
            streams: vec![Stream::Text, Stream::Clinical, Stream::Graph],
            hard_negatives: true,
        }
    }
}

impl LossConfig {
    /// One-hot targets over image and text only.
    pub fn infonce() -> Self {
        Self {
            modalities: vec![Modality::Image, Modality::Text],
            streams: vec![Stream::Identity],
            hard_negatives: false,
            ..Self::default()
        }
    }

    pub fn weight(&self, s: Stream) -> f64 {
        match s {
            Stream::Identity => self.w_i,
            Stream::Text => self.w_t,
            Stream::Clinical => self.w_c,
            Stream::Graph => self.w_g,
        }
    }

    pub fn threshold(&self, s: Stream) -> Option<f64> {
        match s {
            Stream::Identity => None,
            Stream::Text => Some(self.tau_t),
            Stream::Clinical => Some(self.tau_c),
            Stream::Graph => Some(self.tau_g),
        }
    }

    pub fn uses_graph(&self) -> bool {
        self.modalities.contains(&Modality::Graph) || self.streams.contains(&Stream::Graph)
    }

    fn sorted_modalities(&self) -> Vec<Modality> {
        let mut m = self.modalities.clone();
        m.sort();
        m.dedup();
        m
    }

    fn sorted_streams(&self) -> Vec<Stream> {
        let mut s = self.streams.clone();
        s.sort();
        s.dedup();
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        for (name, t) in [("tau_t", self.tau_t), ("tau_c", self.tau_c), ("tau_g", self.tau_g)] {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {t}")));
            }
        }
        for (name, w) in [("w_t", self.w_t), ("w_c", self.w_c), ("w_g", self.w_g), ("w_i", self.w_i)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !self.modalities.contains(&Modality::Image) || !self.modalities.contains(&Modality::Text) {
            return Err(Error::Config("image and text modalities are always active".into()));
        }
        if self.streams.is_empty() {
            return Err(Error::Config("at least one label stream must be active".into()));
        }
        Ok(())
    }
}

/// Cosine similarity of unit rows, symmetrized, unit diagonal.
pub fn similarity_matrix(rows: &Matrix) -> Result<Matrix> {
    let mut unit = rows.clone();
    for r in 0..rows.rows() {
        let n = norm(rows.row(r));
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::invalid(format!("row {r} has norm {n}, expected a unit row")));
        }
        unit.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    let s = matmul_bt(&unit, &unit)?;
    let n = s.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // identical rows share the diagonal's exact 1
            let v = if i == j || unit.row(i) == unit.row(j) { 1.0 } else { 0.5 * (s.get(i, j) + s.get(j, i)) };
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Row-stochastic targets tagged with their stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix {
    pub values: Matrix,
    pub stream: Stream,
}

fn normalize_label_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let s = sum_sorted(&mut row.to_vec());
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// `(S−τ)/(1−τ)` where `S > τ` (strict), else 0; rows then sum to 1.
pub fn soft_labels(s: &Matrix, threshold: f64, stream: Stream) -> Result<SoftLabelMatrix> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold must be in [0,1), got {threshold}")));
    }
    let mut values = s.clone();
    values
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v > threshold { (*v - threshold) / (1.0 - threshold) } else { 0.0 });
    normalize_label_rows(&mut values);
    Ok(SoftLabelMatrix { values, stream })
}

/// Top-left `rows×cols` block, row-renormalized.
pub fn label_slice(labels: &Matrix, rows: usize, cols: usize) -> Matrix {
    let mut m = labels.block(rows, cols);
    normalize_label_rows(&mut m);
    m
}

/// softmax over keys of `q·k / τ`.
pub fn cross_modal_probs(queries: &Matrix, keys: &Matrix, temperature: f64) -> Result<Matrix> {
    softmax_rows(&matmul_bt(queries, keys)?, temperature)
}

/// Mean over queries of `KL(labels[i] ‖ probs[i])`.
pub fn direction_loss(probs: &Matrix, labels: &Matrix) -> Result<f64> {
    if probs.shape() != labels.shape() {
        return Err(Error::invalid(format!(
            "label slice {:?} does not match probabilities {:?}",
            labels.shape(),
            probs.shape()
        )));
    }
    kl_rows(labels, probs)
}

/// L2-normalized 14-dim clinical vectors, one row per report.
pub fn clinical_matrix(labels: &[ClinicalLabelVector]) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), LABEL_DIM);
    for (i, l) in labels.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&clinical_vector_normalized(l));
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TermKey {
    pub from: Modality,
    pub to: Modality,
    pub stream: Stream,
}

impl fmt::Display for TermKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}/{}", self.from.name(), self.to.name(), self.stream.name())
    }
}

/// Total and unweighted per-term KL values.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub terms: BTreeMap<TermKey, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossOutput {
    pub fn record(&self, step: usize) -> LossRecord {
        LossRecord { step, total: self.total, terms: self.terms.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }
}

/// Full `n×n` label matrix per active stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub labels: BTreeMap<Stream, Matrix>,
}

fn modality_rows<'a>(emb: &'a BatchEmbeddings, m: Modality) -> Result<&'a Matrix> {
    match m {
        Modality::Image => Ok(&emb.images),
        Modality::Text => Ok(&emb.texts),
        Modality::Graph => {
            emb.graphs.as_ref().ok_or_else(|| Error::Config("graph modality or stream active without graph embeddings".into()))
        }
    }
}

fn check_shapes(emb: &BatchEmbeddings, cfg: &LossConfig) -> Result<usize> {
    let b = emb.images.rows();
    let n = emb.texts.rows();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let expect = if cfg.hard_negatives { 2 * b } else { b };
    if n != expect {
        return Err(Error::Config(format!(
            "text rows {n} do not match batch {b} with hard_negatives={}",
            cfg.hard_negatives
        )));
    }
    if cfg.uses_graph() {
        let g = modality_rows(emb, Modality::Graph)?;
        if g.rows() != n {
            return Err(Error::invalid(format!("graph rows {} do not match text rows {n}", g.rows())));
        }
    }
    Ok(n)
}

/// Soft labels from the current embeddings (treated as constants downstream).
pub fn label_set(emb: &BatchEmbeddings, clinical: &Matrix, cfg: &LossConfig) -> Result<LabelSet> {
    cfg.validate()?;
    let n = check_shapes(emb, cfg)?;
    let mut labels = BTreeMap::new();
    for s in cfg.sorted_streams() {
        let m = match s {
            Stream::Identity => Matrix::identity(n),
            Stream::Text => soft_labels(&similarity_matrix(&emb.texts)?, cfg.tau_t, s)?.values,
            Stream::Graph => {
                soft_labels(&similarity_matrix(modality_rows(emb, Modality::Graph)?)?, cfg.tau_g, s)?.values
            }
            Stream::Clinical => {
                if clinical.rows() != n {
                    return Err(Error::Config(format!(
                        "clinical stream needs {n} label rows, got {}",
                        clinical.rows()
                    )));
                }
                soft_labels(&similarity_matrix(clinical)?, cfg.tau_c, s)?.values
            }
        };
        labels.insert(s, m);
    }
    Ok(LabelSet { labels })
}

struct Direction {
    from: Modality,
    to: Modality,
    nq: usize,
    nk: usize,
}

fn directions(emb: &BatchEmbeddings, cfg: &LossConfig) -> Vec<Direction> {
    let b = emb.images.rows();
    let n = emb.texts.rows();
    let mods = cfg.sorted_modalities();
    let mut out = Vec::new();
    for &from in &mods {
        for &to in &mods {
            if from == to {
                continue;
            }
            let nq = if from == Modality::Image || to == Modality::Image { b } else { n };
            let nk = if to == Modality::Image { b } else { n };
            out.push(Direction { from, to, nq, nk });
        }
    }
    out
}

struct DirectionResult {
    terms: Vec<(TermKey, f64)>,
    /// dL/dlogits, already weighted and divided by τ and the query count.
    grad_logits: Option<Matrix>,
}

fn eval_direction(
    d: &Direction,
    emb: &BatchEmbeddings,
    labels: &LabelSet,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<DirectionResult> {
    let q = modality_rows(emb, d.from)?.slice_rows(0, d.nq);
    let k = modality_rows(emb, d.to)?.slice_rows(0, d.nk);
    let probs = cross_modal_probs(&q, &k, cfg.temperature)?;
    let mut terms = Vec::new();
    let mut grad = with_grad.then(|| Matrix::zeros(d.nq, d.nk));
    for (&stream, full) in &labels.labels {
        let y = label_slice(full, d.nq, d.nk);
        let value = direction_loss(&probs, &y)?;
        terms.push((TermKey { from: d.from, to: d.to, stream }, value));
        if let Some(g) = grad.as_mut() {
            let scale = cfg.weight(stream) / (d.nq as f64 * cfg.temperature);
            for ((o, p), t) in g.data_mut().iter_mut().zip(probs.data()).zip(y.data()) {
                *o += scale * (p - t);
            }
        }
    }
    Ok(DirectionResult { terms, grad_logits: grad })
}

fn evaluate(
    emb: &BatchEmbeddings,
    labels: &LabelSet,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(LossOutput, Vec<(Direction, Option<Matrix>)>)> {
    cfg.validate()?;
    let n = check_shapes(emb, cfg)?;
    for s in cfg.sorted_streams() {
        match labels.labels.get(&s) {
            Some(m) if m.shape() == (n, n) => {}
            _ => return Err(Error::Config(format!("missing {n}x{n} labels for stream {}", s.name()))),
        }
    }
    let dirs = directions(emb, cfg);
    let results: Vec<DirectionResult> =
        dirs.par_iter().map(|d| eval_direction(d, emb, labels, cfg, with_grad)).collect::<Result<_>>()?;
    let mut terms = BTreeMap::new();
    let mut grads = Vec::new();
    for (d, r) in dirs.into_iter().zip(results) {
        terms.extend(r.terms.into_iter().filter(|(k, _)| cfg.streams.contains(&k.stream)));
        grads.push((d, r.grad_logits));
    }
    let total = terms.iter().map(|(k, v)| cfg.weight(k.stream) * v).sum();
    Ok((LossOutput { total, terms }, grads))
}

pub fn total_loss_with_labels(emb: &BatchEmbeddings, labels: &LabelSet, cfg: &LossConfig) -> Result<LossOutput> {
    Ok(evaluate(emb, labels, cfg, false)?.0)
}

/// Σ over ordered active modality pairs and active streams of `w_s · KL`.
pub fn total_loss(emb: &BatchEmbeddings, clinical: &Matrix, cfg: &LossConfig) -> Result<LossOutput> {
    total_loss_with_labels(emb, &label_set(emb, clinical, cfg)?, cfg)
}

/// Loss and gradients w.r.t. every embedding row, labels held constant.
pub fn loss_gradients_with_labels(
    emb: &BatchEmbeddings,
    labels: &LabelSet,
    cfg: &LossConfig,
) -> Result<(LossOutput, EmbeddingGrads)> {
    let (out, dirs) = evaluate(emb, labels, cfg, true)?;
    let zeros = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
    let mut g_img = zeros(&emb.images);
    let mut g_txt = zeros(&emb.texts);
    let mut g_graph = emb.graphs.as_ref().map(zeros);
    for (d, gz) in dirs {
        let gz = gz.expect("gradient requested");
        let q = modality_rows(emb, d.from)?.slice_rows(0, d.nq);
        let k = modality_rows(emb, d.to)?.slice_rows(0, d.nk);
        let dq = matmul(&gz, &k)?;
        let dk = matmul_at(&gz, &q)?;
        for (m, delta) in [(d.from, dq), (d.to, dk)] {
            let target = match m {
                Modality::Image => &mut g_img,
                Modality::Text => &mut g_txt,
                Modality::Graph => g_graph.as_mut().expect("graph rows checked"),
            };
            for r in 0..delta.rows() {
                for (o, v) in target.row_mut(r).iter_mut().zip(delta.row(r)) {
                    *o += v;
                }
            }
        }
    }
    Ok((out, EmbeddingGrads { images: g_img, texts: g_txt, graphs: g_graph }))
}

pub fn loss_gradients(
    emb: &BatchEmbeddings,
    clinical: &Matrix,
    cfg: &LossConfig,
) -> Result<(LossOutput, EmbeddingGrads)> {
    loss_gradients_with_labels(emb, &label_set(emb, clinical, cfg)?, cfg)
}

/// Standard one-hot InfoNCE over a query/key block (diagonal positives).
pub fn infonce(queries: &Matrix, keys: &Matrix, temperature: f64) -> Result<f64> {
    let probs = cross_modal_probs(queries, keys, temperature)?;
    let y = Matrix::identity(queries.rows()).block(queries.rows(), keys.rows());
    direction_loss(&probs, &y)
}
