//! Training loop: shuffled batches, per-step hard negatives and sentence
//! shuffling, encoder forward, soft-label loss, backward and an optimizer step.
//!
//! The trajectory is a pure function of (corpus, configs, seed): every random
//! draw comes from a seed derived from (seed, epoch, batch, sample), and every
//! parallel reduction has a fixed order.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    backward, forward, text_features, BatchInputs, Checkpoint, EncoderConfig, EncoderParams, GraphInput,
};
use crate::error::{Error, Result};
use crate::graph_builder::extract_graph;
use crate::negation_forge::{make_hard_negative, shuffle_sentences, EntityWeights};
use crate::numerics::Matrix;
use crate::report_nlp::{ClinicalLabelVector, Lexicon, Report};
use crate::seed;
use crate::soft_contrastive::{clinical_matrix, loss_gradients, LossConfig};
use crate::synth_corpus::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup to the base rate, then cosine decay to 0 at the last step.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Shuffle report sentences before text encoding.
    pub shuffle_sentences: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 10,
            learning_rate: 1e-3,
            warmup_steps: 20,
            schedule: Schedule::Cosine,
            optimizer: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            shuffle_sentences: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must be in [0,1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }

    /// Number of batches per epoch; a trailing batch smaller than 2 is dropped.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        let full = n / self.batch_size;
        if n % self.batch_size >= 2 { full + 1 } else { full }
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let base = self.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let span = total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// AdamW (decoupled weight decay) or plain SGD with decoupled decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: TrainConfig,
    m: Option<EncoderParams>,
    v: Option<EncoderParams>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { cfg: cfg.clone(), m: None, v: None, t: 0 }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) {
        let c = &self.cfg;
        self.t += 1;
        match c.optimizer {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * (gv + c.weight_decay * *pv);
                    }
                }
            }
            OptimizerKind::Adamw => {
                let m = self.m.get_or_insert_with(|| params.zeros_like());
                let v = self.v.get_or_insert_with(|| params.zeros_like());
                let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                let tensors = params.tensors_mut().into_iter().zip(grads.tensors()).zip(m.tensors_mut()).zip(v.tensors_mut());
                for (((p, g), m), v) in tensors {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut());
                    for (((pv, &gv), mv), vv) in it {
                        *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                        *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                        let update = (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
                        *pv -= lr * (update + c.weight_decay * *pv);
                    }
                }
            }
        }
    }
}

/// A parsed corpus sample.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub features: Vec<f64>,
    pub report: Report,
    pub labels: ClinicalLabelVector,
}

pub fn prepare_samples(samples: &[Sample], lexicon: &Lexicon) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| {
            let report = s.report(lexicon)?;
            let labels = report.labels();
            Ok(PreparedSample { id: s.id.clone(), features: s.image_features.clone(), report, labels })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub terms: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: EncoderParams,
    pub log: Vec<TrainRecord>,
}

impl TrainOutput {
    pub fn checkpoint(&self, loss: &LossConfig, train: &TrainConfig) -> Checkpoint {
        Checkpoint { params: self.params.clone(), meta: serde_json::json!({ "loss": loss, "train": train }) }
    }
}

pub fn write_metrics_log<W: Write>(mut out: W, log: &[TrainRecord]) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_metrics_log_file(path: &Path, log: &[TrainRecord]) -> Result<()> {
    write_metrics_log(std::io::BufWriter::new(std::fs::File::create(path)?), log)
}

/// Shared state for building batches.
pub struct BatchBuilder<'a> {
    samples: &'a [PreparedSample],
    pool: Vec<Report>,
    weights: EntityWeights,
    lexicon: &'a Lexicon,
    text_dim: usize,
}

impl<'a> BatchBuilder<'a> {
    pub fn new(samples: &'a [PreparedSample], lexicon: &'a Lexicon, text_dim: usize) -> Self {
        let pool = samples.iter().filter(|s| s.labels.positive_count() == 1).map(|s| s.report.clone()).collect();
        let weights = EntityWeights::empirical(samples.iter().map(|s| &s.report));
        Self { samples, pool, weights, lexicon, text_dim }
    }

    /// Encoder inputs and clinical rows for the given sample indices.
    pub fn build(&self, idx: &[usize], step_seed: u64, loss: &LossConfig, shuffle: bool) -> Result<(BatchInputs, Matrix)> {
        let b = idx.len();
        let d_feat = self.samples[idx[0]].features.len();
        let mut images = Matrix::zeros(b, d_feat);
        for (r, &i) in idx.iter().enumerate() {
            let f = &self.samples[i].features;
            if f.len() != d_feat {
                return Err(Error::invalid(format!("sample {} has {} features, expected {d_feat}", self.samples[i].id, f.len())));
            }
            images.row_mut(r).copy_from_slice(f);
        }
        let mut reports: Vec<Report> = idx.iter().map(|&i| self.samples[i].report.clone()).collect();
        if loss.hard_negatives {
            let negs: Vec<Report> = idx
                .par_iter()
                .enumerate()
                .map(|(r, &i)| {
                    let s = seed::derive_seed(step_seed, &[0x6e, r as u64]);
                    make_hard_negative(&self.samples[i].report, s, &self.pool, &self.weights, self.lexicon)
                        .map(|h| h.report)
                })
                .collect::<Result<_>>()?;
            reports.extend(negs);
        }
        if shuffle {
            reports = reports
                .iter()
                .enumerate()
                .map(|(r, rep)| shuffle_sentences(rep, seed::derive_seed(step_seed, &[0x73, r as u64])))
                .collect();
        }
        let texts = reports.par_iter().map(|r| text_features(r, self.text_dim)).collect();
        let graphs = if loss.uses_graph() {
            reports.par_iter().map(|r| GraphInput::from_graph(&extract_graph(r, self.lexicon))).collect()
        } else {
            Vec::new()
        };
        let labels: Vec<ClinicalLabelVector> = reports.iter().map(Report::labels).collect();
        Ok((BatchInputs { images, texts, graphs }, clinical_matrix(&labels)))
    }
}

pub fn train(
    samples: &[PreparedSample],
    encoder: &EncoderConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
    lexicon: &Lexicon,
) -> Result<TrainOutput> {
    train_with_init(samples, EncoderParams::init(*encoder)?, loss, cfg, lexicon)
}

pub fn train_with_init(
    samples: &[PreparedSample],
    mut params: EncoderParams,
    loss: &LossConfig,
    cfg: &TrainConfig,
    lexicon: &Lexicon,
) -> Result<TrainOutput> {
    cfg.validate()?;
    loss.validate()?;
    if samples.len() < 2 {
        return Err(Error::Config("training needs at least 2 samples".into()));
    }
    let builder = BatchBuilder::new(samples, lexicon, params.config.text_hash_dim);
    let per_epoch = cfg.steps_per_epoch(samples.len());
    let total_steps = per_epoch * cfg.epochs;
    let mut opt = Optimizer::new(cfg);
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[0xe0, epoch as u64]));
        for batch in order.chunks(cfg.batch_size).take(per_epoch) {
            let step_seed = seed::derive_seed(cfg.seed, &[0x57e9, step as u64]);
            let (inputs, clinical) = builder.build(batch, step_seed, loss, cfg.shuffle_sentences)?;
            let (emb, cache) = forward(&params, &inputs)?;
            let ids = || batch.iter().map(|&i| samples[i].id.clone()).collect::<Vec<_>>();
            let (out, emb_grads) = match loss_gradients(&emb, &clinical, loss) {
                Ok(r) => r,
                Err(Error::NumericDomain(_)) => return Err(Error::NonFiniteLoss { step, sample_ids: ids() }),
                Err(e) => return Err(e),
            };
            if !out.total.is_finite() {
                return Err(Error::NonFiniteLoss { step, sample_ids: ids() });
            }
            let grads = backward(&params, &inputs, &cache, &emb_grads)?;
            let lr = cfg.lr_at(step, total_steps);
            opt.step(&mut params, &grads, lr);
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss { step, sample_ids: ids() });
            }
            let rec = out.record(step);
            log.push(TrainRecord { step, epoch, lr, total: rec.total, terms: rec.terms });
            step += 1;
        }
    }
    Ok(TrainOutput { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_corpus::{generate_corpus, CorpusSpec};

    fn tiny() -> (Vec<PreparedSample>, EncoderConfig) {
        let lex = Lexicon::default_ref();
        let spec = CorpusSpec { n_samples: 24, feature_dim: 8, seed: 3, ..CorpusSpec::default() };
        let samples = prepare_samples(&generate_corpus(&spec, lex).unwrap(), lex).unwrap();
        let enc = EncoderConfig { feature_dim: 8, text_hash_dim: 256, graph_hidden: 8, embed_dim: 8, seed: 1, ..EncoderConfig::default() };
        (samples, enc)
    }

    #[test]
    fn schedule_shapes() {
        let c = TrainConfig { learning_rate: 1.0, warmup_steps: 4, ..TrainConfig::default() };
        assert_eq!(c.lr_at(0, 20), 0.25);
        assert_eq!(c.lr_at(3, 20), 1.0);
        assert_eq!(c.lr_at(4, 20), 1.0);
        assert!(c.lr_at(19, 20) < 0.02);
        let k = TrainConfig { schedule: Schedule::Constant, warmup_steps: 0, ..c };
        assert_eq!(k.lr_at(17, 20), 1.0);
        assert_eq!(TrainConfig { batch_size: 8, ..k.clone() }.steps_per_epoch(17), 2);
        assert_eq!(TrainConfig { batch_size: 8, ..k }.steps_per_epoch(18), 3);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (samples, enc) = tiny();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let init = EncoderParams::init(enc).unwrap();
        let out = train_with_init(&samples, init.clone(), &LossConfig::default(), &cfg, Lexicon::default_ref()).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let (samples, enc) = tiny();
        let cfg = TrainConfig { epochs: 2, batch_size: 6, ..TrainConfig::default() };
        let a = train(&samples, &enc, &LossConfig::default(), &cfg, Lexicon::default_ref()).unwrap();
        let b = train(&samples, &enc, &LossConfig::default(), &cfg, Lexicon::default_ref()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
    }
}
