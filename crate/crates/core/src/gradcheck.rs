//! End-to-end gradient verification: analytic loss and encoder gradients
//! against central differences on a small seeded batch.
//!
//! Soft labels are computed once from the unperturbed embeddings and frozen,
//! matching the stop-gradient treatment used in training.

use serde::Serialize;

use crate::encoders::{backward, forward, BatchEmbeddings, BatchInputs, EncoderConfig, EncoderParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_check, CheckedParam, GradCheckReport, Matrix};
use crate::report_nlp::Lexicon;
use crate::seed::derive_seed;
use crate::soft_contrastive::{label_set, loss_gradients_with_labels, total_loss_with_labels, LabelSet, LossConfig};
use crate::synth_corpus::{generate_corpus, CorpusSpec};
use crate::train::{prepare_samples, BatchBuilder};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckSetup {
    pub seed: u64,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub epsilon: f64,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self { seed: 0, batch_size: 4, embed_dim: 8, epsilon: 1e-5 }
    }
}

impl GradcheckSetup {
    /// Encoder small enough that every parameter entry can be perturbed.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            feature_dim: 8,
            text_hash_dim: 64,
            graph_hidden: 8,
            embed_dim: self.embed_dim,
            seed: derive_seed(self.seed, &[0x6763, 1]),
            ..EncoderConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckOutcome {
    pub setup: GradcheckSetup,
    /// Weighted KL terms active in the checked loss.
    pub terms: usize,
    pub embeddings: GradCheckReport,
    pub parameters: GradCheckReport,
}

impl GradcheckOutcome {
    pub fn max_rel_error(&self) -> f64 {
        self.embeddings.max_rel_error.max(self.parameters.max_rel_error)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

fn embeddings_from(mats: &[Matrix]) -> BatchEmbeddings {
    BatchEmbeddings { images: mats[0].clone(), texts: mats[1].clone(), graphs: Some(mats[2].clone()) }
}

fn frozen_loss(emb: &BatchEmbeddings, labels: &LabelSet, cfg: &LossConfig) -> f64 {
    total_loss_with_labels(emb, labels, cfg).map(|o| o.total).unwrap_or(f64::NAN)
}

fn params_from(template: &EncoderParams, mats: &[Matrix]) -> EncoderParams {
    let mut p = template.clone();
    for (dst, src) in p.tensors_mut().into_iter().zip(mats) {
        *dst = src.clone();
    }
    p
}

/// Seeded batch of `batch_size` samples with hard negatives.
pub fn gradcheck_batch(setup: &GradcheckSetup, lexicon: &Lexicon) -> Result<(BatchInputs, Matrix)> {
    if setup.batch_size < 2 {
        return Err(Error::invalid(format!("gradcheck batch must be >= 2, got {}", setup.batch_size)));
    }
    let enc = setup.encoder_config();
    let spec = CorpusSpec {
        n_samples: (8 * setup.batch_size).max(32),
        normal_fraction: 0.4,
        feature_dim: enc.feature_dim,
        seed: derive_seed(setup.seed, &[0x6763, 0]),
        ..CorpusSpec::default()
    };
    let samples = prepare_samples(&generate_corpus(&spec, lexicon)?, lexicon)?;
    let idx: Vec<usize> = (0..setup.batch_size).collect();
    BatchBuilder::new(&samples, lexicon, enc.text_hash_dim).build(
        &idx,
        derive_seed(setup.seed, &[0x6763, 2]),
        &LossConfig::default(),
        true,
    )
}

/// Checks every embedding entry of the full three-modality loss and every
/// encoder parameter through forward, loss and backward.
pub fn run_gradcheck(setup: &GradcheckSetup, lexicon: &Lexicon) -> Result<GradcheckOutcome> {
    let cfg = LossConfig::default();
    let (inputs, clinical) = gradcheck_batch(setup, lexicon)?;
    let params = EncoderParams::init(setup.encoder_config())?;
    let (emb, cache) = forward(&params, &inputs)?;
    let labels = label_set(&emb, &clinical, &cfg)?;
    let (out, grads) = loss_gradients_with_labels(&emb, &labels, &cfg)?;

    let graphs = emb.graphs.clone().ok_or_else(|| Error::invalid("graph embeddings missing"))?;
    let g_graphs = grads.graphs.clone().ok_or_else(|| Error::invalid("graph gradients missing"))?;
    let emb_params = vec![
        CheckedParam { name: "v".into(), value: emb.images.clone(), analytic: grads.images.clone() },
        CheckedParam { name: "T".into(), value: emb.texts.clone(), analytic: grads.texts.clone() },
        CheckedParam { name: "G".into(), value: graphs, analytic: g_graphs },
    ];
    let embeddings =
        finite_diff_check(&emb_params, setup.epsilon, |m| frozen_loss(&embeddings_from(m), &labels, &cfg))?;

    let param_grads = backward(&params, &inputs, &cache, &grads)?;
    let checked: Vec<CheckedParam> = PARAM_NAMES
        .iter()
        .zip(params.tensors())
        .zip(param_grads.tensors())
        .map(|((name, v), g)| CheckedParam { name: (*name).into(), value: v.clone(), analytic: g.clone() })
        .collect();
    let parameters = finite_diff_check(&checked, setup.epsilon, |m| {
        forward(&params_from(&params, m), &inputs)
            .map(|(e, _)| frozen_loss(&e, &labels, &cfg))
            .unwrap_or(f64::NAN)
    })?;
    Ok(GradcheckOutcome { setup: *setup, terms: out.terms.len(), embeddings, parameters })
}
