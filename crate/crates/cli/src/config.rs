//! Effective configuration: file sections, dotted `--set` overrides, then flags.

use std::path::{Path, PathBuf};

use clinalign::encoders::EncoderConfig;
use clinalign::soft_contrastive::LossConfig;
use clinalign::synth_corpus::CorpusSpec;
use clinalign::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Trailing corpus samples reserved for evaluation; 0 means train and
    /// evaluate on the whole corpus.
    pub holdout: usize,
    pub retrieval_k: usize,
    /// Abnormal reports placed next to the single normal report.
    pub normal_pool: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { holdout: 0, retrieval_k: 5, normal_pool: 999, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub corpus: CorpusSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub paths: Paths,
    pub eval: EvalSettings,
}

impl CliConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.train.seed = seed;
        self.encoder.seed = seed;
        self.eval.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot render config: {e}")))
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back to
/// a bare string so paths and names need no quoting.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed key {key:?}")));
    }
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for s in sections {
        let entry = table.entry(s.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("{key}: {s} is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// File (if any) then overrides, validated against the typed schema.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<CliConfig, CliError> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| CliError::Validation(format!("config: {e}")))
}
