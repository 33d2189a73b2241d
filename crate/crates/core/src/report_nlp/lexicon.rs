use std::path::Path;
use std::sync::OnceLock;

use serde::Deserialize;

use super::{tokenize, EntityId, ENTITY_COUNT};
use crate::error::{Error, Result};

pub const LEXICON_FORMAT_VERSION: u32 = 1;

const DEFAULT_LEXICON: &str = include_str!("default_lexicon.toml");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconFile {
    format_version: u32,
    entity: Vec<EntityEntry>,
    anatomy: AnatomyEntry,
    cues: CueEntry,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityEntry {
    id: String,
    canonical: String,
    #[serde(default)]
    mediastinal: bool,
    phrases: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnatomyEntry {
    phrases: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CueEntry {
    negation_before: Vec<String>,
    negation_after: Vec<String>,
    mediastinal_normal: Vec<String>,
    uncertainty: Vec<String>,
    clause_breaks: Vec<String>,
    abbreviations: Vec<String>,
}

/// Token sequence of a phrase.
pub type Phrase = Vec<String>;

#[derive(Debug, Clone)]
pub struct EntityLexiconEntry {
    pub canonical: String,
    pub mediastinal: bool,
    pub phrases: Vec<Phrase>,
}

/// Rule lexicon: entity phrases, anatomy phrases and cue lists.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entities: Vec<EntityLexiconEntry>,
    pub(crate) anatomy: Vec<Phrase>,
    pub(crate) negation_before: Vec<Phrase>,
    pub(crate) negation_after: Vec<Phrase>,
    pub(crate) mediastinal_normal: Vec<Phrase>,
    pub(crate) uncertainty: Vec<Phrase>,
    pub(crate) clause_breaks: Vec<String>,
    pub(crate) abbreviations: Vec<String>,
}

fn phrases(list: &[String]) -> Result<Vec<Phrase>> {
    list.iter()
        .map(|p| {
            let toks = tokenize(p);
            if toks.is_empty() {
                Err(Error::Config(format!("lexicon phrase {p:?} has no tokens")))
            } else {
                Ok(toks)
            }
        })
        .collect()
}

impl Lexicon {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: LexiconFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("lexicon: {e}")))?;
        if file.format_version != LEXICON_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: file.format_version,
                expected: LEXICON_FORMAT_VERSION,
            });
        }
        let mut slots: Vec<Option<EntityLexiconEntry>> = vec![None; ENTITY_COUNT];
        for e in &file.entity {
            let id = EntityId::from_name(&e.id)
                .ok_or_else(|| Error::Config(format!("unknown lexicon entity {:?}", e.id)))?;
            if slots[id.index()].is_some() {
                return Err(Error::Config(format!("duplicate lexicon entity {:?}", e.id)));
            }
            if e.canonical.trim().is_empty() {
                return Err(Error::Config(format!("empty canonical phrase for {:?}", e.id)));
            }
            slots[id.index()] = Some(EntityLexiconEntry {
                canonical: e.canonical.trim().to_string(),
                mediastinal: e.mediastinal,
                phrases: phrases(&e.phrases)?,
            });
        }
        let entities = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| {
                    Error::Config(format!("lexicon is missing entity {:?}", EntityId::ALL[i].name()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entities,
            anatomy: phrases(&file.anatomy.phrases)?,
            negation_before: phrases(&file.cues.negation_before)?,
            negation_after: phrases(&file.cues.negation_after)?,
            mediastinal_normal: phrases(&file.cues.mediastinal_normal)?,
            uncertainty: phrases(&file.cues.uncertainty)?,
            clause_breaks: file.cues.clause_breaks.iter().map(|s| s.to_lowercase()).collect(),
            abbreviations: file.cues.abbreviations.iter().map(|s| s.to_lowercase()).collect(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The embedded default lexicon.
    pub fn default_ref() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(|| Lexicon::from_toml_str(DEFAULT_LEXICON).expect("embedded lexicon is valid"))
    }

    pub fn default_toml() -> &'static str {
        DEFAULT_LEXICON
    }

    pub fn entry(&self, id: EntityId) -> &EntityLexiconEntry {
        &self.entities[id.index()]
    }

    pub fn canonical(&self, id: EntityId) -> &str {
        &self.entities[id.index()].canonical
    }

    pub fn is_mediastinal(&self, id: EntityId) -> bool {
        self.entities[id.index()].mediastinal
    }

    pub(crate) fn entity_phrases(&self) -> impl Iterator<Item = (EntityId, &Phrase)> {
        self.entities
            .iter()
            .enumerate()
            .flat_map(|(i, e)| e.phrases.iter().map(move |p| (EntityId::ALL[i], p)))
    }

    pub(crate) fn is_anatomy_token(&self, token: &str) -> bool {
        self.anatomy.iter().any(|p| p.iter().any(|t| t == token))
    }
}
