//! Rule-based report processing: sentence splitting, tokenization,
//! negation/uncertainty scope and the 13+1 clinical label vector.

mod lexicon;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use lexicon::{EntityLexiconEntry, Lexicon, Phrase, LEXICON_FORMAT_VERSION};

/// Number of named clinical entities.
pub const ENTITY_COUNT: usize = 13;
/// Entities plus the derived "No Findings" flag.
pub const LABEL_DIM: usize = ENTITY_COUNT + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EntityId {
    Cardiomegaly,
    LungOpacity,
    Atelectasis,
    LungLesion,
    PleuralEffusion,
    Fracture,
    SupportDevices,
    EnlargedCardiomediastinum,
    PleuralOther,
    Consolidation,
    Edema,
    Pneumothorax,
    Pneumonia,
}

impl EntityId {
    /// In label-vector order.
    pub const ALL: [EntityId; ENTITY_COUNT] = [
        EntityId::Cardiomegaly,
        EntityId::LungOpacity,
        EntityId::Atelectasis,
        EntityId::LungLesion,
        EntityId::PleuralEffusion,
        EntityId::Fracture,
        EntityId::SupportDevices,
        EntityId::EnlargedCardiomediastinum,
        EntityId::PleuralOther,
        EntityId::Consolidation,
        EntityId::Edema,
        EntityId::Pneumothorax,
        EntityId::Pneumonia,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityId::Cardiomegaly => "Cardiomegaly",
            EntityId::LungOpacity => "Lung Opacity",
            EntityId::Atelectasis => "Atelectasis",
            EntityId::LungLesion => "Lung Lesion",
            EntityId::PleuralEffusion => "Pleural Effusion",
            EntityId::Fracture => "Fracture",
            EntityId::SupportDevices => "Support Devices",
            EntityId::EnlargedCardiomediastinum => "Enlarged Cardiomediastinum",
            EntityId::PleuralOther => "Pleural Other",
            EntityId::Consolidation => "Consolidation",
            EntityId::Edema => "Edema",
            EntityId::Pneumothorax => "Pneumothorax",
            EntityId::Pneumonia => "Pneumonia",
        }
    }

    /// Accepts the display name case-insensitively, with spaces, underscores or hyphens.
    pub fn from_name(name: &str) -> Option<EntityId> {
        let key: String = name
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        EntityId::ALL.into_iter().find(|e| {
            e.name().chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).eq(key.chars())
        })
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for EntityId {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        EntityId::from_name(&s).ok_or_else(|| format!("unknown entity {s:?}"))
    }
}

impl From<EntityId> for String {
    fn from(e: EntityId) -> String {
        e.name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negated,
    Uncertain,
}

/// One lexicon hit inside a sentence; `start..end` indexes `Sentence::tokens`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub entity: EntityId,
    pub polarity: Polarity,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub tokens: Vec<String>,
    /// Clause index of each token.
    pub clauses: Vec<usize>,
    pub mentions: Vec<Mention>,
}

impl Sentence {
    pub fn analyze(text: &str, lexicon: &Lexicon) -> Self {
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        let (tokens, clauses) = tokenize_with_clauses(&text, &lexicon.clause_breaks);
        let mut sentence = Sentence { text, tokens, clauses, mentions: Vec::new() };
        sentence.mentions = detect_negation_scope(&sentence, lexicon);
        sentence
    }

    /// Distinct (entity, polarity) pairs, sorted.
    pub fn entities(&self) -> Vec<(EntityId, Polarity)> {
        let mut v: Vec<_> = self.mentions.iter().map(|m| (m.entity, m.polarity)).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn mentions_entity(&self, entity: EntityId) -> bool {
        self.mentions.iter().any(|m| m.entity == entity)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub id: String,
    pub sentences: Vec<Sentence>,
}

impl Report {
    /// Parses free text with the default lexicon.
    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self> {
        Self::parse_with(id, text, Lexicon::default_ref())
    }

    pub fn parse_with(id: impl Into<String>, text: &str, lexicon: &Lexicon) -> Result<Self> {
        let parts = split_sentence_texts(text, lexicon)?;
        Ok(Self::from_sentence_texts(id, &parts, lexicon))
    }

    /// Builds a report from already split sentence strings (at least one).
    pub fn from_sentence_texts<S: AsRef<str>>(id: impl Into<String>, parts: &[S], lexicon: &Lexicon) -> Self {
        assert!(!parts.is_empty(), "a report needs at least one sentence");
        Report {
            id: id.into(),
            sentences: parts.iter().map(|s| Sentence::analyze(s.as_ref(), lexicon)).collect(),
        }
    }

    /// Sentences joined with single spaces.
    pub fn text(&self) -> String {
        self.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn labels(&self) -> ClinicalLabelVector {
        label_report(self)
    }

    pub fn positive_entities(&self) -> Vec<EntityId> {
        self.labels().positive_entities()
    }

    /// Same sentences in the given order.
    pub fn reordered(&self, order: &[usize]) -> Report {
        assert_eq!(order.len(), self.sentences.len());
        Report { id: self.id.clone(), sentences: order.iter().map(|&i| self.sentences[i].clone()).collect() }
    }
}

/// Splits `text` into a [`Report`] using the default lexicon's abbreviation list.
pub fn split_sentences(text: &str) -> Result<Report> {
    Report::parse("", text)
}

fn split_sentence_texts(text: &str, lexicon: &Lexicon) -> Result<Vec<String>> {
    if text.trim().is_empty() {
        return Err(Error::invalid("empty report text"));
    }
    let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let chars: Vec<char> = normalized.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if matches!(chars[i], '.' | '!' | '?') {
            let mut end = i + 1;
            while end < chars.len() && matches!(chars[end], '.' | '!' | '?') {
                end += 1;
            }
            let at_boundary = end == chars.len() || chars[end] == ' ';
            if at_boundary && !(chars[i] == '.' && ends_with_abbreviation(&chars[start..i], lexicon)) {
                let s: String = chars[start..end].iter().collect();
                let s = s.trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                start = end;
            }
            i = end;
        } else {
            i += 1;
        }
    }
    let tail: String = chars[start..].iter().collect();
    if !tail.trim().is_empty() {
        out.push(tail.trim().to_string());
    }
    Ok(out)
}

fn ends_with_abbreviation(before: &[char], lexicon: &Lexicon) -> bool {
    let word: String = before.iter().rev().take_while(|c| !c.is_whitespace()).collect::<Vec<_>>().into_iter().rev().collect();
    let word = word.trim_start_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    !word.is_empty() && lexicon.abbreviations.iter().any(|a| *a == word)
}

/// Lowercase tokens split on non-alphanumerics; a hyphen between two
/// alphanumerics keeps the word joined.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_clauses(text, &[]).0
}

fn tokenize_with_clauses(text: &str, clause_breaks: &[String]) -> (Vec<String>, Vec<usize>) {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut clauses = Vec::new();
    let mut clause = 0;
    let mut cur = String::new();
    let flush = |cur: &mut String, tokens: &mut Vec<String>, clauses: &mut Vec<usize>, clause: &mut usize| {
        if cur.is_empty() {
            return;
        }
        let tok = std::mem::take(cur);
        if clause_breaks.iter().any(|b| *b == tok) {
            *clause += 1;
            tokens.push(tok);
            clauses.push(*clause);
        } else {
            tokens.push(tok);
            clauses.push(*clause);
        }
    };
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if c == '-'
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            cur.push('-');
        } else {
            flush(&mut cur, &mut tokens, &mut clauses, &mut clause);
            if matches!(c, ',' | ';' | ':') {
                clause += 1;
            }
        }
    }
    flush(&mut cur, &mut tokens, &mut clauses, &mut clause);
    (tokens, clauses)
}

fn matches_at(tokens: &[String], pos: usize, phrase: &[String]) -> bool {
    pos + phrase.len() <= tokens.len() && tokens[pos..pos + phrase.len()] == *phrase
}

/// All (start, end) occurrences of any phrase in the list.
fn find_all(tokens: &[String], phrases: &[Phrase]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for pos in 0..tokens.len() {
        for p in phrases {
            if matches_at(tokens, pos, p) {
                out.push((pos, pos + p.len()));
            }
        }
    }
    out
}

/// Greedy leftmost-longest entity phrase matches.
fn entity_matches(tokens: &[String], lexicon: &Lexicon) -> Vec<(EntityId, usize, usize)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let best = lexicon
            .entity_phrases()
            .filter(|(_, p)| matches_at(tokens, pos, p))
            .max_by_key(|(e, p)| (p.len(), std::cmp::Reverse(e.index())));
        match best {
            Some((e, p)) => {
                out.push((e, pos, pos + p.len()));
                pos += p.len();
            }
            None => pos += 1,
        }
    }
    out
}

/// Anatomy spans: maximal runs of consecutive anatomy tokens.
pub(crate) fn anatomy_runs(sentence: &Sentence, lexicon: &Lexicon) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    let toks = &sentence.tokens;
    while i < toks.len() {
        if lexicon.is_anatomy_token(&toks[i]) {
            let start = i;
            while i < toks.len()
                && lexicon.is_anatomy_token(&toks[i])
                && sentence.clauses[i] == sentence.clauses[start]
            {
                i += 1;
            }
            runs.push((start, i));
        } else {
            i += 1;
        }
    }
    runs
}

/// Polarity of every entity mention in the sentence.
///
/// A mention is `uncertain` when an uncertainty cue shares its clause,
/// `negated` when a before-cue precedes it or an after-cue follows it within
/// the clause (mediastinal entities are also negated by "normal" cues anywhere
/// in the clause), and `positive` otherwise.
pub fn detect_negation_scope(sentence: &Sentence, lexicon: &Lexicon) -> Vec<Mention> {
    let toks = &sentence.tokens;
    let clause = |i: usize| sentence.clauses[i];
    let before = find_all(toks, &lexicon.negation_before);
    let after = find_all(toks, &lexicon.negation_after);
    let mediastinal = find_all(toks, &lexicon.mediastinal_normal);
    let uncertain = find_all(toks, &lexicon.uncertainty);

    entity_matches(toks, lexicon)
        .into_iter()
        .map(|(entity, start, end)| {
            let c = clause(start);
            let polarity = if uncertain.iter().any(|&(s, _)| clause(s) == c) {
                Polarity::Uncertain
            } else if before.iter().any(|&(s, e)| e <= start && clause(s) == c)
                || after.iter().any(|&(s, _)| s >= end && clause(s) == c)
                || (lexicon.is_mediastinal(entity)
                    && mediastinal.iter().any(|&(s, e)| (e <= start || s >= end) && clause(s) == c))
            {
                Polarity::Negated
            } else {
                Polarity::Positive
            };
            Mention { entity, polarity, start, end }
        })
        .collect()
}

/// 13 entity flags followed by the derived "No Findings" flag. Serialized as
/// the 13-character entity bit string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClinicalLabelVector {
    flags: [bool; LABEL_DIM],
}

impl ClinicalLabelVector {
    pub fn from_entities(entities: impl IntoIterator<Item = EntityId>) -> Self {
        let mut flags = [false; LABEL_DIM];
        for e in entities {
            flags[e.index()] = true;
        }
        flags[ENTITY_COUNT] = flags[..ENTITY_COUNT].iter().all(|f| !f);
        Self { flags }
    }

    pub fn normal() -> Self {
        Self::from_entities([])
    }

    pub fn get(&self, e: EntityId) -> bool {
        self.flags[e.index()]
    }

    pub fn no_findings(&self) -> bool {
        self.flags[ENTITY_COUNT]
    }

    pub fn flags(&self) -> &[bool; LABEL_DIM] {
        &self.flags
    }

    pub fn positive_entities(&self) -> Vec<EntityId> {
        EntityId::ALL.into_iter().filter(|e| self.get(*e)).collect()
    }

    pub fn positive_count(&self) -> usize {
        self.flags[..ENTITY_COUNT].iter().filter(|f| **f).count()
    }

    pub fn without(&self, e: EntityId) -> Self {
        Self::from_entities(self.positive_entities().into_iter().filter(|x| *x != e))
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.flags.iter().zip(&other.flags).filter(|(a, b)| a != b).count()
    }

    /// Entity flags as a `0`/`1` string (13 characters, no "No Findings").
    pub fn entity_bits(&self) -> String {
        self.flags[..ENTITY_COUNT].iter().map(|&f| if f { '1' } else { '0' }).collect()
    }

    pub fn from_entity_bits(bits: &str) -> Option<Self> {
        if bits.chars().count() != ENTITY_COUNT {
            return None;
        }
        let mut present = Vec::new();
        for (c, e) in bits.chars().zip(EntityId::ALL) {
            match c {
                '1' => present.push(e),
                '0' => {}
                _ => return None,
            }
        }
        Some(Self::from_entities(present))
    }

    pub fn as_f64(&self) -> [f64; LABEL_DIM] {
        self.flags.map(|f| if f { 1.0 } else { 0.0 })
    }
}

impl TryFrom<String> for ClinicalLabelVector {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        Self::from_entity_bits(&s).ok_or_else(|| format!("bad label bits {s:?}"))
    }
}

impl From<ClinicalLabelVector> for String {
    fn from(v: ClinicalLabelVector) -> String {
        v.entity_bits()
    }
}

/// Entity flag is set iff some sentence mentions it with positive polarity.
pub fn label_report(report: &Report) -> ClinicalLabelVector {
    ClinicalLabelVector::from_entities(
        report
            .sentences
            .iter()
            .flat_map(|s| s.mentions.iter())
            .filter(|m| m.polarity == Polarity::Positive)
            .map(|m| m.entity),
    )
}

/// Unit-norm version of the label vector; never zero because of "No Findings".
pub fn clinical_vector_normalized(v: &ClinicalLabelVector) -> [f64; LABEL_DIM] {
    let raw = v.as_f64();
    let n = raw.iter().sum::<f64>().sqrt();
    raw.map(|x| x / n)
}
