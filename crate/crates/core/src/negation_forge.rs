//! Hard-negative reports and CXR-Align style triplets.
//!
//! A hard negative `r^n` is built from a report `r` by picking one positive
//! entity, dropping every sentence that mentions it (`r^r`) and inserting a
//! templated negation of that entity. Normal reports instead borrow a report
//! with exactly one positive entity.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report_nlp::{ClinicalLabelVector, EntityId, Lexicon, Report, Sentence, ENTITY_COUNT};
use crate::seed;

pub const MEDIASTINAL_TEMPLATES: [&str; 5] = [
    "The cardiomediastinal silhouette is normal.",
    "The cardiac silhouette is unremarkable.",
    "The heart size is normal.",
    "The cardiomediastinal silhouette is within normal limits.",
    "No cardiomegaly.",
];

/// `{finding}` is replaced by the entity's canonical lexicon phrase.
pub const GENERAL_TEMPLATES: [&str; 4] = [
    "No {finding} is seen.",
    "No {finding} is observed.",
    "There is no {finding}.",
    "No evidence of {finding}.",
];

pub const REMOVAL_FILLER: &str = "The remainder of the exam is unremarkable.";

/// Entities whose negations are favoured when building the benchmark.
pub const PRIORITY_ENTITIES: [EntityId; 6] = [
    EntityId::Cardiomegaly,
    EntityId::Atelectasis,
    EntityId::Edema,
    EntityId::PleuralEffusion,
    EntityId::Pneumothorax,
    EntityId::Consolidation,
];

#[derive(Debug, Clone, Copy)]
pub struct NegationTemplates {
    pub mediastinal: [&'static str; 5],
    pub general: [&'static str; 4],
}

impl NegationTemplates {
    pub const STANDARD: NegationTemplates =
        NegationTemplates { mediastinal: MEDIASTINAL_TEMPLATES, general: GENERAL_TEMPLATES };

    pub fn uses_mediastinal(entity: EntityId) -> bool {
        matches!(entity, EntityId::Cardiomegaly | EntityId::EnlargedCardiomediastinum)
    }

    pub fn count_for(entity: EntityId) -> usize {
        if Self::uses_mediastinal(entity) {
            MEDIASTINAL_TEMPLATES.len()
        } else {
            GENERAL_TEMPLATES.len()
        }
    }

    pub fn render(entity: EntityId, template_index: usize, lexicon: &Lexicon) -> Result<String> {
        let count = Self::count_for(entity);
        if template_index >= count {
            return Err(Error::invalid(format!(
                "template index {template_index} out of range for {entity} ({count} templates)"
            )));
        }
        Ok(if Self::uses_mediastinal(entity) {
            MEDIASTINAL_TEMPLATES[template_index].to_string()
        } else {
            GENERAL_TEMPLATES[template_index].replace("{finding}", lexicon.canonical(entity))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsertPosition {
    Beginning,
    Middle,
    End,
}

impl InsertPosition {
    pub const ALL: [InsertPosition; 3] = [InsertPosition::Beginning, InsertPosition::Middle, InsertPosition::End];

    /// Sentence index for a report with `n` sentences: 0, ⌊n/2⌋ or n.
    pub fn index(self, n: usize) -> usize {
        match self {
            InsertPosition::Beginning => 0,
            InsertPosition::Middle => n / 2,
            InsertPosition::End => n,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InsertPosition::Beginning => "beginning",
            InsertPosition::Middle => "middle",
            InsertPosition::End => "end",
        }
    }
}

/// Per-entity sampling weights for entity selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityWeights(pub [f64; ENTITY_COUNT]);

impl EntityWeights {
    pub fn uniform() -> Self {
        Self([1.0; ENTITY_COUNT])
    }

    /// Empirical positive frequency of each entity over `reports`.
    pub fn empirical<'a>(reports: impl IntoIterator<Item = &'a Report>) -> Self {
        let mut w = [0.0; ENTITY_COUNT];
        for r in reports {
            for e in r.positive_entities() {
                w[e.index()] += 1.0;
            }
        }
        Self(w)
    }

    /// Multiplies the weights of [`PRIORITY_ENTITIES`] by `factor`.
    pub fn with_priority(mut self, factor: f64) -> Self {
        for e in PRIORITY_ENTITIES {
            self.0[e.index()] *= factor;
        }
        self
    }

    pub fn get(&self, e: EntityId) -> f64 {
        self.0[e.index()]
    }
}

/// Picks one positive entity of `report` with probability proportional to its
/// weight (uniform over positives if all their weights are zero).
pub fn select_entity(report: &Report, rng_seed: u64, weights: &EntityWeights) -> Result<EntityId> {
    let positives = report.positive_entities();
    if positives.is_empty() {
        return Err(Error::NotEligible(report.id.clone()));
    }
    let mut rng = seed::rng(rng_seed, &[0x5e1ec7]);
    Ok(pick_weighted(&positives, weights, &mut rng))
}

fn pick_weighted<R: Rng>(candidates: &[EntityId], weights: &EntityWeights, rng: &mut R) -> EntityId {
    let ws: Vec<f64> = candidates.iter().map(|e| weights.get(*e).max(0.0)).collect();
    let total: f64 = ws.iter().sum();
    if !(total > 0.0) {
        return candidates[rng.random_range(0..candidates.len())];
    }
    let mut u = rng.random::<f64>() * total;
    for (e, w) in candidates.iter().zip(&ws) {
        if u < *w {
            return *e;
        }
        u -= w;
    }
    // Rounding can leave u marginally above the last bucket.
    *candidates.iter().zip(&ws).rev().find(|(_, w)| **w > 0.0).unwrap().0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Removal {
    pub report: Report,
    /// Removal emptied the report and [`REMOVAL_FILLER`] was inserted.
    pub filler_inserted: bool,
}

/// Drops every sentence that mentions `entity` (any polarity).
pub fn remove_entity_sentences(report: &Report, entity: EntityId, lexicon: &Lexicon) -> Result<Removal> {
    if !report.labels().get(entity) {
        return Err(Error::invalid(format!("{entity} is not positive in report {}", report.id)));
    }
    let kept: Vec<Sentence> =
        report.sentences.iter().filter(|s| !s.mentions_entity(entity)).cloned().collect();
    if kept.is_empty() {
        return Ok(Removal {
            report: Report { id: report.id.clone(), sentences: vec![Sentence::analyze(REMOVAL_FILLER, lexicon)] },
            filler_inserted: true,
        });
    }
    Ok(Removal { report: Report { id: report.id.clone(), sentences: kept }, filler_inserted: false })
}

/// Inserts one negation sentence for `entity` at the given position.
pub fn insert_negation(
    report_removed: &Report,
    entity: EntityId,
    position: InsertPosition,
    template_index: usize,
    lexicon: &Lexicon,
) -> Result<Report> {
    if report_removed.labels().get(entity) {
        return Err(Error::EntityStillPresent { entity });
    }
    let sentence = Sentence::analyze(&NegationTemplates::render(entity, template_index, lexicon)?, lexicon);
    let mut sentences = report_removed.sentences.clone();
    sentences.insert(position.index(sentences.len()), sentence);
    Ok(Report { id: report_removed.id.clone(), sentences })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HardNegativeSource {
    Negated { entity: EntityId, position: InsertPosition, template_index: usize },
    Pool { source_id: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardNegative {
    pub report: Report,
    pub source: HardNegativeSource,
}

/// Hard negative differing from `report` by exactly one entity.
///
/// Abnormal reports are negated; normal reports get a random single-entity
/// report from `single_entity_pool` (entries with other label counts are ignored).
pub fn make_hard_negative(
    report: &Report,
    rng_seed: u64,
    single_entity_pool: &[Report],
    weights: &EntityWeights,
    lexicon: &Lexicon,
) -> Result<HardNegative> {
    let labels = report.labels();
    let mut rng = seed::rng(rng_seed, &[0x4a7d]);
    if labels.no_findings() {
        let eligible: Vec<&Report> =
            single_entity_pool.iter().filter(|r| r.labels().positive_count() == 1).collect();
        if eligible.is_empty() {
            return Err(Error::PoolExhausted(report.id.clone()));
        }
        let pick = eligible[rng.random_range(0..eligible.len())];
        return Ok(HardNegative {
            report: Report { id: report.id.clone(), sentences: pick.sentences.clone() },
            source: HardNegativeSource::Pool { source_id: pick.id.clone() },
        });
    }

    let selected = select_entity(report, rng.random(), weights)?;
    let mut candidates = vec![selected];
    candidates.extend(labels.positive_entities().into_iter().filter(|e| *e != selected));
    for entity in candidates {
        let position = InsertPosition::ALL[rng.random_range(0..3)];
        let template_index = rng.random_range(0..NegationTemplates::count_for(entity));
        let removed = remove_entity_sentences(report, entity, lexicon)?;
        // Removal must not take other entities with it (multi-entity sentences).
        if removed.report.labels() != labels.without(entity) {
            continue;
        }
        let negated = insert_negation(&removed.report, entity, position, template_index, lexicon)?;
        if negated.labels() == labels.without(entity) {
            return Ok(HardNegative {
                report: negated,
                source: HardNegativeSource::Negated { entity, position, template_index },
            });
        }
    }
    Err(Error::Verification(format!("no entity of report {} can be cleanly negated", report.id)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletRecord {
    pub image_id: String,
    pub original: Report,
    pub removed: Report,
    pub negated: Report,
    pub selected_entity: EntityId,
    pub insertion_position: InsertPosition,
    pub template_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TripletVerdict {
    Pass,
    Fail(String),
}

impl TripletVerdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, TripletVerdict::Pass)
    }
}

/// Checks the three triplet invariants, reporting the first violation.
pub fn validate_triplet(t: &TripletRecord, lexicon: &Lexicon) -> TripletVerdict {
    let orig = t.original.labels();
    let removed = t.removed.labels();
    let negated = t.negated.labels();
    let e = t.selected_entity;
    if !orig.get(e) {
        return TripletVerdict::Fail(format!("selected entity {e} is not positive in the original report"));
    }
    if removed != orig.without(e) {
        return TripletVerdict::Fail(format!(
            "labeler(removed) ≠ labeler(original) with {e} cleared ({} vs {})",
            removed.entity_bits(),
            orig.without(e).entity_bits()
        ));
    }
    if negated != removed {
        return TripletVerdict::Fail(format!(
            "labeler(negated) ≠ labeler(removed) ({} vs {})",
            negated.entity_bits(),
            removed.entity_bits()
        ));
    }
    match insert_negation(&t.removed, e, t.insertion_position, t.template_index, lexicon) {
        Ok(expected) if expected.text() == t.negated.text() => TripletVerdict::Pass,
        Ok(_) => TripletVerdict::Fail(format!(
            "negated report is not the removed report plus one {e} negation at the {} ({})",
            t.insertion_position.name(),
            t.template_index
        )),
        Err(err) => TripletVerdict::Fail(format!("cannot reproduce negation for {e}: {err}")),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CxrAlignSummary {
    pub triplets: usize,
    pub skipped_normal: usize,
    pub skipped_invalid: usize,
    pub per_entity: BTreeMap<String, usize>,
    pub per_position: BTreeMap<String, usize>,
    pub filler_inserted: usize,
}

#[derive(Debug, Clone)]
pub struct CxrAlignSet {
    pub records: Vec<TripletRecord>,
    pub summary: CxrAlignSummary,
}

/// One triplet per eligible abnormal report. `weights` defaults to the
/// empirical entity frequency of `corpus`.
pub fn build_cxr_align_set(
    corpus: &[(String, Report)],
    rng_seed: u64,
    weights: Option<&EntityWeights>,
    lexicon: &Lexicon,
) -> CxrAlignSet {
    let weights = weights.copied().unwrap_or_else(|| EntityWeights::empirical(corpus.iter().map(|(_, r)| r)));
    let mut summary = CxrAlignSummary::default();
    let mut records = Vec::new();
    for (idx, (image_id, report)) in corpus.iter().enumerate() {
        let mut rng = seed::rng(rng_seed, &[0xc7a1, idx as u64]);
        let entity = match select_entity(report, rng.random(), &weights) {
            Ok(e) => e,
            Err(_) => {
                summary.skipped_normal += 1;
                continue;
            }
        };
        let position = InsertPosition::ALL[rng.random_range(0..3)];
        let template_index = rng.random_range(0..NegationTemplates::count_for(entity));
        let record = remove_entity_sentences(report, entity, lexicon).and_then(|removal| {
            let negated = insert_negation(&removal.report, entity, position, template_index, lexicon)?;
            Ok((removal, negated))
        });
        let (removal, negated) = match record {
            Ok(r) => r,
            Err(_) => {
                summary.skipped_invalid += 1;
                continue;
            }
        };
        let record = TripletRecord {
            image_id: image_id.clone(),
            original: report.clone(),
            removed: removal.report,
            negated,
            selected_entity: entity,
            insertion_position: position,
            template_index,
        };
        if !validate_triplet(&record, lexicon).is_pass() {
            summary.skipped_invalid += 1;
            continue;
        }
        summary.filler_inserted += removal.filler_inserted as usize;
        *summary.per_entity.entry(entity.name().to_string()).or_default() += 1;
        *summary.per_position.entry(position.name().to_string()).or_default() += 1;
        records.push(record);
    }
    summary.triplets = records.len();
    CxrAlignSet { records, summary }
}

/// Sentence order shuffled with the given seed.
pub fn shuffle_sentences(report: &Report, rng_seed: u64) -> Report {
    let mut order: Vec<usize> = (0..report.sentences.len()).collect();
    order.shuffle(&mut seed::rng(rng_seed, &[0x5f]));
    report.reordered(&order)
}

/// Line format of the triplet file; one JSON object per line, fields in this order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripletLine {
    image_id: String,
    r: String,
    r_r: String,
    r_n: String,
    entity: EntityId,
    position: InsertPosition,
    template_index: usize,
}

pub fn write_triplets<W: Write>(mut out: W, records: &[TripletRecord]) -> Result<()> {
    for t in records {
        let line = TripletLine {
            image_id: t.image_id.clone(),
            r: t.original.text(),
            r_r: t.removed.text(),
            r_n: t.negated.text(),
            entity: t.selected_entity,
            position: t.insertion_position,
            template_index: t.template_index,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_triplets<R: BufRead>(input: R, lexicon: &Lexicon) -> Result<Vec<TripletRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let l: TripletLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let parse = |text: &str| Report::parse_with(l.image_id.clone(), text, lexicon).map_err(|e| parse_err(e.to_string()));
        out.push(TripletRecord {
            original: parse(&l.r)?,
            removed: parse(&l.r_r)?,
            negated: parse(&l.r_n)?,
            image_id: l.image_id,
            selected_entity: l.entity,
            insertion_position: l.position,
            template_index: l.template_index,
        });
    }
    Ok(out)
}

pub fn read_triplets_file(path: &Path, lexicon: &Lexicon) -> Result<Vec<TripletRecord>> {
    read_triplets(std::io::BufReader::new(std::fs::File::open(path)?), lexicon)
}

/// Label-vector distance between a report and its hard negative.
pub fn label_distance(a: &Report, b: &Report) -> usize {
    let (la, lb): (ClinicalLabelVector, ClinicalLabelVector) = (a.labels(), b.labels());
    la.hamming(&lb)
}
