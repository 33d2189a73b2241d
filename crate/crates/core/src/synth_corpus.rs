//! Seeded synthetic image/report corpora with templated duplicate normals,
//! long-tailed entity prevalence and frequent negation sentences.
//!
//! Images are feature vectors `M·[z; normal] + σ·ε` for a latent entity
//! presence vector `z` and a fixed seeded mixing matrix `M`. Reports are
//! assembled from lexicon-only sentences, one entity per sentence, so the rule
//! labeler recovers `z` exactly.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::report_nlp::{ClinicalLabelVector, EntityId, Lexicon, Report, ENTITY_COUNT};
use crate::seed;

pub const CORPUS_FORMAT: &str = "clinalign-corpus";
pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Fixed normal reports; the first `duplicate_template_count` are used.
pub const NORMAL_TEMPLATES: [&str; 6] = [
    "No active lung lesion.",
    "The lungs are clear. The heart size is normal. No pleural effusion or pneumothorax is seen.",
    "No acute cardiopulmonary process.",
    "The cardiomediastinal silhouette is normal. No focal consolidation is seen. No pneumothorax is seen.",
    "The lungs are clear. No pleural effusion is seen.",
    "Heart size is normal. Lungs are clear. No pneumothorax.",
];

const NEUTRAL_SENTENCES: [&str; 3] = [
    "The osseous structures are unremarkable.",
    "The lungs are otherwise clear.",
    "Pulmonary vascularity is within expected range.",
];

/// Long-tailed default prevalence weights (support devices, opacity and
/// effusion common; pleural other and fracture rare).
pub const DEFAULT_PREVALENCE: [f64; ENTITY_COUNT] = [
    0.16, // Cardiomegaly
    0.20, // Lung Opacity
    0.18, // Atelectasis
    0.03, // Lung Lesion
    0.20, // Pleural Effusion
    0.02, // Fracture
    0.22, // Support Devices
    0.04, // Enlarged Cardiomediastinum
    0.01, // Pleural Other
    0.05, // Consolidation
    0.11, // Edema
    0.04, // Pneumothorax
    0.07, // Pneumonia
];

fn positive_templates(e: EntityId) -> &'static [&'static str] {
    use EntityId::*;
    match e {
        Cardiomegaly => &["Mild cardiomegaly.", "There is cardiomegaly.", "The heart size is enlarged.", "Moderate cardiomegaly is present."],
        LungOpacity => &["There is lung opacity.", "There is a right lower lobe opacity.", "Bilateral opacities are present."],
        Atelectasis => &["There is atelectasis.", "Mild bibasilar atelectasis.", "Left lower lobe atelectasis is present."],
        LungLesion => &["There is lung lesion.", "A right upper lobe nodule is present.", "There is a left lung mass."],
        PleuralEffusion => &["There is pleural effusion.", "Right pleural effusion.", "Small bilateral pleural effusions are present."],
        Fracture => &["There is fracture.", "A right rib fracture is present.", "There is a left clavicle fracture."],
        SupportDevices => &["There is support device.", "A pacemaker is present.", "The endotracheal tube is in standard position."],
        EnlargedCardiomediastinum => &["There is enlarged cardiomediastinum.", "The cardiomediastinal silhouette is enlarged.", "There is mediastinal widening."],
        PleuralOther => &["There is pleural thickening.", "Right apical pleural thickening is present."],
        Consolidation => &["There is consolidation.", "Right lower lobe consolidation is present."],
        Edema => &["There is edema.", "Mild pulmonary edema.", "Moderate pulmonary edema is present."],
        Pneumothorax => &["There is pneumothorax.", "A small right apical pneumothorax is present."],
        Pneumonia => &["There is pneumonia.", "Findings suggesting pneumonia.", "Right lower lobe pneumonia is present."],
    }
}

fn negation_sentence<R: Rng>(e: EntityId, lexicon: &Lexicon, rng: &mut R) -> String {
    match e {
        EntityId::Cardiomegaly => {
            ["No cardiomegaly.", "The heart size is normal.", "The cardiac silhouette is unremarkable."]
                .choose(rng)
                .unwrap()
                .to_string()
        }
        EntityId::EnlargedCardiomediastinum => [
            "The cardiomediastinal silhouette is normal.",
            "The cardiomediastinal silhouette is within normal limits.",
            "The mediastinal contours are normal.",
        ]
        .choose(rng)
        .unwrap()
        .to_string(),
        _ => crate::negation_forge::GENERAL_TEMPLATES
            .choose(rng)
            .unwrap()
            .replace("{finding}", lexicon.canonical(e)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_samples: usize,
    pub normal_fraction: f64,
    pub prevalence: [f64; ENTITY_COUNT],
    /// Probability scale for additional entities beyond the first in abnormal samples.
    pub comorbidity: f64,
    pub duplicate_template_count: usize,
    pub negation_mention_prob: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            normal_fraction: 0.6,
            prevalence: DEFAULT_PREVALENCE,
            comorbidity: 0.3,
            duplicate_template_count: 3,
            negation_mention_prob: 0.5,
            feature_dim: 32,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0,1], got {v}")))
            }
        };
        unit("normal_fraction", self.normal_fraction)?;
        unit("comorbidity", self.comorbidity)?;
        unit("negation_mention_prob", self.negation_mention_prob)?;
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be >= 2".into()));
        }
        if self.prevalence.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("prevalence weights must be finite and >= 0".into()));
        }
        if self.normal_fraction < 1.0 && self.prevalence.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("prevalence weights are all zero".into()));
        }
        if self.duplicate_template_count == 0 || self.duplicate_template_count > NORMAL_TEMPLATES.len() {
            return Err(Error::Config(format!(
                "duplicate_template_count must be in 1..={}",
                NORMAL_TEMPLATES.len()
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    fn secondary_prob(&self, e: EntityId) -> f64 {
        let max = self.prevalence.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            self.comorbidity * self.prevalence[e.index()] / max
        } else {
            0.0
        }
    }

    /// Exact marginal probability that a generated sample carries entity `e`.
    pub fn expected_prevalence(&self, e: EntityId) -> f64 {
        let total: f64 = self.prevalence.iter().sum();
        let primary = self.prevalence[e.index()] / total;
        (1.0 - self.normal_fraction) * (primary + (1.0 - primary) * self.secondary_prob(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub latent: ClinicalLabelVector,
    pub image_features: Vec<f64>,
    pub report_text: String,
}

impl Sample {
    pub fn report(&self, lexicon: &Lexicon) -> Result<Report> {
        Report::parse_with(self.id.clone(), &self.report_text, lexicon)
    }
}

/// Mixing matrix `feature_dim x (13 + 1)`; the last column encodes "normal".
pub fn mixing_matrix(spec: &CorpusSpec) -> Matrix {
    let mut rng = seed::rng(spec.seed, &[0x313c]);
    let cols = ENTITY_COUNT + 1;
    let data = (0..spec.feature_dim * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_raw(spec.feature_dim, cols, data)
}

pub fn generate_corpus(spec: &CorpusSpec, lexicon: &Lexicon) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mixing = mixing_matrix(spec);
    let total_weight: f64 = spec.prevalence.iter().sum();
    (0..spec.n_samples)
        .map(|idx| {
            let mut rng = seed::rng(spec.seed, &[0x5a4e, idx as u64]);
            let normal = rng.random::<f64>() < spec.normal_fraction;
            let (latent, report_text) = if normal {
                let t = rng.random_range(0..spec.duplicate_template_count);
                (ClinicalLabelVector::normal(), NORMAL_TEMPLATES[t].to_string())
            } else {
                let mut u = rng.random::<f64>() * total_weight;
                let mut primary = EntityId::ALL[ENTITY_COUNT - 1];
                for e in EntityId::ALL {
                    let w = spec.prevalence[e.index()];
                    if u < w && w > 0.0 {
                        primary = e;
                        break;
                    }
                    u -= w;
                }
                let mut present = vec![primary];
                for e in EntityId::ALL {
                    if e != primary && rng.random::<f64>() < spec.secondary_prob(e) {
                        present.push(e);
                    }
                }
                let latent = ClinicalLabelVector::from_entities(present.iter().copied());
                let mut sentences: Vec<String> = present
                    .iter()
                    .map(|e| positive_templates(*e).choose(&mut rng).unwrap().to_string())
                    .collect();
                for e in EntityId::ALL {
                    if !latent.get(e) && rng.random::<f64>() < spec.negation_mention_prob {
                        sentences.push(negation_sentence(e, lexicon, &mut rng));
                    }
                }
                if rng.random::<f64>() < 0.3 {
                    sentences.push(NEUTRAL_SENTENCES.choose(&mut rng).unwrap().to_string());
                }
                sentences.shuffle(&mut rng);
                (latent, sentences.join(" "))
            };
            let code = latent.as_f64();
            let image_features = (0..spec.feature_dim)
                .map(|r| {
                    let mixed: f64 = (0..ENTITY_COUNT + 1).map(|c| mixing.get(r, c) * code[c]).sum();
                    mixed + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            Ok(Sample { id: format!("s{idx:06}"), latent, image_features, report_text })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusHeader {
    format: String,
    version: u32,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    id: String,
    report: String,
    features: Vec<f64>,
    latent: String,
}

/// Writes the header line then one JSON record per sample.
pub fn write_corpus<W: Write>(mut out: W, samples: &[Sample]) -> Result<()> {
    let header = CorpusHeader { format: CORPUS_FORMAT.into(), version: CORPUS_FORMAT_VERSION, count: samples.len() };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in samples {
        let line = SampleLine {
            id: s.id.clone(),
            report: s.report_text.clone(),
            features: s.image_features.clone(),
            latent: s.latent.entity_bits(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_corpus<R: BufRead>(input: R) -> Result<Vec<Sample>> {
    let mut lines = input.lines();
    let header_line = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header".into() })??;
    let header: CorpusHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Parse { line: 1, msg: format!("header: {e}") })?;
    if header.format != CORPUS_FORMAT {
        return Err(Error::Parse { line: 1, msg: format!("unexpected format {:?}", header.format) });
    }
    if header.version != CORPUS_FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: header.version, expected: CORPUS_FORMAT_VERSION });
    }
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let rec: SampleLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let latent = ClinicalLabelVector::from_entity_bits(&rec.latent)
            .ok_or_else(|| Error::Parse { line: lineno, msg: format!("bad latent {:?}", rec.latent) })?;
        if rec.features.iter().any(|f| !f.is_finite()) {
            return Err(Error::Parse { line: lineno, msg: "non-finite feature".into() });
        }
        samples.push(Sample { id: rec.id, latent, image_features: rec.features, report_text: rec.report });
    }
    if samples.len() != header.count {
        return Err(Error::Parse {
            line: samples.len() + 2,
            msg: format!("expected {} records, found {}", header.count, samples.len()),
        });
    }
    Ok(samples)
}

pub fn write_corpus_file(path: &Path, samples: &[Sample]) -> Result<()> {
    write_corpus(std::io::BufWriter::new(std::fs::File::create(path)?), samples)
}

pub fn load_corpus_file(path: &Path) -> Result<Vec<Sample>> {
    load_corpus(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> &'static Lexicon {
        Lexicon::default_ref()
    }

    #[test]
    fn every_template_labels_as_intended() {
        for e in EntityId::ALL {
            for t in positive_templates(e) {
                let l = Report::parse("t", t).unwrap().labels();
                assert_eq!(l.positive_entities(), vec![e], "{t}");
            }
        }
        for t in NORMAL_TEMPLATES.iter().chain(NEUTRAL_SENTENCES.iter()) {
            assert!(Report::parse("t", t).unwrap().labels().no_findings(), "{t}");
        }
        let mut rng = seed::rng(0, &[]);
        for e in EntityId::ALL {
            for _ in 0..10 {
                let s = negation_sentence(e, lex(), &mut rng);
                assert!(Report::parse("t", &s).unwrap().labels().no_findings(), "{s}");
            }
        }
    }

    #[test]
    fn all_normal_corpus_uses_at_most_template_count_reports() {
        let spec = CorpusSpec { n_samples: 100, normal_fraction: 1.0, ..Default::default() };
        let c = generate_corpus(&spec, lex()).unwrap();
        let mut distinct: Vec<_> = c.iter().map(|s| s.report_text.clone()).collect();
        distinct.sort();
        distinct.dedup();
        assert!(distinct.len() <= 3);
    }

    #[test]
    fn samples_are_label_consistent() {
        let c = generate_corpus(&CorpusSpec { n_samples: 300, seed: 4, ..Default::default() }, lex()).unwrap();
        for s in &c {
            assert_eq!(s.report(lex()).unwrap().labels(), s.latent, "{}", s.report_text);
            assert_eq!(s.image_features.len(), 32);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(CorpusSpec { normal_fraction: 1.5, ..Default::default() }.validate().is_err());
        assert!(CorpusSpec { n_samples: 1, ..Default::default() }.validate().is_err());
        assert!(CorpusSpec { duplicate_template_count: 9, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn empty_corpus_file_has_header_only() {
        let mut buf = Vec::new();
        write_corpus(&mut buf, &[]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(load_corpus(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn truncated_record_names_line() {
        let c = generate_corpus(&CorpusSpec { n_samples: 3, ..Default::default() }, lex()).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &c).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = text.len() - 20;
        match load_corpus(text[..cut].as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
