use std::collections::BTreeMap;

use clinalign::encoders::{encode_image, encode_text, Checkpoint, EncoderConfig};
use clinalign::eval::{cxr_align_eval, zero_shot_suite};
use clinalign::negation_forge::build_cxr_align_set;
use clinalign::numerics::{dot, Matrix};
use clinalign::report_nlp::Lexicon;
use clinalign::soft_contrastive::LossConfig;
use clinalign::synth_corpus::{generate_corpus, CorpusSpec};
use clinalign::train::{prepare_samples, train, write_metrics_log, PreparedSample, TrainConfig, TrainOutput};

fn samples(n: usize, seed: u64) -> Vec<PreparedSample> {
    let lex = Lexicon::default_ref();
    let spec = CorpusSpec { n_samples: n, seed, ..CorpusSpec::default() };
    prepare_samples(&generate_corpus(&spec, lex).unwrap(), lex).unwrap()
}

fn small_run(data: &[PreparedSample], epochs: usize) -> TrainOutput {
    let enc = EncoderConfig { embed_dim: 32, graph_hidden: 32, seed: 2, ..EncoderConfig::default() };
    let tc = TrainConfig { batch_size: 32, epochs, seed: 3, ..TrainConfig::default() };
    train(data, &enc, &LossConfig::default(), &tc, Lexicon::default_ref()).unwrap()
}

#[test]
fn loss_trends_down() {
    let data = samples(400, 1);
    let out = small_run(&data, 9);
    assert!(out.log.len() > 100);
    assert!(out.log[100].total < out.log[0].total, "{} -> {}", out.log[0].total, out.log[100].total);
    let head: f64 = out.log[..10].iter().map(|r| r.total).sum();
    let tail: f64 = out.log[out.log.len() - 10..].iter().map(|r| r.total).sum();
    assert!(tail < head);
    assert!(out.log.iter().all(|r| r.terms.len() == 18 && r.total.is_finite()));
}

#[test]
fn runs_are_byte_reproducible_and_checkpoints_replay() {
    let lex = Lexicon::default_ref();
    let data = samples(200, 2);
    let a = small_run(&data, 2);
    let b = small_run(&data, 2);
    let log = |o: &TrainOutput| {
        let mut v = Vec::new();
        write_metrics_log(&mut v, &o.log).unwrap();
        v
    };
    assert_eq!(log(&a), log(&b));
    let ca = a.checkpoint(&LossConfig::default(), &TrainConfig::default()).to_json().unwrap();
    assert_eq!(ca, b.checkpoint(&LossConfig::default(), &TrainConfig::default()).to_json().unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    a.checkpoint(&LossConfig::default(), &TrainConfig::default()).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_json().unwrap(), ca);

    let images = Matrix::from_rows(&data.iter().map(|s| s.features.clone()).collect::<Vec<_>>()).unwrap();
    let truth: Vec<_> = data.iter().map(|s| s.labels).collect();
    assert_eq!(
        zero_shot_suite(&a.params, &images, &truth, lex).unwrap(),
        zero_shot_suite(&loaded.params, &images, &truth, lex).unwrap()
    );
}

#[test]
fn cxr_align_batch_scores_match_single_pass() {
    let lex = Lexicon::default_ref();
    let data = samples(300, 3);
    let out = small_run(&data, 1);
    let pairs: Vec<_> = data.iter().map(|s| (s.id.clone(), s.report.clone())).collect();
    let set = build_cxr_align_set(&pairs, 4, None, lex);
    let imap: BTreeMap<String, Vec<f64>> = data.iter().map(|s| (s.id.clone(), s.features.clone())).collect();
    let batch = cxr_align_eval(&out.params, &set.records, &imap).unwrap();
    let (mut a, mut b) = (0usize, 0usize);
    for t in &set.records {
        let img = Matrix::from_rows(&[imap[&t.image_id].clone()]).unwrap();
        let v = encode_image(&img, &out.params).unwrap().unit.row(0).to_vec();
        let s = |r| dot(&v, &encode_text(r, &out.params));
        a += (s(&t.original) > s(&t.negated)) as usize;
        b += (s(&t.original) > s(&t.removed)) as usize;
    }
    let n = set.records.len() as f64;
    assert_eq!(batch.metrics["accuracy_a"], a as f64 / n);
    assert_eq!(batch.metrics["accuracy_b"], b as f64 / n);
}
