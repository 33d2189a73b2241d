
use clinalign::graph_builder::{extract_graph, normalized_adjacency, NodeClass, ReportGraph};
use clinalign::negation_forge::{
    build_cxr_align_set, make_hard_negative, remove_entity_sentences, shuffle_sentences, validate_triplet, EntityWeights, HardNegativeSource,
};
use clinalign::report_nlp::{EntityId, Lexicon, Report};
use clinalign::synth_corpus::{generate_corpus, load_corpus, write_corpus, CorpusSpec};
use nalgebra::DMatrix;

fn reports(n: usize, seed: u64) -> Vec<Report> {
    let lex = Lexicon::default_ref();
    let spec = CorpusSpec { n_samples: n, seed, ..CorpusSpec::default() };
    generate_corpus(&spec, lex).unwrap().iter().map(|s| s.report(lex).unwrap()).collect()
}

#[test]
fn prevalence_within_three_sigma() {
    let lex = Lexicon::default_ref();
    for seed in [1u64, 2] {
        let spec = CorpusSpec { n_samples: 2000, seed, ..CorpusSpec::default() };
        let samples = generate_corpus(&spec, lex).unwrap();
        let n = samples.len() as f64;
        let labels: Vec<_> = samples.iter().map(|s| s.report(lex).unwrap().labels()).collect();
        for e in EntityId::ALL {
            let p = spec.expected_prevalence(e);
            let k = labels.iter().filter(|l| l.get(e)).count() as f64;
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!((k / n - p).abs() <= 3.0 * sigma + 1e-12, "{e}: {} vs {p}", k / n);
        }
        let p = spec.normal_fraction;
        let k = labels.iter().filter(|l| l.no_findings()).count() as f64;
        assert!((k / n - p).abs() <= 3.0 * (p * (1.0 - p) / n).sqrt(), "normal fraction {}", k / n);
        // every normal report is one of the duplicate templates
        let distinct: std::collections::BTreeSet<String> =
            samples.iter().filter(|s| s.latent.no_findings()).map(|s| s.report_text.clone()).collect();
        assert!(distinct.len() <= spec.duplicate_template_count);
    }
}

#[test]
fn corpus_file_round_trip_is_byte_identical() {
    let spec = CorpusSpec { n_samples: 1000, seed: 4, ..CorpusSpec::default() };
    let samples = generate_corpus(&spec, Lexicon::default_ref()).unwrap();
    let mut a = Vec::new();
    write_corpus(&mut a, &samples).unwrap();
    let back = load_corpus(&a[..]).unwrap();
    assert_eq!(back, samples);
    let mut b = Vec::new();
    write_corpus(&mut b, &back).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forge_outputs_are_valid_on_a_thousand_reports() {
    let lex = Lexicon::default_ref();
    let rs = reports(1000, 6);
    let pairs: Vec<(String, Report)> = rs.iter().map(|r| (r.id.clone(), r.clone())).collect();
    let set = build_cxr_align_set(&pairs, 3, None, lex);
    assert!(set.records.len() > 300);
    for t in &set.records {
        assert!(validate_triplet(t, lex).is_pass(), "{}", t.image_id);
    }
    let again = build_cxr_align_set(&pairs, 3, None, lex);
    assert_eq!(again.records, set.records);

    let pool: Vec<Report> = rs.iter().filter(|r| r.labels().positive_count() == 1).cloned().collect();
    let w = EntityWeights::empirical(rs.iter());
    for (i, r) in rs.iter().enumerate() {
        let hn = make_hard_negative(r, i as u64, &pool, &w, lex).unwrap();
        let (a, b) = (r.labels(), hn.report.labels());
        let flip = a.no_findings() != b.no_findings();
        assert_eq!(a.hamming(&b), if flip { 2 } else { 1 }, "{}", r.id);
        if let HardNegativeSource::Negated { entity, .. } = hn.source {
            assert!(!b.get(entity));
        }
    }
}

fn keys_outside(g: &ReportGraph, report: &Report, touched: impl Fn(&Report, usize) -> bool) -> (Vec<(String, NodeClass)>, Vec<String>) {
    let keep: Vec<bool> = g.nodes().iter().map(|n| n.sentence.map_or(true, |s| !touched(report, s))).collect();
    let mut nodes: Vec<(String, NodeClass)> =
        g.nodes().iter().zip(&keep).filter(|(_, k)| **k).map(|(n, _)| (n.phrase.clone(), n.class)).collect();
    nodes.sort();
    let mut edges: Vec<String> = g
        .edges()
        .iter()
        .filter(|(i, j)| keep[*i] && keep[*j])
        .map(|&(i, j)| {
            let mut p = [format!("{:?}", g.nodes()[i].key()), format!("{:?}", g.nodes()[j].key())];
            p.sort();
            p.join("~")
        })
        .collect();
    edges.sort();
    (nodes, edges)
}

#[test]
fn graphs_are_order_free_and_negatives_are_local() {
    let lex = Lexicon::default_ref();
    let rs = reports(400, 8);
    let pool: Vec<Report> = rs.iter().filter(|r| r.labels().positive_count() == 1).cloned().collect();
    let w = EntityWeights::empirical(rs.iter());
    let mut negated = 0;
    for (i, r) in rs.iter().enumerate() {
        let g = extract_graph(r, lex);
        assert_eq!(extract_graph(r, lex), g);
        let shuffled = shuffle_sentences(r, i as u64);
        assert_eq!(extract_graph(&shuffled, lex).canonical_form(), g.canonical_form());

        let hn = make_hard_negative(r, i as u64, &pool, &w, lex).unwrap();
        if let HardNegativeSource::Negated { entity, .. } = hn.source {
            negated += 1;
            let gn = extract_graph(&hn.report, lex);
            // the negation sentence is the single insertion relative to r^r
            let removed = remove_entity_sentences(r, entity, lex).unwrap().report;
            let texts = |rep: &Report| rep.sentences.iter().map(|s| s.text.clone()).collect::<Vec<_>>();
            let (rt, nt) = (texts(&removed), texts(&hn.report));
            let inserted = (0..nt.len()).find(|&k| rt.get(k) != nt.get(k)).unwrap();
            assert_eq!([&nt[..inserted], &nt[inserted + 1..]].concat(), rt);
            let orig = keys_outside(&g, r, |rep, s| rep.sentences[s].mentions_entity(entity));
            let neg = keys_outside(&gn, &hn.report, |_, s| s == inserted);
            assert_eq!(orig, neg, "{}", r.id);
        }
    }
    assert!(negated > 50);
}

#[test]
fn adjacency_spectrum_is_bounded() {
    let lex = Lexicon::default_ref();
    for r in reports(200, 10) {
        let a = normalized_adjacency(&extract_graph(&r, lex));
        let n = a.rows();
        let m = DMatrix::from_fn(n, n, |i, j| a.get(i, j));
        assert!((&m - m.transpose()).amax() < 1e-15);
        let eig = m.symmetric_eigen().eigenvalues;
        let max = eig.max();
        assert!((max - 1.0).abs() < 1e-10, "{}: top eigenvalue {max}", r.id);
        assert!(eig.min() >= -1.0 - 1e-10);
    }
}
