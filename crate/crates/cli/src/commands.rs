use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clinalign::encoders::{Checkpoint, EncoderParams};
use clinalign::eval::{
    adversarial_cases, adversarial_eval_model, cxr_align_eval, normal_detection_eval, retrieval_eval,
    zero_shot_suite, EvalResult,
};
use clinalign::gradcheck::{run_gradcheck, GradcheckSetup, DEFAULT_TOLERANCE};
use clinalign::negation_forge::{
    build_cxr_align_set, make_hard_negative, read_triplets_file, write_triplets, EntityWeights, HardNegativeSource,
};
use clinalign::numerics::Matrix;
use clinalign::report_nlp::{ClinicalLabelVector, Lexicon, Report};
use clinalign::seed::derive_seed;
use clinalign::synth_corpus::{generate_corpus, load_corpus_file, write_corpus_file};
use clinalign::train::{prepare_samples, train, write_metrics_log_file, PreparedSample};
use clinalign::Error;
use rand::Rng;
use serde::Serialize;

use crate::config::{self, CliConfig};
use crate::{Cli, CliError, Command};

fn resolve(cli: &Cli) -> Result<CliConfig, CliError> {
    let c = &cli.common;
    let mut cfg = config::load(c.config.as_deref(), &c.overrides)?;
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    for (slot, flag) in [
        (&mut cfg.paths.out, &c.out),
        (&mut cfg.paths.corpus, &c.corpus),
        (&mut cfg.paths.triplets, &c.triplets),
        (&mut cfg.paths.checkpoint, &c.checkpoint),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    match &cli.command {
        Command::SynthData { n: Some(n) } => cfg.corpus.n_samples = *n,
        Command::Train { batch, dim, epochs } => {
            if let Some(b) = batch {
                cfg.train.batch_size = *b;
            }
            if let Some(d) = dim {
                cfg.encoder.embed_dim = *d;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn required(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    path.clone().ok_or_else(|| CliError::Usage(format!("missing {flag} (or the matching [paths] key)")))
}

fn existing(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    let p = required(path, flag)?;
    if !p.is_file() {
        return Err(CliError::Validation(format!("{flag}: {} does not exist", p.display())));
    }
    Ok(p)
}

/// Creates the output directory and records the effective config as
/// `<command>.config.toml`, which re-runs the job via `--config`.
fn out_dir(cfg: &CliConfig, command: &str) -> Result<PathBuf, CliError> {
    let dir = required(&cfg.paths.out, "--out")?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("{command}.config.toml")), cfg.to_toml()?)?;
    Ok(dir)
}

struct Corpus {
    samples: Vec<PreparedSample>,
    holdout: usize,
}

impl Corpus {
    fn load(path: &Path, cfg: &CliConfig, lex: &Lexicon) -> Result<Self, CliError> {
        let samples = prepare_samples(&load_corpus_file(path)?, lex)?;
        let holdout = cfg.eval.holdout;
        if holdout >= samples.len() && holdout > 0 {
            return Err(CliError::Validation(format!(
                "eval.holdout {holdout} leaves no training samples out of {}",
                samples.len()
            )));
        }
        Ok(Self { samples, holdout })
    }

    fn train_split(&self) -> &[PreparedSample] {
        &self.samples[..self.samples.len() - self.holdout]
    }

    fn eval_split(&self) -> &[PreparedSample] {
        if self.holdout == 0 {
            &self.samples
        } else {
            &self.samples[self.samples.len() - self.holdout..]
        }
    }
}

fn images_of(samples: &[PreparedSample]) -> Result<Matrix, CliError> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    Ok(Matrix::from_rows(&rows)?)
}

fn load_params(cfg: &CliConfig) -> Result<EncoderParams, CliError> {
    let path = existing(&cfg.paths.checkpoint, "--checkpoint")?;
    Ok(Checkpoint::load(&path)?.params)
}

fn check_feature_dim(params: &EncoderParams, samples: &[PreparedSample]) -> Result<(), CliError> {
    let want = params.config.feature_dim;
    match samples.iter().find(|s| s.features.len() != want) {
        Some(s) => Err(CliError::Validation(format!(
            "sample {} has {} image features, checkpoint expects {want}",
            s.id,
            s.features.len()
        ))),
        None => Ok(()),
    }
}

fn report_eval(dir: &Path, result: &EvalResult) -> Result<(), CliError> {
    result.validate()?;
    let path = dir.join(format!("eval_{}.json", result.task));
    result.save(&path)?;
    for (k, v) in &result.metrics {
        println!("{}.{k} = {v:.6}", result.task);
    }
    for (k, v) in &result.counts {
        println!("{}.count.{k} = {v}", result.task);
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct NegativeRecord<'a> {
    id: &'a str,
    original: String,
    negative: String,
    original_labels: ClinicalLabelVector,
    negative_labels: ClinicalLabelVector,
    source: HardNegativeSource,
}

#[derive(Serialize)]
struct TrainSummary {
    samples: usize,
    steps: usize,
    first_loss: f64,
    final_loss: f64,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    if let Some(w) = cli.common.workers {
        if w == 0 {
            return Err(CliError::Validation("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    let name = cli.command.name();
    eprintln!("# effective config for {name}\n{}", cfg.to_toml()?);
    let owned_lex;
    let lex: &Lexicon = match &cfg.paths.lexicon {
        Some(p) => {
            owned_lex = Lexicon::from_file(p)?;
            &owned_lex
        }
        None => Lexicon::default_ref(),
    };

    match cli.command {
        Command::SynthData { .. } => {
            let out = required(&cfg.paths.out, "--out")?;
            let samples = generate_corpus(&cfg.corpus, lex)?;
            write_corpus_file(&out, &samples)?;
            let normal = samples.iter().filter(|s| s.latent.no_findings()).count();
            println!("samples = {}\nnormal = {normal}\nwrote {}", samples.len(), out.display());
        }
        Command::GenNegatives => {
            let corpus = Corpus::load(&existing(&cfg.paths.corpus, "--corpus")?, &cfg, lex)?;
            let out = required(&cfg.paths.out, "--out")?;
            let reports: Vec<&Report> = corpus.samples.iter().map(|s| &s.report).collect();
            let pool: Vec<Report> = reports.iter().filter(|r| r.labels().positive_count() == 1).map(|r| (*r).clone()).collect();
            let weights = EntityWeights::empirical(reports.iter().copied());
            let mut w = BufWriter::new(std::fs::File::create(&out)?);
            let (mut written, mut skipped) = (0usize, 0usize);
            for (i, s) in corpus.samples.iter().enumerate() {
                match make_hard_negative(&s.report, derive_seed(cfg.eval.seed, &[0x6e65, i as u64]), &pool, &weights, lex) {
                    Ok(hn) => {
                        let rec = NegativeRecord {
                            id: &s.id,
                            original: s.report.text(),
                            negative: hn.report.text(),
                            original_labels: s.labels,
                            negative_labels: hn.report.labels(),
                            source: hn.source,
                        };
                        serde_json::to_writer(&mut w, &rec)?;
                        w.write_all(b"\n")?;
                        written += 1;
                    }
                    Err(Error::PoolExhausted(_) | Error::Verification(_)) => skipped += 1,
                    Err(e) => return Err(e.into()),
                }
            }
            w.flush()?;
            println!("negatives = {written}\nskipped = {skipped}\nwrote {}", out.display());
        }
        Command::CxrAlignGen => {
            let corpus = Corpus::load(&existing(&cfg.paths.corpus, "--corpus")?, &cfg, lex)?;
            let out = required(&cfg.paths.out, "--out")?;
            let pairs: Vec<(String, Report)> =
                corpus.eval_split().iter().map(|s| (s.id.clone(), s.report.clone())).collect();
            let set = build_cxr_align_set(&pairs, cfg.eval.seed, None, lex);
            let mut w = BufWriter::new(std::fs::File::create(&out)?);
            write_triplets(&mut w, &set.records)?;
            w.flush()?;
            println!("{}", serde_json::to_string_pretty(&set.summary)?);
            println!("wrote {}", out.display());
        }
        Command::Train { .. } => {
            let corpus = Corpus::load(&existing(&cfg.paths.corpus, "--corpus")?, &cfg, lex)?;
            let dir = out_dir(&cfg, name)?;
            let output = train(corpus.train_split(), &cfg.encoder, &cfg.loss, &cfg.train, lex)?;
            output.checkpoint(&cfg.loss, &cfg.train).save(&dir.join("checkpoint.json"))?;
            write_metrics_log_file(&dir.join("metrics.jsonl"), &output.log)?;
            let summary = TrainSummary {
                samples: corpus.train_split().len(),
                steps: output.log.len(),
                first_loss: output.log.first().map_or(f64::NAN, |r| r.total),
                final_loss: output.log.last().map_or(f64::NAN, |r| r.total),
            };
            std::fs::write(dir.join("train_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
            println!(
                "samples = {}\nsteps = {}\nfirst_loss = {:.6}\nfinal_loss = {:.6}\nwrote {}",
                summary.samples,
                summary.steps,
                summary.first_loss,
                summary.final_loss,
                dir.display()
            );
        }
        Command::EvalZeroshot => {
            let (params, corpus) = eval_inputs(&cfg, lex)?;
            let dir = out_dir(&cfg, name)?;
            let set = corpus.eval_split();
            let truth: Vec<ClinicalLabelVector> = set.iter().map(|s| s.labels).collect();
            report_eval(&dir, &zero_shot_suite(&params, &images_of(set)?, &truth, lex)?)?;
        }
        Command::EvalRetrieval => {
            let (params, corpus) = eval_inputs(&cfg, lex)?;
            let dir = out_dir(&cfg, name)?;
            let set = corpus.eval_split();
            let pool: Vec<Report> = set.iter().map(|s| s.report.clone()).collect();
            let truth: Vec<usize> = (0..set.len()).collect();
            report_eval(&dir, &retrieval_eval(&params, &images_of(set)?, &truth, &pool, cfg.eval.retrieval_k)?)?;
        }
        Command::EvalCxrAlign => {
            let (params, corpus) = eval_inputs(&cfg, lex)?;
            let triplets = read_triplets_file(&existing(&cfg.paths.triplets, "--triplets")?, lex)?;
            let dir = out_dir(&cfg, name)?;
            let images: BTreeMap<String, Vec<f64>> =
                corpus.samples.iter().map(|s| (s.id.clone(), s.features.clone())).collect();
            report_eval(&dir, &cxr_align_eval(&params, &triplets, &images)?)?;
        }
        Command::EvalAdversarial => {
            let (params, corpus) = eval_inputs(&cfg, lex)?;
            let dir = out_dir(&cfg, name)?;
            let set = corpus.eval_split();
            let truth: Vec<ClinicalLabelVector> = set.iter().map(|s| s.labels).collect();
            let cases = adversarial_cases(&truth, cfg.eval.seed);
            report_eval(&dir, &adversarial_eval_model(&params, &images_of(set)?, &cases, lex)?)?;
        }
        Command::EvalNormalDetect => {
            let (params, corpus) = eval_inputs(&cfg, lex)?;
            let dir = out_dir(&cfg, name)?;
            let set = corpus.eval_split();
            let normals: Vec<&PreparedSample> = set.iter().filter(|s| s.labels.no_findings()).collect();
            if normals.is_empty() {
                return Err(CliError::Validation("evaluation split has no normal sample".into()));
            }
            let mut rng = clinalign::seed::rng(cfg.eval.seed, &[0x6e64]);
            let pick = normals[rng.random_range(0..normals.len())];
            let mut pool = vec![pick.report.clone()];
            pool.extend(
                set.iter().filter(|s| !s.labels.no_findings()).take(cfg.eval.normal_pool).map(|s| s.report.clone()),
            );
            let rows: Vec<Vec<f64>> = normals.iter().map(|s| s.features.clone()).collect();
            report_eval(&dir, &normal_detection_eval(&params, &Matrix::from_rows(&rows)?, &pool)?)?;
        }
        Command::Gradcheck { batch, dim, epsilon } => {
            let setup = GradcheckSetup { seed: cli.common.seed.unwrap_or(cfg.train.seed), batch_size: batch, embed_dim: dim, epsilon };
            let outcome = run_gradcheck(&setup, lex)?;
            println!("terms = {}", outcome.terms);
            for (label, r) in [("embeddings", &outcome.embeddings), ("parameters", &outcome.parameters)] {
                println!(
                    "{label}: checked {} entries, max_rel_error {:.3e} at {}[{}]",
                    r.checked, r.max_rel_error, r.worst_param, r.worst_index
                );
            }
            println!("max_rel_error = {:.6e}", outcome.max_rel_error());
            if let Some(dir) = &cfg.paths.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&outcome)? + "\n")?;
            }
            if !outcome.passed(DEFAULT_TOLERANCE) {
                return Err(CliError::Runtime(format!(
                    "max_rel_error {:.3e} exceeds {DEFAULT_TOLERANCE:e}",
                    outcome.max_rel_error()
                )));
            }
        }
    }
    Ok(())
}

fn eval_inputs(cfg: &CliConfig, lex: &Lexicon) -> Result<(EncoderParams, Corpus), CliError> {
    let params = load_params(cfg)?;
    let corpus = Corpus::load(&existing(&cfg.paths.corpus, "--corpus")?, cfg, lex)?;
    check_feature_dim(&params, &corpus.samples)?;
    Ok((params, corpus))
}
