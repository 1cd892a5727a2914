//! Commands behind the `cbplm` binary. Each one is a thin wrapper over the
//! core crate that reads the resolved [`RunConfig`] and writes its outputs,
//! plus `config.json`, into an output directory.

pub mod corpus;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cbplm::concepts::{compute_all_annotated, fit_normalization, normalize, parse_annotations, ConceptRegistry, NormalizeMode};
use cbplm::config::RunConfig;
use cbplm::evaluate::{evaluate, EvalReport, EvalSettings};
use cbplm::interpret::{debug_report, export_decoder_weights, DebugReport, DEFAULT_FLAG_RATIO};
use cbplm::intervene::{AttributionMethod, Decode, Direction, InterventionRequest, InterventionResult, Intervener};
use cbplm::model::{CbModel, Variant};
use cbplm::seqio::{detokenize, generate_synthetic_corpus, generate_varied_corpus, parse_fasta, tokenize_unpadded, AminoProfile};
use cbplm::train::{load_checkpoint, predict_concepts, save_checkpoint, split, train_with, Checkpoint, Item, Validation};
use cbplm::{Error, Result};
use serde::Serialize;

use corpus::{Corpus, Row};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "train_report.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const DEBUG_FILE: &str = "debug_report.json";

/// Writes the resolved configuration next to a command's outputs.
pub fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_json_pretty()? + "\n")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{what} is not set")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareSummary {
    pub sequences: usize,
    pub skipped: usize,
    pub concepts: Vec<String>,
}

/// Builds `corpus.tsv` and `stats.json` from `data.fasta` or the synthetic spec.
pub fn prepare(cfg: &RunConfig, out: &Path) -> Result<PrepareSummary> {
    let records: Vec<(String, String)> = match &cfg.data.fasta {
        Some(path) => parse_fasta(BufReader::new(File::open(path)?))?.into_iter().map(|r| (r.header, r.sequence)).collect(),
        None => {
            let s = &cfg.data.synthetic;
            let seqs = if s.concentration > 0.0 {
                generate_varied_corpus(s.n, (s.min_len, s.max_len), &AminoProfile::uniform(), s.concentration, cfg.seed)?
            } else {
                generate_synthetic_corpus(s.n, (s.min_len, s.max_len), &AminoProfile::uniform(), cfg.seed)?
            };
            seqs.into_iter().enumerate().map(|(i, s)| (format!("seq{i}"), s)).collect()
        }
    };
    let annotations = match &cfg.data.annotations {
        Some(path) => Some(parse_annotations(BufReader::new(File::open(path)?))?),
        None => None,
    };
    let mut registry = ConceptRegistry::builtin();
    if let Some(ann) = &annotations {
        let mut extra: Vec<&String> = ann.values().flat_map(|row| row.keys()).collect();
        extra.sort();
        extra.dedup();
        for name in extra {
            if registry.index_of(name).is_none() {
                registry = registry.with_categorical(name)?;
            }
        }
    }
    let mut rows = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for (header, seq) in records {
        let id = header.split_whitespace().next().unwrap_or_default().to_string();
        // annotation rows may be keyed by the id or by the whole header
        let ann = annotations.as_ref().and_then(|a| a.get(&id).or_else(|| a.get(&header)));
        let usable = tokenize_unpadded(&seq, cfg.model.max_len).and_then(|ts| detokenize(&ts));
        match usable.and_then(|clean| compute_all_annotated(&clean, &registry, ann).map(|raw| (clean, raw))) {
            Ok((sequence, raw)) => rows.push(Row { id, sequence, raw }),
            Err(e) => {
                log::warn!("skipping `{header}`: {e}");
                skipped += 1;
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("no usable sequences".into()));
    }
    let (train_range, _) = split(rows.len(), cfg.train.val_fraction);
    let raw: Vec<_> = rows[train_range].iter().map(|r| r.raw.clone()).collect();
    let stats = fit_normalization(&registry, &raw);
    let summary = PrepareSummary { sequences: rows.len(), skipped, concepts: registry.names() };
    corpus::write(out, &Corpus { rows, registry, stats })?;
    write_resolved(cfg, out)?;
    Ok(summary)
}

/// The training stats, with any deliberate corruption from the config applied.
fn training_stats(cfg: &RunConfig, corpus: &Corpus) -> Result<cbplm::concepts::NormalizationStats> {
    let mut stats = corpus.stats.clone();
    for (name, factor) in &cfg.corrupt_normalization {
        let i = corpus.registry.index_of(name).ok_or_else(|| Error::UnsupportedConcept(name.clone()))?;
        stats = stats.with_scaled_range(i, *factor);
    }
    Ok(stats)
}

fn items(corpus: &Corpus, stats: &cbplm::concepts::NormalizationStats, max_len: usize) -> Result<Vec<Item>> {
    corpus
        .rows
        .iter()
        .map(|r| Ok(Item { tokens: tokenize_unpadded(&r.sequence, max_len)?, concepts: normalize(&r.raw, stats, NormalizeMode::Clip)? }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub final_loss: f64,
    pub validation: Option<Validation>,
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let corpus = corpus::read(required(&cfg.data.corpus, "data.corpus")?)?;
    let stats = training_stats(cfg, &corpus)?;
    let mut model_cfg = cfg.model.clone();
    if model_cfg.k != corpus.registry.len() {
        log::info!("setting model.k = {} from the corpus", corpus.registry.len());
        model_cfg.k = corpus.registry.len();
    }
    let items = items(&corpus, &stats, model_cfg.max_len)?;
    let mut model = CbModel::<f32>::new(model_cfg)?;
    std::fs::create_dir_all(out)?;
    write_resolved(cfg, out)?;
    let mut log = BufWriter::new(File::create(out.join(REPORT_FILE))?);
    let mut io_err = None;
    let report = train_with(&mut model, &items, &cfg.train, |rec| {
        if io_err.is_none() {
            if let Err(e) = serde_json::to_string(rec).map_err(Error::from).and_then(|l| writeln!(log, "{l}").map_err(Error::from)) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    log.flush()?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&Checkpoint { model, registry: corpus.registry, stats }, &checkpoint)?;
    Ok(TrainSummary {
        checkpoint,
        steps: cfg.train.steps,
        final_loss: report.records.last().map_or(f64::NAN, |r| r.total),
        validation: report.last_validation().cloned(),
    })
}

fn concept_indices(registry: &ConceptRegistry, names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Ok((0..registry.len()).collect());
    }
    names.iter().map(|n| registry.index_of(n).ok_or_else(|| Error::UnsupportedConcept(n.clone()))).collect()
}

/// Evaluates on the validation tail of the corpus.
pub fn eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let ck = load_checkpoint(required(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    let corpus = corpus::read(required(&cfg.data.corpus, "data.corpus")?)?;
    let all = items(&corpus, &ck.stats, ck.model.config.max_len)?;
    let val: Vec<&Item> = all[split(all.len(), cfg.train.val_fraction).1].iter().collect();
    let ar = match &cfg.paths.naturalness_checkpoint {
        Some(p) => Some(load_checkpoint(p)?.model),
        None => None,
    };
    let mut iv = Intervener::new(&ck.model, &ck.registry, &ck.stats);
    if let Some(ar) = &ar {
        iv = iv.with_naturalness(ar);
    }
    let (concepts, attribution) = match ck.model.variant() {
        Variant::Ar => (Vec::new(), cfg.eval.attribution),
        // no concept head to attribute with
        Variant::C => (concept_indices(&ck.registry, &cfg.eval.concepts)?, AttributionMethod::Random),
        _ => (concept_indices(&ck.registry, &cfg.eval.concepts)?, cfg.eval.attribution),
    };
    let mut request = InterventionRequest::new(0, Direction::Increase);
    request.mask_fraction = cfg.eval.mask_fraction;
    request.attribution = attribution;
    request.seed = cfg.seed;
    let settings = EvalSettings {
        mask_rate: cfg.eval.mask_rate,
        seed: cfg.seed,
        concepts,
        per_direction: cfg.eval.per_direction,
        request,
        correlation: cfg.eval.correlation,
    };
    let report = evaluate(&iv, &val, &settings)?;
    write_resolved(cfg, out)?;
    write_json(&out.join(EVAL_FILE), &report)?;
    Ok(report)
}

/// Command-line view of an intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct InterveneArgs {
    pub sequence: String,
    pub concept: String,
    pub direction: Direction,
    pub target: Option<f64>,
    pub mask_fraction: f64,
    pub iterations: usize,
    pub attribution: AttributionMethod,
    /// Sampling temperature; greedy decoding when absent.
    pub temperature: Option<f64>,
    /// Clamp the concept at this multiple of its maximum activation instead.
    pub clamp: Option<f64>,
}

pub fn intervene(cfg: &RunConfig, args: &InterveneArgs, out: Option<&Path>) -> Result<InterventionResult> {
    let ck = load_checkpoint(required(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    let i = ck.registry.index_of(&args.concept).ok_or_else(|| Error::UnsupportedConcept(args.concept.clone()))?;
    let ts = tokenize_unpadded(&args.sequence, ck.model.config.max_len)?;
    let iv = Intervener::new(&ck.model, &ck.registry, &ck.stats);
    let result = match args.clamp {
        Some(factor) => iv.clamp_concept(&ts, i, factor, cfg.seed)?,
        None => {
            let req = InterventionRequest {
                concept: i,
                direction: args.direction,
                target: args.target,
                mask_fraction: args.mask_fraction,
                iterations: args.iterations,
                decode: match args.temperature {
                    Some(temperature) => Decode::Sample { temperature, seed: cfg.seed },
                    None => Decode::Greedy,
                },
                attribution: args.attribution,
                seed: cfg.seed,
            };
            iv.intervene_single(&ts, &req)?
        }
    };
    if let Some(out) = out {
        write_resolved(cfg, out)?;
        write_json(&out.join("intervention.json"), &result)?;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionOutput {
    pub method: AttributionMethod,
    pub sequence: String,
    pub concepts: Vec<String>,
    /// One row per residue, one score per concept in `concepts`.
    pub scores: Vec<Vec<f64>>,
}

pub fn attribute(cfg: &RunConfig, sequence: &str, concept: Option<&str>, method: AttributionMethod, out: Option<&Path>) -> Result<AttributionOutput> {
    let ck = load_checkpoint(required(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    let ts = tokenize_unpadded(sequence, ck.model.config.max_len)?;
    let iv = Intervener::new(&ck.model, &ck.registry, &ck.stats);
    let names = ck.registry.names();
    let residues = ts.residue_positions();
    let output = match concept {
        Some(name) => {
            let i = ck.registry.index_of(name).ok_or_else(|| Error::UnsupportedConcept(name.to_string()))?;
            let col = iv.attribute(&ts, i, method, cfg.seed)?;
            AttributionOutput { method, sequence: detokenize(&ts)?, concepts: vec![names[i].clone()], scores: col[residues].iter().map(|&v| vec![v]).collect() }
        }
        None => {
            let m = iv.attribute_all(&ts, method, cfg.seed)?;
            AttributionOutput { method, sequence: detokenize(&ts)?, concepts: names, scores: m.scores[residues].to_vec() }
        }
    };
    if let Some(out) = out {
        write_resolved(cfg, out)?;
        write_json(&out.join("attribution.json"), &output)?;
    }
    Ok(output)
}

/// Effective decoder weights as CSV and the debugging report. With a corpus,
/// the report also carries each concept's validation MSE.
pub fn inspect(cfg: &RunConfig, out: &Path) -> Result<DebugReport> {
    let ck = load_checkpoint(required(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    let weights = export_decoder_weights(&ck.model, &ck.registry.names())?;
    let mse = match &cfg.data.corpus {
        Some(dir) => {
            let corpus = corpus::read(dir)?;
            let all = items(&corpus, &ck.stats, ck.model.config.max_len)?;
            let val: Vec<&Item> = all[split(all.len(), cfg.train.val_fraction).1].iter().collect();
            let preds = predict_concepts(&ck.model, &val)?;
            Some(
                (0..ck.model.k())
                    .map(|i| {
                        let obs: Vec<f64> = preds.iter().zip(&val).filter(|(_, it)| it.concepts.observed[i]).map(|(p, it)| (p[i] - it.concepts.values[i]).powi(2)).collect();
                        if obs.is_empty() { 0.0 } else { obs.iter().sum::<f64>() / obs.len() as f64 }
                    })
                    .collect::<Vec<f64>>(),
            )
        }
        None => None,
    };
    let report = debug_report(&weights, DEFAULT_FLAG_RATIO, mse.as_deref());
    write_resolved(cfg, out)?;
    let mut csv = BufWriter::new(File::create(out.join(WEIGHTS_FILE))?);
    weights.write_csv(&mut csv)?;
    csv.flush()?;
    write_json(&out.join(DEBUG_FILE), &report)?;
    Ok(report)
}
