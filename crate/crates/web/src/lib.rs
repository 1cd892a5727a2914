//! In-browser demo. Every export takes and returns JSON strings so the page
//! needs no bindings beyond the generated glue.
//!
//! The `*_json` functions hold the logic and run natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use cbplm::concepts::{charge_at_ph, compute_all, isoelectric_point};
use cbplm::interpret::{counterfactual_rank, debug_report, export_decoder_weights, DEFAULT_FLAG_RATIO};
use cbplm::intervene::{AttributionMethod, Direction, InterventionRequest, Intervener};
use cbplm::model::Variant;
use cbplm::seqio::tokenize_unpadded;
use cbplm::train::Checkpoint;
use cbplm::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
struct ConceptRow {
    name: String,
    value: f64,
}

/// All built-in concepts of `sequence`, raw values.
pub fn concepts_json(sequence: &str) -> Result<String> {
    let reg = cbplm::concepts::ConceptRegistry::builtin();
    let cv = compute_all(sequence, &reg)?;
    let rows: Vec<ConceptRow> = reg.names().into_iter().zip(cv.values).map(|(name, value)| ConceptRow { name, value }).collect();
    Ok(serde_json::to_string(&rows)?)
}

#[derive(Debug, Serialize)]
struct Titration {
    ph: Vec<f64>,
    charge: Vec<f64>,
    isoelectric_point: f64,
}

/// Net charge on an even pH grid over `[lo, hi]` with `points` samples, and the pI.
pub fn titration_json(sequence: &str, lo: f64, hi: f64, points: usize) -> Result<String> {
    if !(lo < hi) || points < 2 {
        return Err(Error::Config("need lo < hi and at least 2 points".into()));
    }
    let ph: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let charge = ph.iter().map(|&p| charge_at_ph(sequence, p)).collect::<Result<Vec<f64>>>()?;
    Ok(serde_json::to_string(&Titration { ph, charge, isoelectric_point: isoelectric_point(sequence)? })?)
}

#[derive(Debug, Serialize)]
struct ConceptSummary {
    name: String,
    flagged: bool,
    max_abs_weight: f64,
    /// Residues that most increase the concept, strongest first.
    increase: String,
    decrease: String,
}

#[derive(Debug, Serialize)]
struct Inspection {
    variant: Variant,
    layers: usize,
    hidden_dim: usize,
    parameters: usize,
    concepts: Vec<ConceptSummary>,
}

/// Architecture summary and, for CB checkpoints, per-concept weight diagnostics.
pub fn inspect_json(checkpoint: &[u8]) -> Result<String> {
    let ck = Checkpoint::from_bytes(checkpoint)?;
    let cfg = &ck.model.config;
    let mut concepts = Vec::new();
    if ck.model.variant() == Variant::Cb {
        let m = export_decoder_weights(&ck.model, &ck.registry.names())?;
        let report = debug_report(&m, DEFAULT_FLAG_RATIO, None);
        for (i, d) in report.concepts.into_iter().enumerate() {
            let top = |dir| counterfactual_rank(&m, i, dir).into_iter().take(5).collect();
            concepts.push(ConceptSummary {
                name: d.name,
                flagged: d.flagged,
                max_abs_weight: d.max_abs_weight,
                increase: top(Direction::Increase),
                decrease: top(Direction::Decrease),
            });
        }
    }
    let inspection =
        Inspection { variant: cfg.variant, layers: cfg.layers, hidden_dim: cfg.hidden_dim, parameters: ck.model.params.len(), concepts };
    Ok(serde_json::to_string(&inspection)?)
}

#[derive(Debug, Serialize)]
struct Steered {
    input: String,
    output: String,
    masked_positions: Vec<usize>,
    before: f64,
    after: f64,
}

/// One intervention with occlusion attribution and greedy decoding.
/// `direction` is `+` or `-`; values are normalized with the checkpoint stats.
pub fn intervene_json(checkpoint: &[u8], sequence: &str, concept: &str, direction: &str, mask_fraction: f64) -> Result<String> {
    let ck = Checkpoint::from_bytes(checkpoint)?;
    let i = ck.registry.index_of(concept).ok_or_else(|| Error::UnsupportedConcept(concept.to_string()))?;
    let direction = Direction::parse(direction).ok_or_else(|| Error::Config(format!("bad direction `{direction}`")))?;
    let ts = tokenize_unpadded(sequence, ck.model.config.max_len)?;
    let iv = Intervener::new(&ck.model, &ck.registry, &ck.stats);
    let mut req = InterventionRequest::new(i, direction);
    req.mask_fraction = mask_fraction;
    req.attribution = if ck.model.variant() == Variant::C { AttributionMethod::Random } else { AttributionMethod::Occlusion };
    let res = iv.intervene_single(&ts, &req)?;
    let out = res.output();
    Ok(serde_json::to_string(&Steered {
        input: res.input.sequence.clone(),
        output: out.sequence.clone(),
        masked_positions: out.masked_positions.clone(),
        before: res.input.normalized[i],
        after: out.normalized[i],
    })?)
}

fn js(r: Result<String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn concepts(sequence: &str) -> Result<String, JsError> {
    js(concepts_json(sequence))
}

#[wasm_bindgen]
pub fn titration(sequence: &str, lo: f64, hi: f64, points: usize) -> Result<String, JsError> {
    js(titration_json(sequence, lo, hi, points))
}

#[wasm_bindgen]
pub fn inspect(checkpoint: &[u8]) -> Result<String, JsError> {
    js(inspect_json(checkpoint))
}

#[wasm_bindgen]
pub fn intervene(checkpoint: &[u8], sequence: &str, concept: &str, direction: &str, mask_fraction: f64) -> Result<String, JsError> {
    js(intervene_json(checkpoint, sequence, concept, direction, mask_fraction))
}
