//! Decoder-weight interpretation.
//!
//! The decoder is linear in `[z, h̃]` and `z_i = ĉ_i · e_i`, so the logit of
//! token `t` gains exactly `ĉ_i · M[i, t]` from concept `i`, where
//! `M[i, t] = W_dec[t, slice_i] · e_i`.

use std::io::Write;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::Direction;
use crate::model::{CbModel, ForwardTrace, Variant};
use crate::nn::Real;
use crate::seqio::{Vocabulary, AMINO_ACIDS, FIRST_AMINO};

/// Fraction of the median row maximum below which a concept is flagged.
pub const DEFAULT_FLAG_RATIO: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveWeightMatrix {
    pub concepts: Vec<String>,
    pub tokens: Vec<String>,
    /// k × vocab, row-major.
    pub weights: Vec<Vec<f64>>,
}

impl EffectiveWeightMatrix {
    pub fn get(&self, concept: usize, token: usize) -> f64 {
        self.weights[concept][token]
    }

    /// Largest absolute entry of each row.
    pub fn row_max_abs(&self) -> Vec<f64> {
        self.weights.iter().map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "concept")?;
        for t in &self.tokens {
            write!(w, ",{t}")?;
        }
        writeln!(w)?;
        for (name, row) in self.concepts.iter().zip(&self.weights) {
            write!(w, "{name}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn require_cb<F: Real>(model: &CbModel<F>) -> Result<()> {
    if model.variant() == Variant::Cb {
        Ok(())
    } else {
        Err(Error::Variant { expected: "cb".into(), found: model.variant().to_string() })
    }
}

/// `M[i, t] = W_dec[t, slice_i] · e_i`, labelled by concept and token.
pub fn export_decoder_weights<F: Real>(model: &CbModel<F>, concept_names: &[String]) -> Result<EffectiveWeightMatrix> {
    require_cb(model)?;
    let m = effective_weights(model);
    let k = model.k();
    let concepts = if concept_names.len() == k { concept_names.to_vec() } else { (0..k).map(|i| format!("concept_{i}")).collect() };
    Ok(EffectiveWeightMatrix {
        concepts,
        tokens: Vocabulary::standard().tokens().to_vec(),
        weights: m.rows().into_iter().map(|r| r.to_vec()).collect(),
    })
}

fn effective_weights<F: Real>(model: &CbModel<F>) -> Array2<f64> {
    let ce = model.config.concept_emb_dim;
    let dec = &model.params.decoder;
    let e = &model.params.concept_emb;
    let mut m = Array2::zeros((model.k(), dec.nrows()));
    for i in 0..model.k() {
        let slice = dec.slice(s![.., i * ce..(i + 1) * ce]);
        for t in 0..dec.nrows() {
            m[[i, t]] = (0..ce).map(|j| slice[[t, j]].f64() * e[[i, j]].f64()).sum();
        }
    }
    m
}

/// Per-concept additive contribution to every logit (k × vocab):
/// `ĉ_i · M[i, t]` with the concept values the decoder saw. The same for every
/// predicted position of the trace.
pub fn concept_contribution<F: Real>(model: &CbModel<F>, trace: &ForwardTrace<F>) -> Result<Array2<f64>> {
    require_cb(model)?;
    let m = effective_weights(model);
    let c: Array1<f64> = trace.c_used.mapv(|v| v.f64());
    Ok(&m * &c.insert_axis(ndarray::Axis(1)))
}

/// Logit part contributed by the unknown embedding at predicted row `row`.
pub fn unknown_contribution<F: Real>(model: &CbModel<F>, trace: &ForwardTrace<F>, row: usize) -> Result<Array1<f64>> {
    require_cb(model)?;
    let pos = trace.masked_positions[row];
    let cw = model.config.concept_width();
    let w = model.params.decoder.slice(s![.., cw..]);
    Ok(w.dot(&trace.h_tilde.row(pos)).mapv(|v| v.f64()))
}

/// Canonical amino acids ordered by `M[i, ·]`: ascending to decrease the
/// concept, descending to increase it.
pub fn counterfactual_rank(m: &EffectiveWeightMatrix, i: usize, direction: Direction) -> Vec<char> {
    let mut aa: Vec<(char, f64)> = AMINO_ACIDS.iter().enumerate().map(|(a, &c)| (c, m.weights[i][FIRST_AMINO as usize + a])).collect();
    aa.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    if direction == Direction::Increase {
        aa.reverse();
    }
    aa.into_iter().map(|(c, _)| c).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDiagnostics {
    pub name: String,
    pub max_abs_weight: f64,
    pub flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugReport {
    pub threshold: f64,
    pub flagged: Vec<String>,
    pub concepts: Vec<ConceptDiagnostics>,
}

/// Flags concepts whose largest effective weight is below `ratio ×` the median
/// over concepts of that quantity.
pub fn debug_report(m: &EffectiveWeightMatrix, ratio: f64, validation_mse: Option<&[f64]>) -> DebugReport {
    let maxes = m.row_max_abs();
    let mut sorted = maxes.clone();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let threshold = ratio * median;
    let concepts: Vec<ConceptDiagnostics> = m
        .concepts
        .iter()
        .zip(&maxes)
        .enumerate()
        .map(|(i, (name, &mx))| ConceptDiagnostics {
            name: name.clone(),
            max_abs_weight: mx,
            flagged: mx < threshold || mx == 0.0,
            validation_mse: validation_mse.and_then(|v| v.get(i).copied()),
        })
        .collect();
    let flagged = concepts.iter().filter(|c| c.flagged).map(|c| c.name.clone()).collect();
    DebugReport { threshold, flagged, concepts }
}
