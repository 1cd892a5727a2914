//! Perplexity, intervention accuracy, concept shifts, correlation matrices and
//! naturalness.

use serde::{Deserialize, Serialize};

use crate::concepts::pearson_matrix;
use crate::error::{Error, Result};
use crate::intervene::{Direction, Intervener, InterventionRequest};
use crate::model::{CbModel, Example, Variant};
use crate::nn::{self, Real};
use crate::rng::{self, Stream};
use crate::seqio::{apply_mask, MaskSpec, TokenSequence};
use crate::train::Item;

fn fingerprint(ids: &[u32]) -> u64 {
    ids.iter().fold(0x51_7C_C1_B7_27_22_0A_95, |h, &t| rng::derive(h, Stream::Eval, t as u64))
}

/// `exp` of the mean masked-token negative log-likelihood. Masks depend only on
/// `seed` and each sequence's content, so the result ignores corpus order.
/// CB models predict their own concepts; C/CC models condition on the items'
/// concepts; AR models score next tokens.
pub fn perplexity<F: Real>(model: &CbModel<F>, items: &[&Item], mask_rate: f64, seed: u64) -> Result<f64> {
    let (sum, count) = nll_sum(model, items, mask_rate, seed)?;
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((sum / count as f64).exp())
}

fn nll_sum<F: Real>(model: &CbModel<F>, items: &[&Item], mask_rate: f64, seed: u64) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut count = 0;
    for chunk in items.chunks(64) {
        let mut examples = Vec::with_capacity(chunk.len());
        let mut targets = Vec::new();
        for it in chunk {
            let ts = it.tokens.trimmed();
            if model.variant() == Variant::Ar {
                targets.extend_from_slice(&ts.ids()[1..]);
                examples.push(Example::new(ts.clone(), (0..ts.len() - 1).collect()));
                continue;
            }
            let key = rng::derive(seed, Stream::Eval, fingerprint(ts.ids()));
            let (masked, plan) = apply_mask(&ts, &MaskSpec::Rate(mask_rate), key)?;
            targets.extend(plan.positions.iter().map(|&p| ts.ids()[p]));
            let mut ex = Example::new(masked, plan.positions);
            if model.variant().has_tags() {
                ex.concepts = Some(it.concepts.clone());
            }
            examples.push(ex);
        }
        let tape = model.forward_batch::<rand_chacha::ChaCha8Rng>(&examples, None)?;
        for (row, &t) in tape.logits.rows().into_iter().zip(&targets) {
            sum -= nn::log_softmax(row)[t as usize].f64();
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Mean per-token log-likelihood under an autoregressive model, over every
/// token after CLS (residues and EOS).
pub fn naturalness<F: Real>(ar: &CbModel<F>, ts: &TokenSequence) -> Result<f64> {
    let trimmed = ts.trimmed();
    let lp = ar.forward_autoregressive(&trimmed)?;
    let ids = trimmed.ids();
    let n = lp.nrows();
    let total: f64 = (0..n).map(|t| lp[[t, ids[t + 1] as usize]].f64()).sum();
    Ok(total / n as f64)
}

/// Change of one concept after an intervention in a given direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub direction: Direction,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub positive: f64,
    pub negative: f64,
    pub mean: f64,
}

/// Fraction of outcomes that moved strictly in the requested direction, per
/// direction, and their mean. A zero change is a failure. A direction with no
/// outcomes is left out of the mean.
pub fn intervention_accuracy(outcomes: &[Outcome]) -> Accuracy {
    let frac = |d: Direction| {
        let sel: Vec<&Outcome> = outcomes.iter().filter(|o| o.direction == d).collect();
        if sel.is_empty() {
            None
        } else {
            Some(sel.iter().filter(|o| d.sign() * o.delta > 0.0).count() as f64 / sel.len() as f64)
        }
    };
    let (p, n) = (frac(Direction::Increase), frac(Direction::Decrease));
    let mean = match (p, n) {
        (Some(a), Some(b)) => (a + b) / 2.0,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 0.0,
    };
    Accuracy { positive: p.unwrap_or(0.0), negative: n.unwrap_or(0.0), mean }
}

/// Mean of `direction · Δ`.
pub fn mean_concept_shift(outcomes: &[Outcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().map(|o| o.direction.sign() * o.delta).sum::<f64>() / outcomes.len() as f64
}

/// One row of the binary intervention correlation: for interventions on one
/// concept, `frac(Δ_j moved with the direction) − frac(Δ_j moved against)`.
/// Zero changes count as neither.
pub fn binary_correlation_row(samples: &[(Direction, Vec<f64>)], k: usize) -> Vec<f64> {
    let mut row = vec![0.0; k];
    if samples.is_empty() {
        return row;
    }
    for (d, deltas) in samples {
        for (j, &dj) in deltas.iter().enumerate().take(k) {
            let s = d.sign() * dj;
            if s > 0.0 {
                row[j] += 1.0;
            } else if s < 0.0 {
                row[j] -= 1.0;
            }
        }
    }
    row.iter_mut().for_each(|v| *v /= samples.len() as f64);
    row
}

/// Items whose normalized concept `i` lies in the lowest (for `+`) or highest
/// (for `−`) `quantile` of `items`, up to `limit`, in corpus order.
pub fn extreme_items<'a>(items: &[&'a Item], i: usize, direction: Direction, quantile: f64, limit: usize) -> Vec<&'a Item> {
    let mut values: Vec<f64> = items.iter().map(|it| it.concepts.values[i]).collect();
    values.sort_by(f64::total_cmp);
    if values.is_empty() {
        return Vec::new();
    }
    let cut = ((values.len() as f64 * quantile).ceil() as usize).clamp(1, values.len());
    let selected: Vec<&Item> = match direction {
        Direction::Increase => {
            let thr = values[cut - 1];
            items.iter().copied().filter(|it| it.concepts.values[i] <= thr).collect()
        }
        Direction::Decrease => {
            let thr = values[values.len() - cut];
            items.iter().copied().filter(|it| it.concepts.values[i] >= thr).collect()
        }
    };
    selected.into_iter().take(limit).collect()
}

/// Runs single-concept interventions on the extreme items for concept `i` and
/// returns one outcome per intervention (normalized change of concept `i`).
pub fn intervention_outcomes<F: Real>(
    iv: &Intervener<'_, F>,
    items: &[&Item],
    i: usize,
    per_direction: usize,
    request: &InterventionRequest,
) -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    for direction in [Direction::Increase, Direction::Decrease] {
        for it in extreme_items(items, i, direction, 0.2, per_direction) {
            let req = InterventionRequest { concept: i, direction, target: None, ..request.clone() };
            let res = iv.intervene_single(&it.tokens, &req)?;
            out.push(Outcome { direction, delta: res.delta(i) });
        }
    }
    Ok(out)
}

/// k × k binary intervention correlation over `concepts`.
pub fn intervention_correlation<F: Real>(
    iv: &Intervener<'_, F>,
    items: &[&Item],
    concepts: &[usize],
    per_direction: usize,
    request: &InterventionRequest,
) -> Result<Vec<Vec<f64>>> {
    let k = iv.k();
    let mut matrix = vec![vec![0.0; k]; k];
    for &i in concepts {
        let mut samples = Vec::new();
        for direction in [Direction::Increase, Direction::Decrease] {
            for it in extreme_items(items, i, direction, 0.2, per_direction) {
                let req = InterventionRequest { concept: i, direction, target: None, ..request.clone() };
                let res = iv.intervene_single(&it.tokens, &req)?;
                samples.push((direction, res.deltas()));
            }
        }
        matrix[i] = binary_correlation_row(&samples, k);
    }
    Ok(matrix)
}

/// Pearson correlation between concepts across a corpus (rows are sequences).
pub fn ground_truth_concept_correlation(values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    pearson_matrix(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEval {
    pub name: String,
    pub accuracy: Accuracy,
    pub mean_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub concepts: Vec<ConceptEval>,
    pub ground_truth_correlation: Vec<Vec<f64>>,
    pub intervention_correlation: Option<Vec<Vec<f64>>>,
}

/// What [`evaluate`] measures.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub mask_rate: f64,
    pub seed: u64,
    /// Concept indices to intervene on; empty skips interventions.
    pub concepts: Vec<usize>,
    pub per_direction: usize,
    /// Template for every intervention (concept and direction are replaced).
    pub request: InterventionRequest,
    pub correlation: bool,
}

/// Perplexity, per-concept intervention accuracy and shift, and the
/// correlation matrices, over `items`.
pub fn evaluate<F: Real>(iv: &Intervener<'_, F>, items: &[&Item], settings: &EvalSettings) -> Result<EvalReport> {
    let perplexity = perplexity(iv.model, items, settings.mask_rate, settings.seed)?;
    let names = iv.registry.names();
    let mut concepts = Vec::with_capacity(settings.concepts.len());
    for &i in &settings.concepts {
        let outcomes = intervention_outcomes(iv, items, i, settings.per_direction, &settings.request)?;
        concepts.push(ConceptEval { name: names[i].clone(), accuracy: intervention_accuracy(&outcomes), mean_shift: mean_concept_shift(&outcomes) });
    }
    let values: Vec<Vec<f64>> = items.iter().map(|it| it.concepts.values.clone()).collect();
    let intervention_correlation = if settings.correlation && !settings.concepts.is_empty() {
        Some(intervention_correlation(iv, items, &settings.concepts, settings.per_direction, &settings.request)?)
    } else {
        None
    };
    Ok(EvalReport { perplexity, concepts, ground_truth_correlation: ground_truth_concept_correlation(&values), intervention_correlation })
}
