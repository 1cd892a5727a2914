//! Feature attribution, coordinate selection and concept interventions.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{compute_all, normalize, ConceptKind, ConceptRegistry, ConceptVector, NormalizationStats, NormalizeMode};
use crate::error::{Error, Result};
use crate::model::{CbModel, Example, Upstream, Variant};
use crate::nn::Real;
use crate::rng::{self, Stream};
use crate::seqio::{detokenize, mask_count, TokenId, TokenSequence, FIRST_AMINO, MASK, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "+", alias = "increase")]
    Increase,
    #[serde(rename = "-", alias = "decrease")]
    Decrease,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Increase => 1.0,
            Direction::Decrease => -1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "+" | "increase" | "up" => Some(Direction::Increase),
            "-" | "decrease" | "down" => Some(Direction::Decrease),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Occlusion,
    Gradient,
    GradXInput,
    #[default]
    GradXInputMinusMask,
    Random,
}

impl AttributionMethod {
    pub const ALL: [AttributionMethod; 5] = [
        AttributionMethod::Occlusion,
        AttributionMethod::Gradient,
        AttributionMethod::GradXInput,
        AttributionMethod::GradXInputMinusMask,
        AttributionMethod::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttributionMethod::Occlusion => "occlusion",
            AttributionMethod::Gradient => "gradient",
            AttributionMethod::GradXInput => "grad_x_input",
            AttributionMethod::GradXInputMinusMask => "grad_x_input_minus_mask",
            AttributionMethod::Random => "random",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Attribution scores, one row per token position and one column per concept.
/// Non-residue positions hold 0 and are never selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub method: AttributionMethod,
    pub scores: Vec<Vec<f64>>,
}

impl AttributionMatrix {
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.scores.iter().map(|r| r[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decode {
    #[default]
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionRequest {
    pub concept: usize,
    pub direction: Direction,
    /// Target in normalized space; defaults to 1 for `+` and 0 for `−`.
    #[serde(default)]
    pub target: Option<f64>,
    #[serde(default = "default_fraction")]
    pub mask_fraction: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub decode: Decode,
    #[serde(default)]
    pub attribution: AttributionMethod,
    /// Seed for random attribution.
    #[serde(default)]
    pub seed: u64,
}

fn default_fraction() -> f64 {
    0.05
}

fn default_iterations() -> usize {
    1
}

impl InterventionRequest {
    pub fn new(concept: usize, direction: Direction) -> Self {
        InterventionRequest {
            concept,
            direction,
            target: None,
            mask_fraction: default_fraction(),
            iterations: 1,
            decode: Decode::Greedy,
            attribution: AttributionMethod::default(),
            seed: 0,
        }
    }

    pub fn target_value(&self) -> f64 {
        self.target.unwrap_or(match self.direction {
            Direction::Increase => 1.0,
            Direction::Decrease => 0.0,
        })
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.concept >= k {
            return Err(Error::UnsupportedConcept(format!("concept index {} (model has {k})", self.concept)));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(Error::InvalidMaskPlan(format!("mask_fraction {} outside (0, 1]", self.mask_fraction)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if let Decode::Sample { temperature, .. } = self.decode {
            if !(temperature > 0.0) {
                return Err(Error::Config("sampling temperature must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A sequence and its recomputed concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub sequence: String,
    /// Positions regenerated to produce this sequence (empty for the input).
    pub masked_positions: Vec<usize>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub naturalness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub input: Snapshot,
    pub iterations: Vec<Snapshot>,
}

impl InterventionResult {
    pub fn output(&self) -> &Snapshot {
        self.iterations.last().unwrap_or(&self.input)
    }

    /// Normalized change of concept `i` after the last iteration.
    pub fn delta(&self, i: usize) -> f64 {
        self.output().normalized[i] - self.input.normalized[i]
    }

    /// Normalized change of concept `i` after iteration `n` (1-based).
    pub fn delta_after(&self, n: usize, i: usize) -> f64 {
        self.iterations[n - 1].normalized[i] - self.input.normalized[i]
    }

    pub fn deltas(&self) -> Vec<f64> {
        (0..self.input.normalized.len()).map(|i| self.delta(i)).collect()
    }
}

/// Positions to regenerate: `max(1, round(fraction · n))` residues, smallest
/// scores first for `+`, largest first for `−`, ties to the lower position.
pub fn select_coordinates(scores: &[f64], residues: std::ops::Range<usize>, direction: Direction, fraction: f64) -> Result<Vec<usize>> {
    let residues = residues.start..residues.end.min(scores.len());
    if residues.is_empty() {
        return Err(Error::NothingToMask);
    }
    let mut order: Vec<usize> = residues.clone().collect();
    order.sort_by(|&a, &b| {
        let c = scores[a].total_cmp(&scores[b]);
        let c = if direction == Direction::Decrease { c.reverse() } else { c };
        c.then(a.cmp(&b))
    });
    order.truncate(mask_count(fraction, residues.len()));
    Ok(order)
}

/// I.i.d. uniform scores in [0, 1) at residue positions, 0 elsewhere.
pub fn random_attribution(ts: &TokenSequence, seed: u64) -> Vec<f64> {
    let mut r = rng::keyed(seed, Stream::Attribution, ts.len() as u64);
    let residues = ts.residue_positions();
    (0..ts.len()).map(|p| if residues.contains(&p) { r.random::<f64>() } else { 0.0 }).collect()
}

/// Runs attributions and interventions against one model, recomputing concepts
/// with `registry` and normalizing with `stats` (the model's training stats).
#[derive(Debug, Clone, Copy)]
pub struct Intervener<'a, F: Real> {
    pub model: &'a CbModel<F>,
    pub registry: &'a ConceptRegistry,
    pub stats: &'a NormalizationStats,
    /// Stats used to report concept changes; defaults to `stats`.
    pub measure: &'a NormalizationStats,
    pub naturalness: Option<&'a CbModel<F>>,
}

impl<'a, F: Real> Intervener<'a, F> {
    pub fn new(model: &'a CbModel<F>, registry: &'a ConceptRegistry, stats: &'a NormalizationStats) -> Self {
        Intervener { model, registry, stats, measure: stats, naturalness: None }
    }

    pub fn with_measure(mut self, measure: &'a NormalizationStats) -> Self {
        self.measure = measure;
        self
    }

    pub fn with_naturalness(mut self, ar: &'a CbModel<F>) -> Self {
        self.naturalness = Some(ar);
        self
    }

    pub fn k(&self) -> usize {
        self.model.k()
    }

    fn tags(&self, ts: &TokenSequence) -> Result<ConceptVector> {
        let seq = detokenize(&ts.trimmed())?;
        normalize(&compute_all(&seq, self.registry)?, self.stats, NormalizeMode::Clip)
    }

    fn snapshot(&self, ts: &TokenSequence, masked_positions: Vec<usize>) -> Result<Snapshot> {
        let sequence = detokenize(&ts.trimmed())?;
        let raw = compute_all(&sequence, self.registry)?;
        let normalized = normalize(&raw, self.measure, NormalizeMode::Clip)?.values;
        let naturalness = match self.naturalness {
            Some(ar) => Some(crate::evaluate::naturalness(ar, ts)?),
            None => None,
        };
        Ok(Snapshot { sequence, masked_positions, raw: raw.values, normalized, naturalness })
    }

    fn example(&self, ts: TokenSequence, predict: Vec<usize>) -> Result<Example> {
        let mut ex = Example::new(ts, predict);
        if self.model.variant().has_tags() {
            ex.concepts = Some(self.tags(&ex.tokens)?);
        }
        Ok(ex)
    }

    /// `ĉ` for an unmasked sequence.
    pub fn concept_predictions(&self, ts: &TokenSequence) -> Result<Vec<f64>> {
        self.require_head()?;
        let tape = self.model.forward_batch::<rand_chacha::ChaCha8Rng>(&[self.example(ts.trimmed(), vec![])?], None)?;
        Ok(tape.c_hat.row(0).iter().map(|v| v.f64()).collect())
    }

    fn require_head(&self) -> Result<()> {
        if self.model.variant().has_concept_head() {
            Ok(())
        } else {
            Err(Error::Variant { expected: "cb or cc".into(), found: self.model.variant().to_string() })
        }
    }

    /// Scores for every concept at every position.
    pub fn attribute_all(&self, ts: &TokenSequence, method: AttributionMethod, seed: u64) -> Result<AttributionMatrix> {
        let ts = ts.trimmed();
        let k = self.k();
        let scores = match method {
            AttributionMethod::Random => {
                let col = random_attribution(&ts, seed);
                col.iter().map(|&v| vec![v; k]).collect()
            }
            AttributionMethod::Occlusion => self.occlusion(&ts)?,
            _ => {
                let mut rows = vec![vec![0.0; k]; ts.len()];
                for i in 0..k {
                    for (p, v) in self.gradient_column(&ts, i, method)?.into_iter().enumerate() {
                        rows[p][i] = v;
                    }
                }
                rows
            }
        };
        Ok(AttributionMatrix { method, scores })
    }

    /// Scores for concept `i` at every position.
    pub fn attribute(&self, ts: &TokenSequence, i: usize, method: AttributionMethod, seed: u64) -> Result<Vec<f64>> {
        let ts = ts.trimmed();
        match method {
            AttributionMethod::Random => Ok(random_attribution(&ts, seed)),
            AttributionMethod::Occlusion => Ok(self.occlusion(&ts)?.iter().map(|r| r[i]).collect()),
            _ => self.gradient_column(&ts, i, method),
        }
    }

    /// `ĉ(x) − ĉ(x with t → MASK)` for every residue position `t`.
    fn occlusion(&self, ts: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        self.require_head()?;
        let k = self.k();
        let positions: Vec<usize> = ts.residue_positions().filter(|&p| ts.ids()[p] != MASK).collect();
        let mut examples = vec![self.example(ts.clone(), vec![])?];
        for &p in &positions {
            let mut ex = self.example(ts.with_token(p, MASK)?, vec![])?;
            // tags stay those of the unoccluded sequence
            ex.concepts = examples[0].concepts.clone();
            examples.push(ex);
        }
        let mut c_hat = Array2::<F>::zeros((0, k));
        for chunk in examples.chunks(128) {
            let tape = self.model.forward_batch::<rand_chacha::ChaCha8Rng>(chunk, None)?;
            c_hat = ndarray::concatenate(ndarray::Axis(0), &[c_hat.view(), tape.c_hat.view()]).expect("same width");
        }
        let mut rows = vec![vec![0.0; k]; ts.len()];
        for (n, &p) in positions.iter().enumerate() {
            for i in 0..k {
                rows[p][i] = c_hat[[0, i]].f64() - c_hat[[n + 1, i]].f64();
            }
        }
        Ok(rows)
    }

    /// Gradient of `ĉ_i` with respect to each input token embedding, reduced per method.
    fn gradient_column(&self, ts: &TokenSequence, i: usize, method: AttributionMethod) -> Result<Vec<f64>> {
        self.require_head()?;
        let model = self.model;
        let ex = self.example(ts.clone(), vec![])?;
        let tape = model.forward_batch::<rand_chacha::ChaCha8Rng>(&[ex], None)?;
        let mut dc = Array2::zeros((1, self.k()));
        dc[[0, i]] = F::one();
        let up = Upstream { dlogits: Array2::zeros((0, VOCAB_SIZE)), dc_hat: Some(dc), dz: None, dh_tilde: None };
        let (_, dx) = model.backward(&tape, &up);
        let emb = &model.params.token_emb;
        let mut out = vec![0.0; ts.len()];
        for &(row, id) in &tape.token_rows {
            let pos = if row == 0 { 0 } else { row - if model.variant().has_tags() { model.k() } else { 0 } };
            if !ts.residue_positions().contains(&pos) || id == MASK {
                continue;
            }
            let g = dx.row(row);
            let t = emb.row(id as usize);
            let m = emb.row(MASK as usize);
            out[pos] = match method {
                AttributionMethod::Gradient => g.iter().map(|v| v.f64().abs()).sum(),
                AttributionMethod::GradXInput => g.iter().zip(t.iter()).map(|(a, b)| a.f64() * b.f64()).sum(),
                AttributionMethod::GradXInputMinusMask => {
                    g.iter().zip(t.iter().zip(m.iter())).map(|(a, (b, c))| a.f64() * (b.f64() - c.f64())).sum()
                }
                AttributionMethod::Occlusion | AttributionMethod::Random => unreachable!("handled by caller"),
            };
        }
        Ok(out)
    }

    /// Regenerates `positions` of `ts`, with concept `i` set to `value` when given.
    pub fn regenerate(&self, ts: &TokenSequence, positions: &[usize], set: Option<(usize, f64)>, decode: &Decode, round: u64) -> Result<TokenSequence> {
        let ts = ts.trimmed();
        if positions.is_empty() {
            return Ok(ts);
        }
        let mut masked = ts.clone();
        for &p in positions {
            if !ts.residue_positions().contains(&p) {
                return Err(Error::InvalidMaskPlan(format!("position {p} is not a residue")));
            }
            masked = masked.with_token(p, MASK)?;
        }
        let mut ex = self.example(masked, positions.to_vec())?;
        if let Some((i, v)) = set {
            match self.model.variant() {
                Variant::Cb => ex.overrides = vec![(i, v)],
                Variant::C | Variant::Cc => {
                    let tags = ex.concepts.as_mut().expect("tagged example");
                    tags.values[i] = v;
                    tags.observed[i] = true;
                }
                Variant::Ar => unreachable!("rejected earlier"),
            }
        }
        let tape = self.model.forward_batch::<rand_chacha::ChaCha8Rng>(&[ex], None)?;
        let mut out = ts;
        for (m, &p) in positions.iter().enumerate() {
            let logits: Vec<f64> = (0..20).map(|a| tape.logits[[m, FIRST_AMINO as usize + a]].f64()).collect();
            let choice = match decode {
                Decode::Greedy => {
                    let mut best = 0;
                    for a in 1..20 {
                        if logits[a] > logits[best] {
                            best = a;
                        }
                    }
                    best
                }
                Decode::Sample { temperature, seed } => {
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = logits.iter().map(|l| ((l - mx) / temperature).exp()).collect();
                    let total: f64 = w.iter().sum();
                    let mut r = rng::lane(*seed, Stream::Decode, round, p as u64);
                    let mut u = r.random::<f64>() * total;
                    let mut pick = 19;
                    for (a, wa) in w.iter().enumerate() {
                        if u < *wa {
                            pick = a;
                            break;
                        }
                        u -= wa;
                    }
                    pick
                }
            };
            out = out.with_token(p, FIRST_AMINO + choice as TokenId)?;
        }
        Ok(out)
    }

    fn check(&self, req: &InterventionRequest) -> Result<()> {
        if self.model.variant() == Variant::Ar {
            return Err(Error::Variant { expected: "cb, c or cc".into(), found: "ar".into() });
        }
        req.validate(self.k())?;
        if self.registry.kind(req.concept) == Some(ConceptKind::Categorical) {
            return Err(Error::UnsupportedConcept(self.registry.names()[req.concept].clone()));
        }
        if self.model.variant() == Variant::C && req.attribution != AttributionMethod::Random {
            return Err(Error::Variant { expected: "cb or cc for attribution".into(), found: "c".into() });
        }
        Ok(())
    }

    fn iterate(&self, start: &TokenSequence, req: &InterventionRequest, round0: u64, out: &mut Vec<Snapshot>) -> Result<TokenSequence> {
        self.check(req)?;
        let mut current = start.trimmed();
        for it in 0..req.iterations {
            let round = round0 + it as u64;
            let seed = rng::derive(req.seed, Stream::Attribution, round);
            let scores = self.attribute(&current, req.concept, req.attribution, seed)?;
            let positions = select_coordinates(&scores, current.residue_positions(), req.direction, req.mask_fraction)?;
            current = self.regenerate(&current, &positions, Some((req.concept, req.target_value())), &req.decode, round)?;
            out.push(self.snapshot(&current, positions)?);
        }
        Ok(current)
    }

    /// Attribute, mask, regenerate with the concept set to its target; repeated
    /// `iterations` times, each round starting from the previous output.
    pub fn intervene_single(&self, ts: &TokenSequence, req: &InterventionRequest) -> Result<InterventionResult> {
        self.check(req)?;
        let input = self.snapshot(&ts.trimmed(), vec![])?;
        let mut iterations = Vec::new();
        self.iterate(ts, req, 0, &mut iterations)?;
        Ok(InterventionResult { input, iterations })
    }

    /// Applies each request in order to the output of the previous one.
    pub fn intervene_multi(&self, ts: &TokenSequence, reqs: &[InterventionRequest]) -> Result<InterventionResult> {
        for r in reqs {
            self.check(r)?;
        }
        let input = self.snapshot(&ts.trimmed(), vec![])?;
        let mut iterations = Vec::new();
        let mut current = ts.trimmed();
        let mut round = 0;
        for r in reqs {
            current = self.iterate(&current, r, round, &mut iterations)?;
            round += r.iterations as u64;
        }
        Ok(InterventionResult { input, iterations })
    }

    /// Sets `ĉ_i` to `factor ×` its largest training activation and regenerates
    /// a random quarter of the residues.
    pub fn clamp_concept(&self, ts: &TokenSequence, i: usize, factor: f64, seed: u64) -> Result<InterventionResult> {
        if self.model.variant() != Variant::Cb {
            return Err(Error::Variant { expected: "cb".into(), found: self.model.variant().to_string() });
        }
        if i >= self.k() {
            return Err(Error::UnsupportedConcept(format!("concept index {i}")));
        }
        let ts = ts.trimmed();
        let input = self.snapshot(&ts, vec![])?;
        let scores = random_attribution(&ts, seed);
        let positions = select_coordinates(&scores, ts.residue_positions(), Direction::Increase, 0.25)?;
        let value = factor * self.model.concept_max_activation[i];
        let out = self.regenerate(&ts, &positions, Some((i, value)), &Decode::Greedy, 0)?;
        let snap = self.snapshot(&out, positions)?;
        Ok(InterventionResult { input, iterations: vec![snap] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::fit_normalization;
    use crate::model::ModelConfig;
    use crate::seqio::tokenize_unpadded;

    fn setup(variant: Variant) -> (CbModel<f64>, ConceptRegistry, NormalizationStats) {
        let reg = ConceptRegistry::builtin();
        let cfg = ModelConfig { layers: 1, hidden_dim: 8, heads: 2, k: reg.len(), variant, init_std: 0.3, seed: 11, ..Default::default() };
        let corpus: Vec<ConceptVector> =
            ["ACDEFGHIKLMNPQRSTVWY", "KKKKRRRDDE", "WWYYFFAAGG", "MNPQSTCCHV"].iter().map(|s| compute_all(s, &reg).unwrap()).collect();
        let stats = fit_normalization(&reg, &corpus);
        let mut m = CbModel::<f64>::new(cfg).unwrap();
        let cw = m.config.concept_width();
        let mut n = 0.0f64;
        m.params.decoder.slice_mut(ndarray::s![.., ..cw]).mapv_inplace(|_| {
            n += 1.0;
            (n * 0.37).sin() * 0.3
        });
        (m, reg, stats)
    }

    #[test]
    fn selection_rules() {
        let a = [0.0, 3.0, 1.0, 2.0, 0.0];
        assert_eq!(select_coordinates(&a, 1..4, Direction::Decrease, 0.2).unwrap(), vec![1]);
        assert_eq!(select_coordinates(&a, 1..4, Direction::Increase, 0.2).unwrap(), vec![2]);
        let tie = [0.0, 2.0, 2.0, 1.0, 0.0];
        assert_eq!(select_coordinates(&tie, 1..4, Direction::Decrease, 0.2).unwrap(), vec![1]);
        assert!(matches!(select_coordinates(&a, 1..1, Direction::Increase, 0.5), Err(Error::NothingToMask)));
    }

    #[test]
    fn random_scores() {
        let ts = tokenize_unpadded("ACDEFGHIKL", 32).unwrap();
        let a = random_attribution(&ts, 4);
        assert_eq!(a, random_attribution(&ts, 4));
        assert_eq!(a.len(), ts.len());
        assert!(ts.residue_positions().all(|p| (0.0..1.0).contains(&a[p])));
        assert_eq!(a[0], 0.0);
    }

    #[test]
    fn occlusion_matches_two_forward_passes() {
        let (m, reg, stats) = setup(Variant::Cb);
        let iv = Intervener::new(&m, &reg, &stats);
        let ts = tokenize_unpadded("ACDWFGHY", 32).unwrap();
        let a = iv.attribute(&ts, 1, AttributionMethod::Occlusion, 0).unwrap();
        let base = iv.concept_predictions(&ts).unwrap()[1];
        for p in ts.residue_positions() {
            let occ = iv.concept_predictions(&ts.with_token(p, MASK).unwrap()).unwrap()[1];
            assert!((a[p] - (base - occ)).abs() < 1e-12);
        }
        let masked = ts.with_token(3, MASK).unwrap();
        assert_eq!(iv.attribute(&masked, 1, AttributionMethod::Occlusion, 0).unwrap()[3], 0.0);
    }

    #[test]
    fn constant_head_gives_zero_scores() {
        let (mut m, reg, stats) = setup(Variant::Cb);
        m.params.concept_w.fill(0.0);
        let iv = Intervener::new(&m, &reg, &stats);
        let ts = tokenize_unpadded("ACDWFGHY", 32).unwrap();
        for method in [AttributionMethod::Occlusion, AttributionMethod::GradXInput, AttributionMethod::GradXInputMinusMask, AttributionMethod::Gradient] {
            assert!(iv.attribute(&ts, 0, method, 0).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradient_variant_non_negative() {
        let (m, reg, stats) = setup(Variant::Cb);
        let iv = Intervener::new(&m, &reg, &stats);
        let ts = tokenize_unpadded("ACDWFGHYKKE", 32).unwrap();
        let g = iv.attribute(&ts, 4, AttributionMethod::Gradient, 0).unwrap();
        assert!(g.iter().all(|&v| v >= 0.0));
        assert!(g.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn interventions_are_deterministic_and_preserve_length() {
        let (m, reg, stats) = setup(Variant::Cb);
        let iv = Intervener::new(&m, &reg, &stats);
        let ts = tokenize_unpadded("ACDWFGHYKKEMNPQRST", 32).unwrap();
        let req = InterventionRequest { iterations: 2, mask_fraction: 0.2, ..InterventionRequest::new(1, Direction::Increase) };
        let a = iv.intervene_single(&ts, &req).unwrap();
        assert_eq!(a, iv.intervene_single(&ts, &req).unwrap());
        assert_eq!(a.iterations.len(), 2);
        for snap in &a.iterations {
            assert_eq!(snap.sequence.len(), 18);
            let before: Vec<char> = a.input.sequence.chars().collect();
            // only the chosen positions may differ from the previous round's input
            assert!(snap.masked_positions.len() == 4);
            assert_eq!(before.len(), 18);
        }
        let single = iv.intervene_multi(&ts, std::slice::from_ref(&req)).unwrap();
        assert_eq!(single, a);
        let empty = iv.intervene_multi(&ts, &[]).unwrap();
        assert_eq!(empty.output().sequence, "ACDWFGHYKKEMNPQRST");
    }

    #[test]
    fn unmasked_positions_unchanged() {
        let (m, reg, stats) = setup(Variant::Cb);
        let iv = Intervener::new(&m, &reg, &stats);
        let ts = tokenize_unpadded("ACDWFGHYKKEMNPQRST", 32).unwrap();
        let req = InterventionRequest { mask_fraction: 0.3, ..InterventionRequest::new(2, Direction::Decrease) };
        let r = iv.intervene_single(&ts, &req).unwrap();
        let out: Vec<char> = r.output().sequence.chars().collect();
        for (i, c) in "ACDWFGHYKKEMNPQRST".chars().enumerate() {
            if !r.output().masked_positions.contains(&(i + 1)) {
                assert_eq!(out[i], c);
            }
        }
        // no positions, own prediction: identity
        let own = iv.concept_predictions(&ts).unwrap()[2];
        let same = iv.regenerate(&ts, &[], Some((2, own)), &Decode::Greedy, 0).unwrap();
        assert_eq!(same, ts);
    }

    #[test]
    fn variant_and_concept_checks() {
        let (m, reg, stats) = setup(Variant::C);
        let iv = Intervener::new(&m, &reg, &stats);
        let ts = tokenize_unpadded("ACDWFGHYKKE", 32).unwrap();
        let req = InterventionRequest::new(1, Direction::Increase);
        assert!(matches!(iv.intervene_single(&ts, &req), Err(Error::Variant { .. })));
        let random = InterventionRequest { attribution: AttributionMethod::Random, ..req.clone() };
        assert!(iv.intervene_single(&ts, &random).is_ok());

        let reg2 = ConceptRegistry::builtin().with_categorical("family").unwrap();
        let (m2, _, _) = setup(Variant::Cb);
        let mut cfg = m2.config.clone();
        cfg.k = reg2.len();
        let m2 = CbModel::<f64>::new(cfg).unwrap();
        let corpus: Vec<ConceptVector> = ["ACDEFGHIKLMNPQRSTVWY", "KKKKRRRDDE", "WWYYFFAAGG"].iter().map(|s| compute_all(s, &reg2).unwrap()).collect();
        let stats2 = fit_normalization(&reg2, &corpus);
        let iv2 = Intervener::new(&m2, &reg2, &stats2);
        let cat = InterventionRequest::new(reg2.len() - 1, Direction::Increase);
        assert!(matches!(iv2.intervene_single(&ts, &cat), Err(Error::UnsupportedConcept(_))));
    }

    #[test]
    fn clamp_scales_logit_shift() {
        let (mut m, reg, stats) = setup(Variant::Cb);
        m.concept_max_activation = vec![0.8; m.k()];
        let iv = Intervener::new(&m, &reg, &stats);
        let ts = tokenize_unpadded("ACDWFGHYKKE", 32).unwrap();
        let (masked, _) = crate::seqio::apply_mask(&ts, &crate::seqio::MaskSpec::Positions(vec![2]), 0).unwrap();
        let base = m.forward(&masked, None, crate::model::ConceptMode::Inference).unwrap();
        let at = |f: f64| {
            let ov = [(1usize, f * 0.8)];
            m.forward(&masked, None, crate::model::ConceptMode::Intervened(&ov)).unwrap().logits
        };
        let (l1, l10) = (at(1.0), at(10.0));
        let s1: f64 = (&l1 - &base.logits).iter().map(|v| v.abs()).sum();
        let s10: f64 = (&l10 - &base.logits).iter().map(|v| v.abs()).sum();
        assert!(s10 > s1);
        let r = iv.clamp_concept(&ts, 1, 10.0, 3).unwrap();
        assert_eq!(r.output().masked_positions.len(), 3);
    }
}
