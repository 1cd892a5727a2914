//! Training loop, optimizer and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayViewD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{compute_all, fit_normalization, normalize, ConceptRegistry, ConceptVector, NormalizationStats, NormalizeMode};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::{CbModel, Example, Params, Tape, Upstream, Variant};
use crate::nn::Real;
use crate::rng::{self, Stream};
use crate::seqio::{apply_mask, tokenize_unpadded, MaskSpec, TokenId, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    /// Set from the run configuration's `loss` section.
    #[serde(skip)]
    pub weights: LossWeights,
    pub noise_sigma: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub log_every: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub val_fraction: f64,
    /// Validation sequences scored at each evaluation.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            mask_rate: 0.25,
            learning_rate: 2e-3,
            clip_norm: 0.5,
            warmup_steps: 100,
            weights: LossWeights::default(),
            noise_sigma: 0.01,
            seed: 0,
            eval_every: 500,
            log_every: 10,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.1,
            eval_samples: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad("mask_rate must lie in (0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        self.weights.validate()
    }

    /// Linear warmup: `(s / warmup) · lr` for `s ≤ warmup`, then `lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

/// One training sequence with its normalized concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub tokens: TokenSequence,
    pub concepts: ConceptVector,
}

/// Tokenizes `seqs` and attaches concepts normalized with `stats`.
pub fn items_with_stats(seqs: &[String], registry: &ConceptRegistry, stats: &NormalizationStats, max_len: usize) -> Result<Vec<Item>> {
    seqs.iter()
        .map(|s| {
            let raw = compute_all(s, registry)?;
            Ok(Item { tokens: tokenize_unpadded(s, max_len)?, concepts: normalize(&raw, stats, NormalizeMode::Clip)? })
        })
        .collect()
}

/// Fits normalization on the training part of `seqs` (the validation tail is
/// excluded) and builds the items.
pub fn prepare_items(seqs: &[String], registry: &ConceptRegistry, max_len: usize, val_fraction: f64) -> Result<(Vec<Item>, NormalizationStats)> {
    let (train_range, _) = split(seqs.len(), val_fraction);
    let raw: Vec<ConceptVector> = seqs[train_range].iter().map(|s| compute_all(s, registry)).collect::<Result<_>>()?;
    let stats = fit_normalization(registry, &raw);
    Ok((items_with_stats(seqs, registry, &stats, max_len)?, stats))
}

/// Examples plus the target id for every predicted position, in order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Vec<Example>,
    pub targets: Vec<TokenId>,
}

/// Builds the training view of `items` for a variant: masked positions for the
/// masked variants, next-token targets for the autoregressive one.
pub fn build_batch(variant: Variant, items: &[&Item], mask_rate: f64, mask_seeds: &[u64]) -> Result<Batch> {
    let mut examples = Vec::with_capacity(items.len());
    let mut targets = Vec::new();
    for (item, &seed) in items.iter().zip(mask_seeds) {
        let ts = item.tokens.trimmed();
        if variant == Variant::Ar {
            let predict: Vec<usize> = (0..ts.len() - 1).collect();
            targets.extend_from_slice(&ts.ids()[1..]);
            examples.push(Example::new(ts, predict));
            continue;
        }
        let (masked, plan) = apply_mask(&ts, &MaskSpec::Rate(mask_rate), seed)?;
        targets.extend(plan.positions.iter().map(|&p| ts.ids()[p]));
        let mut ex = Example::new(masked, plan.positions);
        ex.concepts = Some(item.concepts.clone());
        ex.independent = variant == Variant::Cb;
        examples.push(ex);
    }
    Ok(Batch { examples, targets })
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub concept: f64,
    pub orth: f64,
    pub total: f64,
}

/// Relative weights of the three terms; `mlm` is 1 in training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub mlm: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl From<LossWeights> for Objective {
    fn from(w: LossWeights) -> Self {
        Objective { mlm: 1.0, alpha: w.alpha, beta: w.beta }
    }
}

fn losses_of<F: Real>(model: &CbModel<F>, batch: &Batch, tape: &Tape<F>, obj: &Objective) -> Result<(LossBreakdown, Upstream<F>)> {
    let groups: Vec<usize> = tape.predicted.iter().map(|&(b, _, _)| b).collect();
    let (mlm, mut dlogits) = losses::mlm_loss_grad(tape.logits.view(), &batch.targets, &groups)?;
    dlogits.mapv_inplace(|v| v * F::of(obj.mlm));
    let mut up = Upstream { dlogits, dc_hat: None, dz: None, dh_tilde: None };
    let mut out = LossBreakdown { mlm, ..Default::default() };
    let variant = model.variant();
    if variant.has_concept_head() {
        let truth: Vec<&ConceptVector> =
            batch.examples.iter().map(|e| e.concepts.as_ref().ok_or(Error::MissingConcepts)).collect::<Result<_>>()?;
        let (c, mut g) = losses::concept_loss_grad(tape.c_hat.view(), &truth);
        g.mapv_inplace(|v| v * F::of(obj.alpha));
        out.concept = c;
        up.dc_hat = Some(g);
    }
    if variant == Variant::Cb {
        let (o, mut dz, mut dh) = losses::orthogonality_loss_grad(tape.z.view(), tape.h_tilde.view(), &tape.layout);
        dz.mapv_inplace(|v| v * F::of(obj.beta));
        dh.mapv_inplace(|v| v * F::of(obj.beta));
        out.orth = o;
        up.dz = Some(dz);
        up.dh_tilde = Some(dh);
    }
    out.total = obj.mlm * out.mlm + obj.alpha * out.concept + obj.beta * out.orth;
    Ok((out, up))
}

/// Loss value only.
pub fn batch_loss<F: Real>(model: &CbModel<F>, batch: &Batch, obj: &Objective) -> Result<LossBreakdown> {
    let tape = model.forward_batch::<rand_chacha::ChaCha8Rng>(&batch.examples, None)?;
    Ok(losses_of(model, batch, &tape, obj)?.0)
}

/// Loss value and gradients for every parameter.
pub fn loss_and_grad<F: Real, R: Rng>(
    model: &CbModel<F>,
    batch: &Batch,
    obj: &Objective,
    noise: Option<(f64, &mut R)>,
) -> Result<(LossBreakdown, Params<F>)> {
    let tape = model.forward_batch(&batch.examples, noise)?;
    let (loss, up) = losses_of(model, batch, &tape, obj)?;
    let (grads, _) = model.backward(&tape, &up);
    Ok((loss, grads))
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut Params<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(F::of(max_norm / norm));
    }
    norm
}

/// AdamW with decoupled weight decay on matrix-shaped tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    decay: Vec<bool>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &Params<f32>, cfg: &TrainConfig) -> Self {
        let n = params.len();
        let mut decay = Vec::with_capacity(n);
        params.visit(|_, t: ArrayViewD<f32>| decay.extend(std::iter::repeat_n(t.ndim() == 2, t.len())));
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f64) {
        self.t += 1;
        let g = grads.flatten();
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        let decay = (lr * self.weight_decay) as f32;
        let mut i = 0;
        let (m, v, mask) = (&mut self.m, &mut self.v, &self.decay);
        params.visit_mut(|_, mut t| {
            for p in t.iter_mut() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                if mask[i] {
                    *p -= decay * *p;
                }
                *p -= step_size * m[i] / (v[i].sqrt() / c2_sqrt + eps);
                i += 1;
            }
        });
    }
}

/// Validation snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub perplexity: f64,
    /// Mean squared error per concept (normalized space); empty without a concept head.
    pub concept_mse: Vec<f64>,
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub mlm: f64,
    pub concept: f64,
    pub orth: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<Validation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn last_validation(&self) -> Option<&Validation> {
        self.records.iter().rev().find_map(|r| r.validation.as_ref())
    }
}

/// Training and validation halves: the validation set is the tail of the corpus.
pub fn split(n: usize, val_fraction: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    (0..n - n_val, n - n_val..n)
}

/// Trains in place. The last `val_fraction` of `items` is held out.
pub fn train(model: &mut CbModel<f32>, items: &[Item], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, items, cfg, |_| {})
}

/// [`train`] with a callback per logged record.
pub fn train_with(
    model: &mut CbModel<f32>,
    items: &[Item],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if model.variant() != Variant::Ar && items.iter().any(|it| it.concepts.len() != model.k()) {
        return Err(Error::Config(format!("corpus concepts do not match the model's k = {}", model.k())));
    }
    for it in items {
        if it.tokens.len() > model.config.max_len {
            return Err(Error::Length { len: it.tokens.len(), max: model.config.max_len });
        }
    }
    let (train_range, val_range) = split(items.len(), cfg.val_fraction);
    let train_items = &items[train_range];
    let val_items: Vec<&Item> = items[val_range].iter().take(cfg.eval_samples).collect();
    let obj = Objective::from(cfg.weights);
    let mut opt = AdamW::new(&model.params, cfg);
    let mut report = TrainReport::default();

    for step in 1..=cfg.steps {
        let mut pick = rng::lane(cfg.seed, Stream::Batch, step, 0);
        let chosen: Vec<&Item> = (0..cfg.batch_size).map(|_| &train_items[pick.random_range(0..train_items.len())]).collect();
        let mask_key = rng::derive(cfg.seed, Stream::Mask, step);
        let seeds: Vec<u64> = (0..chosen.len() as u64).map(|b| rng::derive(mask_key, Stream::Mask, b)).collect();
        let batch = build_batch(model.variant(), &chosen, cfg.mask_rate, &seeds)?;
        let mut noise_rng = rng::lane(cfg.seed, Stream::Noise, step, 0);
        let (loss, mut grads) = loss_and_grad(model, &batch, &obj, Some((cfg.noise_sigma, &mut noise_rng)))?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step });
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut model.params, &grads, lr);

        let eval_now = !val_items.is_empty() && cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        let log_now = eval_now || step == 1 || (cfg.log_every > 0 && step % cfg.log_every == 0) || step == cfg.steps;
        if log_now {
            let validation = if eval_now { Some(validate(model, &val_items, cfg)?) } else { None };
            let rec = StepRecord {
                step,
                lr,
                mlm: loss.mlm,
                concept: loss.concept,
                orth: loss.orth,
                total: loss.total,
                grad_norm,
                clipped_norm: grad_norm.min(cfg.clip_norm),
                validation,
            };
            if let Some(v) = &rec.validation {
                log::info!("step {step}: loss {:.4} val perplexity {:.3}", rec.total, v.perplexity);
            } else {
                log::debug!("step {step}: loss {:.4}", rec.total);
            }
            on_record(&rec);
            report.records.push(rec);
        }
    }

    if model.variant().has_concept_head() {
        let pool: Vec<&Item> = train_items.iter().take(4096).chain(items[split(items.len(), cfg.val_fraction).1].iter()).collect();
        let preds = predict_concepts(model, &pool)?;
        let mut max = vec![f64::NEG_INFINITY; model.k()];
        for row in &preds {
            for (m, &v) in max.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        model.concept_max_activation = max;
    }
    Ok(report)
}

fn validate(model: &CbModel<f32>, val: &[&Item], cfg: &TrainConfig) -> Result<Validation> {
    let perplexity = crate::evaluate::perplexity(model, val, cfg.mask_rate, cfg.seed)?;
    let concept_mse = if model.variant().has_concept_head() {
        let preds = predict_concepts(model, val)?;
        let k = model.k();
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (p, it) in preds.iter().zip(val) {
            for i in 0..k {
                if it.concepts.observed[i] {
                    sums[i] += (p[i] - it.concepts.values[i]).powi(2);
                    counts[i] += 1;
                }
            }
        }
        sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
    } else {
        Vec::new()
    };
    Ok(Validation { perplexity, concept_mse })
}

/// Concept-head predictions for unmasked sequences (CC uses the items' concepts as tags).
pub fn predict_concepts<F: Real>(model: &CbModel<F>, items: &[&Item]) -> Result<Vec<Vec<f64>>> {
    if !model.variant().has_concept_head() {
        return Err(Error::Variant { expected: "cb or cc".into(), found: model.variant().to_string() });
    }
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(64) {
        let examples: Vec<Example> = chunk
            .iter()
            .map(|it| {
                let mut ex = Example::new(it.tokens.trimmed(), vec![]);
                ex.concepts = Some(it.concepts.clone());
                ex
            })
            .collect();
        let tape = model.forward_batch::<rand_chacha::ChaCha8Rng>(&examples, None)?;
        for row in tape.c_hat.rows() {
            out.push(row.iter().map(|v| v.f64()).collect());
        }
    }
    Ok(out)
}

const MAGIC: &[u8; 8] = b"CBPLMCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model with everything needed to interpret its concept outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CbModel<f32>,
    pub registry: ConceptRegistry,
    pub stats: NormalizationStats,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: crate::model::ModelConfig,
    registry: ConceptRegistry,
    stats: NormalizationStats,
    concept_max_activation: Vec<f64>,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        self.model.params.visit(|name, t| {
            tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: payload.len() });
            for v in t.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        });
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            registry: self.registry.clone(),
            stats: self.stats.clone(),
            concept_max_activation: self.model.concept_max_activation.clone(),
            tensors,
            payload_len: payload.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(corrupt("header extends past end of file"));
        }
        let header: serde_json::Value = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&e.to_string()))?;
        let version = header.get("version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("header has no version"))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::CheckpointVersion { found: version as u32, expected: CHECKPOINT_VERSION });
        }
        let header: Header = serde_json::from_value(header).map_err(|e| corrupt(&e.to_string()))?;
        let payload = &body[hlen..];
        if payload.len() != header.payload_len {
            return Err(corrupt(&format!("payload is {} bytes, header says {}", payload.len(), header.payload_len)));
        }
        header.config.validate()?;
        let mut params = Params::<f32>::init(&crate::model::ModelConfig { init_std: 0.0, ..header.config.clone() });
        let mut entries = header.tensors.iter();
        let mut problem = None;
        params.visit_mut(|name, mut t| {
            if problem.is_some() {
                return;
            }
            let Some(e) = entries.next() else {
                problem = Some(format!("tensor {name} missing from directory"));
                return;
            };
            if e.name != name || e.shape != t.shape() {
                problem = Some(format!("directory entry {} {:?} does not match {name} {:?}", e.name, e.shape, t.shape()));
                return;
            }
            let end = e.offset + 4 * t.len();
            if end > payload.len() {
                problem = Some(format!("tensor {name} extends past payload"));
                return;
            }
            for (v, chunk) in t.iter_mut().zip(payload[e.offset..end].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        });
        if let Some(p) = problem {
            return Err(corrupt(&p));
        }
        if entries.next().is_some() {
            return Err(corrupt("directory lists extra tensors"));
        }
        let mut model = CbModel::from_params(header.config, params)?;
        if header.concept_max_activation.len() != model.k() {
            return Err(corrupt("max activation list has the wrong length"));
        }
        model.concept_max_activation = header.concept_max_activation;
        if model.variant() != Variant::Ar && (header.registry.len() != model.k() || header.stats.k() != model.k()) {
            return Err(corrupt("registry or normalization stats do not match the model"));
        }
        Ok(Checkpoint { model, registry: header.registry, stats: header.stats })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ck.to_bytes()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::seqio::{generate_varied_corpus, AminoProfile};

    pub(crate) fn toy_items(n: usize, seed: u64) -> (Vec<Item>, ConceptRegistry, NormalizationStats) {
        let seqs = generate_varied_corpus(n, (12, 20), &AminoProfile::uniform(), 8.0, seed).unwrap();
        let reg = ConceptRegistry::builtin();
        let raw: Vec<ConceptVector> = seqs.iter().map(|s| compute_all(s, &reg).unwrap()).collect();
        let stats = fit_normalization(&reg, &raw);
        let items = seqs
            .iter()
            .zip(&raw)
            .map(|(s, c)| Item { tokens: tokenize_unpadded(s, 64).unwrap(), concepts: normalize(c, &stats, NormalizeMode::Clip).unwrap() })
            .collect();
        (items, reg, stats)
    }

    fn small_cfg(variant: Variant) -> ModelConfig {
        ModelConfig { layers: 1, hidden_dim: 16, heads: 2, max_len: 64, variant, seed: 3, ..Default::default() }
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = TrainConfig { warmup_steps: 10, learning_rate: 0.5, ..Default::default() };
        for s in 0..=10 {
            assert_eq!(cfg.lr_at(s), 0.5 * s as f64 / 10.0);
        }
        assert_eq!(cfg.lr_at(50), 0.5);
    }

    #[test]
    fn clipping_bounds_norm() {
        let m = CbModel::<f32>::new(small_cfg(Variant::Cb)).unwrap();
        let mut g = m.params.clone();
        let before = clip_global_norm(&mut g, 0.5);
        assert!(before > 0.5);
        assert!(g.global_norm() <= 0.5 + 1e-6);
    }

    #[test]
    fn mlm_gradient_skips_concept_head() {
        let (items, _, _) = toy_items(4, 1);
        let m = CbModel::<f64>::new(small_cfg(Variant::Cb)).unwrap();
        let refs: Vec<&Item> = items.iter().collect();
        let batch = build_batch(Variant::Cb, &refs, 0.25, &[1, 2, 3, 4]).unwrap();
        let obj = Objective { mlm: 1.0, alpha: 0.0, beta: 0.3 };
        let (_, g) = loss_and_grad::<f64, rand_chacha::ChaCha8Rng>(&m, &batch, &obj, None).unwrap();
        assert!(g.concept_w.iter().chain(g.concept_b.iter()).all(|&v| v == 0.0));
        let with_concept = Objective { alpha: 1.0, ..obj };
        let concept_only = Objective { mlm: 0.0, alpha: 1.0, beta: 0.0 };
        let (_, a) = loss_and_grad::<f64, rand_chacha::ChaCha8Rng>(&m, &batch, &with_concept, None).unwrap();
        let (_, b) = loss_and_grad::<f64, rand_chacha::ChaCha8Rng>(&m, &batch, &concept_only, None).unwrap();
        assert_eq!(a.concept_w, b.concept_w);
        assert_eq!(a.concept_b, b.concept_b);
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let (items, reg, stats) = toy_items(40, 2);
        let cfg = TrainConfig { steps: 5, batch_size: 4, eval_every: 5, eval_samples: 4, ..Default::default() };
        let mut a = CbModel::<f32>::new(small_cfg(Variant::Cb)).unwrap();
        let mut b = a.clone();
        train(&mut a, &items, &cfg).unwrap();
        train(&mut b, &items, &cfg).unwrap();
        let ck = Checkpoint { model: a, registry: reg.clone(), stats: stats.clone() };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(bytes, Checkpoint { model: b, registry: reg, stats }.to_bytes().unwrap());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert!(back.model.concept_max_activation.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn corrupt_checkpoints_are_refused() {
        let (_, reg, stats) = toy_items(10, 2);
        let ck = Checkpoint { model: CbModel::<f32>::new(small_cfg(Variant::Cb)).unwrap(), registry: reg, stats };
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::CorruptCheckpoint(_))));
        let text = String::from_utf8_lossy(&bytes[16..]).into_owned();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap().replacen("\"version\":1", "\"version\":7", 1);
        assert!(text.contains("\"version\":1"));
        let mut bumped = bytes[..8].to_vec();
        bumped.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bumped.extend_from_slice(header.as_bytes());
        bumped.extend_from_slice(&bytes[16 + hlen..]);
        let err = Checkpoint::from_bytes(&bumped).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 7, expected: 1 }), "{err}");
    }

    #[test]
    fn divergence_is_reported() {
        let (items, _, _) = toy_items(20, 3);
        let mut m = CbModel::<f32>::new(small_cfg(Variant::Cb)).unwrap();
        m.params.decoder.fill(f32::NAN);
        let cfg = TrainConfig { steps: 3, batch_size: 2, ..Default::default() };
        assert!(matches!(train(&mut m, &items, &cfg), Err(Error::Divergence { step: 1 })));
    }
}
