//! Encoder, concept bottleneck, orthogonality network and linear decoder.
//!
//! One transformer encoder implementation backs four variants:
//!
//! - `Cb`: concept bottleneck model. The CLS state feeds a linear concept head
//!   `g`; predicted concepts scale learned concept embeddings into the known
//!   embedding `z`, a position-wise MLP produces the unknown embedding `h̃`, and
//!   a single linear layer decodes `[z, h̃]`.
//! - `C`: concepts enter as `k` prefix tag tokens after CLS; plain linear head.
//! - `Cc`: `C` plus a linear concept regression head on the CLS state.
//! - `Ar`: causal encoder trained for next-token prediction (naturalness).
//!
//! Gradients are hand-derived; [`CbModel::backward`] returns gradients for all
//! parameters and for the input token-embedding rows.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptVector;
use crate::error::{Error, Result};
use crate::nn::{self, Layout, LnCache, Real, Rope};
use crate::rng::{self, Stream};
use crate::seqio::{TokenId, TokenSequence, MASK, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cb,
    C,
    Cc,
    Ar,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Cb => "cb",
            Variant::C => "c",
            Variant::Cc => "cc",
            Variant::Ar => "ar",
        }
    }

    pub fn has_concept_head(self) -> bool {
        matches!(self, Variant::Cb | Variant::Cc)
    }

    pub fn has_tags(self) -> bool {
        matches!(self, Variant::C | Variant::Cc)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Number of concepts.
    pub k: usize,
    pub concept_emb_dim: usize,
    pub variant: Variant,
    pub seed: u64,
    pub mlp_ratio: usize,
    pub init_std: f64,
    /// Off by default: layer norm is scale invariant per token, so the gradient
    /// along a token's own embedding vanishes and grad×(input−mask) stops
    /// tracking occlusion. Without it, shallow models can be made exactly linear.
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden_dim: 64,
            heads: 4,
            max_len: 128,
            vocab_size: VOCAB_SIZE,
            k: crate::concepts::BUILTIN_COUNT,
            concept_emb_dim: 2,
            variant: Variant::Cb,
            seed: 0,
            mlp_ratio: 4,
            init_std: 0.02,
            layer_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!("hidden_dim {} must be a positive multiple of heads {}", self.hidden_dim, self.heads));
        }
        if (self.hidden_dim / self.heads) % 2 != 0 {
            return bad("rotary embeddings need an even head dimension".into());
        }
        if self.concept_emb_dim == 0 {
            return bad("concept_emb_dim must be at least 1".into());
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}"));
        }
        if self.max_len < 3 {
            return bad("max_len must be at least 3".into());
        }
        if self.variant != Variant::Ar && self.k == 0 {
            return bad("conditional variants need at least one concept".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Width of the known-embedding slice of the decoder input.
    pub fn concept_width(&self) -> usize {
        if self.variant == Variant::Cb {
            self.k * self.concept_emb_dim
        } else {
            0
        }
    }

    fn prefix(&self) -> usize {
        if self.variant.has_tags() {
            self.k
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub w1: Array2<F>,
    pub w2: Array2<F>,
}

/// All trainable tensors. Parts unused by a variant have zero size.
/// Matrices are stored `in × out`, except the token embedding (`vocab × d`)
/// and the decoder (`vocab × input`).
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub token_emb: Array2<F>,
    pub tag_scale: Array2<F>,
    pub tag_bias: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_g: Array1<F>,
    pub final_b: Array1<F>,
    pub concept_w: Array2<F>,
    pub concept_b: Array1<F>,
    pub concept_emb: Array2<F>,
    pub orth_w1: Array2<F>,
    pub orth_b1: Array1<F>,
    pub orth_w2: Array2<F>,
    pub orth_b2: Array1<F>,
    pub decoder: Array2<F>,
}

macro_rules! for_each_tensor {
    ($self:expr, $f:expr, $view:ident, $iter:ident) => {{
        let f = &mut $f;
        f("token_emb".to_string(), $self.token_emb.$view().into_dyn());
        f("tag_scale".to_string(), $self.tag_scale.$view().into_dyn());
        f("tag_bias".to_string(), $self.tag_bias.$view().into_dyn());
        for (i, l) in $self.layers.$iter().enumerate() {
            f(format!("layers.{i}.ln1_g"), l.ln1_g.$view().into_dyn());
            f(format!("layers.{i}.ln1_b"), l.ln1_b.$view().into_dyn());
            f(format!("layers.{i}.wq"), l.wq.$view().into_dyn());
            f(format!("layers.{i}.wk"), l.wk.$view().into_dyn());
            f(format!("layers.{i}.wv"), l.wv.$view().into_dyn());
            f(format!("layers.{i}.wo"), l.wo.$view().into_dyn());
            f(format!("layers.{i}.ln2_g"), l.ln2_g.$view().into_dyn());
            f(format!("layers.{i}.ln2_b"), l.ln2_b.$view().into_dyn());
            f(format!("layers.{i}.w1"), l.w1.$view().into_dyn());
            f(format!("layers.{i}.w2"), l.w2.$view().into_dyn());
        }
        f("final_g".to_string(), $self.final_g.$view().into_dyn());
        f("final_b".to_string(), $self.final_b.$view().into_dyn());
        f("concept_w".to_string(), $self.concept_w.$view().into_dyn());
        f("concept_b".to_string(), $self.concept_b.$view().into_dyn());
        f("concept_emb".to_string(), $self.concept_emb.$view().into_dyn());
        f("orth_w1".to_string(), $self.orth_w1.$view().into_dyn());
        f("orth_b1".to_string(), $self.orth_b1.$view().into_dyn());
        f("orth_w2".to_string(), $self.orth_w2.$view().into_dyn());
        f("orth_b2".to_string(), $self.orth_b2.$view().into_dyn());
        f("decoder".to_string(), $self.decoder.$view().into_dyn());
    }};
}

impl<F: Real> Params<F> {
    /// Visits every tensor in a fixed order with a stable name.
    pub fn visit(&self, mut f: impl FnMut(String, ndarray::ArrayViewD<'_, F>)) {
        for_each_tensor!(self, f, view, iter);
    }

    /// Mutable counterpart of [`Params::visit`].
    pub fn visit_mut(&mut self, mut f: impl FnMut(String, ndarray::ArrayViewMutD<'_, F>)) {
        for_each_tensor!(self, f, view_mut, iter_mut);
    }

    pub fn zeros_like(&self) -> Self {
        let z1 = |a: &Array1<F>| Array1::zeros(a.raw_dim());
        let z2 = |a: &Array2<F>| Array2::zeros(a.raw_dim());
        Params {
            token_emb: z2(&self.token_emb),
            tag_scale: z2(&self.tag_scale),
            tag_bias: z2(&self.tag_bias),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: z1(&l.ln1_g),
                    ln1_b: z1(&l.ln1_b),
                    wq: z2(&l.wq),
                    wk: z2(&l.wk),
                    wv: z2(&l.wv),
                    wo: z2(&l.wo),
                    ln2_g: z1(&l.ln2_g),
                    ln2_b: z1(&l.ln2_b),
                    w1: z2(&l.w1),
                    w2: z2(&l.w2),
                })
                .collect(),
            final_g: z1(&self.final_g),
            final_b: z1(&self.final_b),
            concept_w: z2(&self.concept_w),
            concept_b: z1(&self.concept_b),
            concept_emb: z2(&self.concept_emb),
            orth_w1: z2(&self.orth_w1),
            orth_b1: z1(&self.orth_b1),
            orth_w2: z2(&self.orth_w2),
            orth_b2: z1(&self.orth_b2),
            decoder: z2(&self.decoder),
        }
    }

    /// Flattened copy of all tensors in visit order.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        self.visit(|_, t| out.extend(t.iter().copied()));
        out
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params<F>, scale: F) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(|_, mut t| {
            for v in t.iter_mut() {
                *v += scale * flat[offset];
                offset += 1;
            }
        });
    }

    pub fn scale(&mut self, factor: F) {
        self.visit_mut(|_, mut t| t.mapv_inplace(|v| v * factor));
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        self.visit(|_, t| acc += t.iter().map(|v| v.f64() * v.f64()).sum::<f64>());
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    /// Converts every tensor to another float type.
    pub fn cast<G: Real>(&self) -> Params<G> {
        let c1 = |a: &Array1<F>| a.mapv(|v| G::of(v.f64()));
        let c2 = |a: &Array2<F>| a.mapv(|v| G::of(v.f64()));
        Params {
            token_emb: c2(&self.token_emb),
            tag_scale: c2(&self.tag_scale),
            tag_bias: c2(&self.tag_bias),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: c1(&l.ln1_g),
                    ln1_b: c1(&l.ln1_b),
                    wq: c2(&l.wq),
                    wk: c2(&l.wk),
                    wv: c2(&l.wv),
                    wo: c2(&l.wo),
                    ln2_g: c1(&l.ln2_g),
                    ln2_b: c1(&l.ln2_b),
                    w1: c2(&l.w1),
                    w2: c2(&l.w2),
                })
                .collect(),
            final_g: c1(&self.final_g),
            final_b: c1(&self.final_b),
            concept_w: c2(&self.concept_w),
            concept_b: c1(&self.concept_b),
            concept_emb: c2(&self.concept_emb),
            orth_w1: c2(&self.orth_w1),
            orth_b1: c1(&self.orth_b1),
            orth_w2: c2(&self.orth_w2),
            orth_b2: c1(&self.orth_b2),
            decoder: c2(&self.decoder),
        }
    }
}

fn normal_matrix<F: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || F::of(dist.sample(rng)))
}

impl<F: Real> Params<F> {
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = rng::keyed(cfg.seed, Stream::Init, 0);
        let d = cfg.hidden_dim;
        let std = cfg.init_std;
        let out_std = std / (2.0 * cfg.layers.max(1) as f64).sqrt();
        let ones = || Array1::from_elem(d, F::one());
        let zeros = |n: usize| Array1::<F>::zeros(n);
        let k = cfg.k;
        let tags = if cfg.variant.has_tags() { k } else { 0 };
        let heads = if cfg.variant.has_concept_head() { k } else { 0 };
        let cb = cfg.variant == Variant::Cb;
        let ke = if cb { k } else { 0 };
        let od = if cb { d } else { 0 };
        let token_emb = normal_matrix(&mut rng, cfg.vocab_size, d, std);
        let tag_scale = normal_matrix(&mut rng, tags, d, std);
        let tag_bias = normal_matrix(&mut rng, tags, d, std);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_g: ones(),
                ln1_b: zeros(d),
                wq: normal_matrix(&mut rng, d, d, std),
                wk: normal_matrix(&mut rng, d, d, std),
                wv: normal_matrix(&mut rng, d, d, std),
                wo: normal_matrix(&mut rng, d, d, out_std),
                ln2_g: ones(),
                ln2_b: zeros(d),
                w1: normal_matrix(&mut rng, d, cfg.mlp_ratio * d, std),
                w2: normal_matrix(&mut rng, cfg.mlp_ratio * d, d, out_std),
            })
            .collect();
        let concept_w = normal_matrix(&mut rng, d, heads, std);
        let concept_b = Array1::from_elem(heads, F::of(0.5));
        // small concept embeddings and a zero decoder slice: a concept whose
        // targets carry almost no signal never gets past Adam's epsilon
        let concept_emb = normal_matrix(&mut rng, ke, cfg.concept_emb_dim, std);
        let orth_w1 = normal_matrix(&mut rng, od, od, (1.0 / d as f64).sqrt());
        let orth_w2 = normal_matrix(&mut rng, od, od, (1.0 / d as f64).sqrt());
        let mut decoder = normal_matrix(&mut rng, cfg.vocab_size, cfg.concept_width() + d, std);
        decoder.slice_mut(s![.., ..cfg.concept_width()]).fill(F::zero());
        Params {
            token_emb,
            tag_scale,
            tag_bias,
            layers,
            final_g: ones(),
            final_b: zeros(d),
            concept_w,
            concept_b,
            concept_emb,
            orth_w1,
            orth_b1: zeros(od),
            orth_w2,
            orth_b2: zeros(od),
            decoder,
        }
    }

    /// Expected (name, shape) list for a configuration.
    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut cfg0 = cfg.clone();
        cfg0.init_std = 0.0;
        let p = Params::<F>::init(&cfg0);
        let mut out = Vec::new();
        p.visit(|n, t| out.push((n, t.shape().to_vec())));
        out
    }
}

/// How the known embedding `z` is formed in the CB variant.
#[derive(Debug, Clone, Copy)]
pub enum ConceptMode<'a> {
    /// Ground-truth concepts where observed, predicted elsewhere.
    TrainIndependent(&'a ConceptVector),
    /// Predicted concepts.
    Inference,
    /// Predicted concepts with the listed `(index, value)` overrides.
    Intervened(&'a [(usize, f64)]),
}

/// One sequence in a packed forward pass.
#[derive(Debug, Clone)]
pub struct Example {
    pub tokens: TokenSequence,
    /// Token positions whose output distribution is needed.
    pub predict: Vec<usize>,
    /// Normalized concepts: ground truth for CB training, tags for C/CC.
    pub concepts: Option<ConceptVector>,
    /// Concept overrides applied on top of predictions (CB inference only).
    pub overrides: Vec<(usize, f64)>,
    pub independent: bool,
}

impl Example {
    pub fn new(tokens: TokenSequence, predict: Vec<usize>) -> Self {
        Example { tokens, predict, concepts: None, overrides: Vec::new(), independent: false }
    }
}

#[derive(Debug, Clone)]
struct LayerTape<F> {
    ln1: Option<LnCache<F>>,
    a: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
    ln2: Option<LnCache<F>>,
    b: Array2<F>,
    u: Array2<F>,
    act: Array2<F>,
}

/// Everything computed by a packed forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<F> {
    pub layout: Layout,
    /// Rows of the encoder input that hold token embeddings: (row, token id).
    pub token_rows: Vec<(usize, TokenId)>,
    /// (row, segment, tag index, tag value) for C/CC prefix rows.
    tag_rows: Vec<(usize, usize, usize, F)>,
    layers: Vec<LayerTape<F>>,
    final_ln: Option<LnCache<F>>,
    /// Final encoder states, one row per input row.
    pub h: Array2<F>,
    /// Concept predictions per segment (B × k); empty when no head.
    pub c_hat: Array2<F>,
    /// Concept values used to build `z` (B × k) and whether each came from `c_hat`.
    pub c_used: Array2<F>,
    from_pred: Vec<Vec<bool>>,
    /// Known embedding per segment (B × k·concept_emb_dim).
    pub z: Array2<F>,
    orth_u: Array2<F>,
    orth_act: Array2<F>,
    /// Unknown embedding per row (CB) or the encoder states.
    pub h_tilde: Array2<F>,
    /// (segment, token position, row) for every predicted position.
    pub predicted: Vec<(usize, usize, usize)>,
    feats: Array2<F>,
    pub logits: Array2<F>,
}

/// Upstream gradients entering [`CbModel::backward`].
#[derive(Debug, Clone)]
pub struct Upstream<F> {
    pub dlogits: Array2<F>,
    pub dc_hat: Option<Array2<F>>,
    pub dz: Option<Array2<F>>,
    pub dh_tilde: Option<Array2<F>>,
}

/// Output of [`CbModel::forward`] for one sequence.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub h: Array2<F>,
    pub h0: Array1<F>,
    pub c_hat: Array1<F>,
    pub c_used: Array1<F>,
    pub z: Array1<F>,
    pub h_tilde: Array2<F>,
    /// MASK positions, in order, matching `logits` rows.
    pub masked_positions: Vec<usize>,
    pub logits: Array2<F>,
}

impl<F: Real> ForwardTrace<F> {
    pub fn probabilities(&self) -> Array2<F> {
        nn::softmax_rows(&self.logits)
    }
}

/// Output of [`CbModel::forward_conditional`].
#[derive(Debug, Clone)]
pub struct ConditionalTrace<F> {
    pub h: Array2<F>,
    pub masked_positions: Vec<usize>,
    pub logits: Array2<F>,
    pub c_hat: Option<Array1<F>>,
}

#[derive(Debug, Clone)]
pub struct CbModel<F: Real = f32> {
    pub config: ModelConfig,
    pub params: Params<F>,
    /// Largest predicted activation per concept, recorded after training.
    pub concept_max_activation: Vec<f64>,
    rope: Rope<F>,
}

impl<F: Real> PartialEq for CbModel<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.concept_max_activation == other.concept_max_activation
    }
}

fn ln_forward<F: Real>(on: bool, x: &Array2<F>, g: &Array1<F>, b: &Array1<F>) -> (Array2<F>, Option<LnCache<F>>) {
    if on {
        let (y, c) = nn::layer_norm(x, g, b);
        (y, Some(c))
    } else {
        (x.clone(), None)
    }
}

fn ln_backward<F: Real>(
    dy: &Array2<F>,
    cache: &Option<LnCache<F>>,
    g: &Array1<F>,
    dg: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    match cache {
        Some(c) => nn::layer_norm_backward(dy, c, g, dg, db),
        None => dy.clone(),
    }
}

impl<F: Real> CbModel<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: Params<F>) -> Result<Self> {
        config.validate()?;
        let expected = Params::<F>::shapes(&config);
        let mut actual = Vec::new();
        params.visit(|n, t| actual.push((n, t.shape().to_vec())));
        if expected != actual {
            return Err(Error::Config("parameter shapes do not match the configuration".into()));
        }
        let rope = Rope::new(config.max_len + config.prefix(), config.head_dim());
        let k = config.k;
        Ok(CbModel { config, params, concept_max_activation: vec![1.0; k], rope })
    }

    /// The same model in another float type.
    pub fn cast<G: Real>(&self) -> CbModel<G> {
        let mut m = CbModel::from_params(self.config.clone(), self.params.cast()).expect("same config");
        m.concept_max_activation = self.concept_max_activation.clone();
        m
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    fn require(&self, ok: bool, expected: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Variant { expected: expected.to_string(), found: self.variant().to_string() })
        }
    }

    fn check_tokens(&self, ts: &TokenSequence) -> Result<()> {
        if ts.len() > self.config.max_len {
            return Err(Error::Length { len: ts.len(), max: self.config.max_len });
        }
        if ts.ids().iter().any(|&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidSequence("token id outside vocabulary".into()));
        }
        Ok(())
    }

    fn encoder_forward(&self, x0: Array2<F>, layout: &Layout) -> (Vec<LayerTape<F>>, Option<LnCache<F>>, Array2<F>) {
        let cfg = &self.config;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let mut x = x0;
        let mut tapes = Vec::with_capacity(cfg.layers);
        for lp in &self.params.layers {
            let (a, ln1) = ln_forward(cfg.layer_norm, &x, &lp.ln1_g, &lp.ln1_b);
            let mut q = a.dot(&lp.wq);
            let mut k = a.dot(&lp.wk);
            let v = a.dot(&lp.wv);
            for seg in &layout.segments {
                for h in 0..heads {
                    let rows = seg.start..seg.start + seg.len;
                    let cols = h * dh..(h + 1) * dh;
                    self.rope.apply(q.slice_mut(s![rows.clone(), cols.clone()]), false);
                    self.rope.apply(k.slice_mut(s![rows, cols]), false);
                }
            }
            let (ctx, probs) = nn::attention(&q, &k, &v, heads, layout);
            x = x + ctx.dot(&lp.wo);
            let (b, ln2) = ln_forward(cfg.layer_norm, &x, &lp.ln2_g, &lp.ln2_b);
            let u = b.dot(&lp.w1);
            let act = nn::gelu(&u);
            x = x + act.dot(&lp.w2);
            tapes.push(LayerTape { ln1, a, q, k, v, probs, ctx, ln2, b, u, act });
        }
        let (h, final_ln) = ln_forward(cfg.layer_norm, &x, &self.params.final_g, &self.params.final_b);
        (tapes, final_ln, h)
    }

    fn encoder_backward(&self, tape: &Tape<F>, grads: &mut Params<F>, dh: Array2<F>) -> Array2<F> {
        let cfg = &self.config;
        let heads = cfg.heads;
        let dhd = cfg.head_dim();
        let p = &self.params;
        let mut dx = ln_backward(&dh, &tape.final_ln, &p.final_g, &mut grads.final_g, &mut grads.final_b);
        for (li, lt) in tape.layers.iter().enumerate().rev() {
            let lp = &p.layers[li];
            let lg = &mut grads.layers[li];
            // MLP block
            let dact = nn::linear_backward(lt.act.view(), &lp.w2, &dx, &mut lg.w2);
            let du = nn::gelu_backward(&lt.u, &dact);
            let db = nn::linear_backward(lt.b.view(), &lp.w1, &du, &mut lg.w1);
            dx = dx + ln_backward(&db, &lt.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);
            // attention block
            let dctx = nn::linear_backward(lt.ctx.view(), &lp.wo, &dx, &mut lg.wo);
            let (mut dq, mut dk, dv) = nn::attention_backward(&dctx, &lt.q, &lt.k, &lt.v, &lt.probs, heads, &tape.layout);
            for seg in &tape.layout.segments {
                for h in 0..heads {
                    let rows = seg.start..seg.start + seg.len;
                    let cols = h * dhd..(h + 1) * dhd;
                    self.rope.apply(dq.slice_mut(s![rows.clone(), cols.clone()]), true);
                    self.rope.apply(dk.slice_mut(s![rows, cols]), true);
                }
            }
            let mut da = nn::linear_backward(lt.a.view(), &lp.wq, &dq, &mut lg.wq);
            da += &nn::linear_backward(lt.a.view(), &lp.wk, &dk, &mut lg.wk);
            da += &nn::linear_backward(lt.a.view(), &lp.wv, &dv, &mut lg.wv);
            dx = dx + ln_backward(&da, &lt.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
        }
        dx
    }

    fn orth_forward(&self, h: &Array2<F>) -> (Array2<F>, Array2<F>, Array2<F>) {
        let p = &self.params;
        let u = h.dot(&p.orth_w1) + &p.orth_b1;
        let act = nn::gelu(&u);
        let out = act.dot(&p.orth_w2) + &p.orth_b2;
        (u, act, out)
    }

    /// Packed forward pass over a batch. `noise` adds i.i.d. Gaussian noise of
    /// the given standard deviation to every token-embedding row.
    pub fn forward_batch<R: Rng>(&self, batch: &[Example], noise: Option<(f64, &mut R)>) -> Result<Tape<F>> {
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let k = cfg.k;
        let prefix = cfg.prefix();
        for ex in batch {
            self.check_tokens(&ex.tokens)?;
            if cfg.variant.has_tags() && ex.concepts.is_none() {
                return Err(Error::MissingConcepts);
            }
        }
        let layout = Layout::from_lengths(
            batch.iter().map(|ex| {
                let n = ex.tokens.len();
                let valid = ex.tokens.pad_start();
                (n + prefix, valid + prefix)
            }),
            cfg.variant == Variant::Ar,
        );
        let rows = layout.rows();
        let mut x0 = Array2::<F>::zeros((rows, d));
        let mut token_rows = Vec::with_capacity(rows);
        let mut tag_rows = Vec::new();
        for (b, (ex, seg)) in batch.iter().zip(&layout.segments).enumerate() {
            for (pos, &id) in ex.tokens.ids().iter().enumerate() {
                let row = seg.start + if pos == 0 { 0 } else { pos + prefix };
                x0.row_mut(row).assign(&self.params.token_emb.row(id as usize));
                token_rows.push((row, id));
            }
            if prefix > 0 {
                let cv = ex.concepts.as_ref().expect("checked above");
                for i in 0..k {
                    let row = seg.start + 1 + i;
                    let value = if cv.observed.get(i).copied().unwrap_or(false) { F::of(cv.values[i]) } else { F::zero() };
                    let t = &self.params.tag_scale.row(i) * value + &self.params.tag_bias.row(i);
                    x0.row_mut(row).assign(&t);
                    tag_rows.push((row, b, i, value));
                }
            }
        }
        if let Some((sigma, rng)) = noise {
            if sigma > 0.0 {
                let sigma = F::of(sigma);
                for &(row, _) in &token_rows {
                    for v in x0.row_mut(row).iter_mut() {
                        let e: f64 = StandardNormal.sample(&mut *rng);
                        *v += sigma * F::of(e);
                    }
                }
            }
        }

        let (layers, final_ln, h) = self.encoder_forward(x0, &layout);
        let nb = batch.len();
        let starts: Vec<usize> = layout.segments.iter().map(|s| s.start).collect();
        let h0 = h.select(Axis(0), &starts);

        let (c_hat, c_used, from_pred, z) = if cfg.variant.has_concept_head() {
            let c_hat = h0.dot(&self.params.concept_w) + &self.params.concept_b;
            let mut c_used = c_hat.clone();
            let mut from_pred = vec![vec![true; k]; nb];
            for (b, ex) in batch.iter().enumerate() {
                if ex.independent {
                    let cv = ex.concepts.as_ref().ok_or(Error::MissingConcepts)?;
                    for i in 0..k {
                        if cv.observed[i] {
                            c_used[[b, i]] = F::of(cv.values[i]);
                            from_pred[b][i] = false;
                        }
                    }
                }
                for &(i, v) in &ex.overrides {
                    if i >= k {
                        return Err(Error::UnsupportedConcept(format!("index {i}")));
                    }
                    c_used[[b, i]] = F::of(v);
                    from_pred[b][i] = false;
                }
            }
            let z = if cfg.variant == Variant::Cb {
                known_embedding_rows(&c_used, &self.params.concept_emb)
            } else {
                Array2::zeros((nb, 0))
            };
            (c_hat, c_used, from_pred, z)
        } else {
            (Array2::zeros((nb, 0)), Array2::zeros((nb, 0)), vec![vec![]; nb], Array2::zeros((nb, 0)))
        };

        let (orth_u, orth_act, h_tilde) = if cfg.variant == Variant::Cb {
            self.orth_forward(&h)
        } else {
            (Array2::zeros((0, 0)), Array2::zeros((0, 0)), h.clone())
        };

        let mut predicted = Vec::new();
        for (b, (ex, seg)) in batch.iter().zip(&layout.segments).enumerate() {
            for &pos in &ex.predict {
                if pos >= ex.tokens.len() {
                    return Err(Error::InvalidSequence(format!("prediction position {pos} out of range")));
                }
                let row = seg.start + if pos == 0 { 0 } else { pos + prefix };
                predicted.push((b, pos, row));
            }
        }
        let cw = cfg.concept_width();
        let mut feats = Array2::<F>::zeros((predicted.len(), cw + d));
        for (m, &(b, _, row)) in predicted.iter().enumerate() {
            if cw > 0 {
                feats.slice_mut(s![m, ..cw]).assign(&z.row(b));
            }
            feats.slice_mut(s![m, cw..]).assign(&h_tilde.row(row));
        }
        let logits = feats.dot(&self.params.decoder.t());

        Ok(Tape {
            layout,
            token_rows,
            tag_rows,
            layers,
            final_ln,
            h,
            c_hat,
            c_used,
            from_pred,
            z,
            orth_u,
            orth_act,
            h_tilde,
            predicted,
            feats,
            logits,
        })
    }

    /// Backpropagates upstream gradients. Returns parameter gradients and the
    /// gradient with respect to the encoder input rows (token embeddings after noise).
    pub fn backward(&self, tape: &Tape<F>, up: &Upstream<F>) -> (Params<F>, Array2<F>) {
        let cfg = &self.config;
        let p = &self.params;
        let mut g = p.zeros_like();
        let cw = cfg.concept_width();
        let (nb, rows, d) = (tape.layout.segments.len(), tape.h.nrows(), cfg.hidden_dim);

        // decoder
        g.decoder += &up.dlogits.t().dot(&tape.feats);
        let dfeats = up.dlogits.dot(&p.decoder);
        let mut dz = up.dz.clone().unwrap_or_else(|| Array2::zeros((nb, cw)));
        let mut dh_tilde = up.dh_tilde.clone().unwrap_or_else(|| Array2::zeros((rows, d)));
        for (m, &(b, _, row)) in tape.predicted.iter().enumerate() {
            if cw > 0 {
                let mut dzb = dz.row_mut(b);
                dzb += &dfeats.slice(s![m, ..cw]);
            }
            let mut dht = dh_tilde.row_mut(row);
            dht += &dfeats.slice(s![m, cw..]);
        }

        // unknown embedding
        let mut dh = if cfg.variant == Variant::Cb {
            let dact = nn::linear_backward(tape.orth_act.view(), &p.orth_w2, &dh_tilde, &mut g.orth_w2);
            g.orth_b2 += &dh_tilde.sum_axis(Axis(0));
            let du = nn::gelu_backward(&tape.orth_u, &dact);
            g.orth_b1 += &du.sum_axis(Axis(0));
            nn::linear_backward(tape.h.view(), &p.orth_w1, &du, &mut g.orth_w1)
        } else {
            dh_tilde
        };

        // known embedding and concept head
        if cfg.variant.has_concept_head() {
            let k = cfg.k;
            let ce = cfg.concept_emb_dim;
            let mut dc_hat = up.dc_hat.clone().unwrap_or_else(|| Array2::zeros((nb, k)));
            if cfg.variant == Variant::Cb {
                for b in 0..nb {
                    for i in 0..k {
                        let dzi = dz.slice(s![b, i * ce..(i + 1) * ce]);
                        let c = tape.c_used[[b, i]];
                        let mut de = g.concept_emb.row_mut(i);
                        de.scaled_add(c, &dzi);
                        if tape.from_pred[b][i] {
                            dc_hat[[b, i]] += dzi.dot(&p.concept_emb.row(i));
                        }
                    }
                }
            }
            let starts: Vec<usize> = tape.layout.segments.iter().map(|s| s.start).collect();
            let h0 = tape.h.select(Axis(0), &starts);
            g.concept_w += &h0.t().dot(&dc_hat);
            g.concept_b += &dc_hat.sum_axis(Axis(0));
            let dh0 = dc_hat.dot(&p.concept_w.t());
            for (b, &st) in starts.iter().enumerate() {
                let mut r = dh.row_mut(st);
                r += &dh0.row(b);
            }
        }

        let dx0 = self.encoder_backward(tape, &mut g, dh);
        for &(row, id) in &tape.token_rows {
            let mut r = g.token_emb.row_mut(id as usize);
            r += &dx0.row(row);
        }
        for &(row, _, i, value) in &tape.tag_rows {
            g.tag_scale.row_mut(i).scaled_add(value, &dx0.row(row));
            let mut r = g.tag_bias.row_mut(i);
            r += &dx0.row(row);
        }
        (g, dx0)
    }

    /// Encoder states, one `d`-vector per position (PAD keys are masked out).
    pub fn encode(&self, masked: &TokenSequence) -> Result<Array2<F>> {
        self.require(!self.variant().has_tags(), "cb, cc-free or ar")?;
        let tape = self.forward_batch::<rand_chacha::ChaCha8Rng>(&[Example::new(masked.clone(), vec![])], None)?;
        Ok(tape.h)
    }

    /// `ĉ = g(h0)`.
    pub fn predict_concepts(&self, h0: ndarray::ArrayView1<F>) -> Result<Array1<F>> {
        self.require(self.variant().has_concept_head(), "cb or cc")?;
        Ok(h0.dot(&self.params.concept_w) + &self.params.concept_b)
    }

    /// Position-wise orthogonality network.
    pub fn unknown_embedding(&self, h: &Array2<F>) -> Array2<F> {
        if self.variant() == Variant::Cb {
            self.orth_forward(h).2
        } else {
            h.clone()
        }
    }

    /// Decoder logits for one position: `W_dec · [z, h̃_t]`.
    pub fn decode_logits(&self, z: ndarray::ArrayView1<F>, h_tilde: ndarray::ArrayView1<F>) -> Array1<F> {
        let cw = self.config.concept_width();
        let w = &self.params.decoder;
        let mut out = w.slice(s![.., cw..]).dot(&h_tilde);
        if cw > 0 {
            out += &w.slice(s![.., ..cw]).dot(&z);
        }
        out
    }

    /// Softmax of [`CbModel::decode_logits`].
    pub fn decode(&self, z: ndarray::ArrayView1<F>, h_tilde: ndarray::ArrayView1<F>) -> Array1<F> {
        let mut l = self.decode_logits(z, h_tilde).to_vec();
        nn::softmax_inplace(&mut l);
        Array1::from(l)
    }

    /// CB forward pass with logits at every MASK position.
    pub fn forward(&self, masked: &TokenSequence, concepts: Option<&ConceptVector>, mode: ConceptMode<'_>) -> Result<ForwardTrace<F>> {
        self.require(self.variant() == Variant::Cb, "cb")?;
        let positions: Vec<usize> = masked.ids().iter().enumerate().filter(|(_, &t)| t == MASK).map(|(i, _)| i).collect();
        let mut ex = Example::new(masked.clone(), positions.clone());
        match mode {
            ConceptMode::TrainIndependent(c) => {
                ex.concepts = Some(c.clone());
                ex.independent = true;
            }
            ConceptMode::Inference => {
                ex.concepts = concepts.cloned();
            }
            ConceptMode::Intervened(ov) => {
                ex.concepts = concepts.cloned();
                ex.overrides = ov.to_vec();
            }
        }
        let tape = self.forward_batch::<rand_chacha::ChaCha8Rng>(&[ex], None)?;
        Ok(ForwardTrace {
            h0: tape.h.row(0).to_owned(),
            c_hat: tape.c_hat.row(0).to_owned(),
            c_used: tape.c_used.row(0).to_owned(),
            z: tape.z.row(0).to_owned(),
            h: tape.h,
            h_tilde: tape.h_tilde,
            masked_positions: positions,
            logits: tape.logits,
        })
    }

    /// Tag-conditioned forward pass (C and CC variants); logits at MASK positions.
    pub fn forward_conditional(&self, masked: &TokenSequence, concepts: &ConceptVector) -> Result<ConditionalTrace<F>> {
        self.require(self.variant().has_tags(), "c or cc")?;
        let positions: Vec<usize> = masked.ids().iter().enumerate().filter(|(_, &t)| t == MASK).map(|(i, _)| i).collect();
        let mut ex = Example::new(masked.clone(), positions.clone());
        ex.concepts = Some(concepts.clone());
        let tape = self.forward_batch::<rand_chacha::ChaCha8Rng>(&[ex], None)?;
        let c_hat = (self.variant() == Variant::Cc).then(|| tape.c_hat.row(0).to_owned());
        Ok(ConditionalTrace { h: tape.h, masked_positions: positions, logits: tape.logits, c_hat })
    }

    /// Next-token log-probabilities: row `t` scores the token at `t + 1`, for
    /// `t` from CLS up to the last residue.
    pub fn forward_autoregressive(&self, ts: &TokenSequence) -> Result<Array2<F>> {
        self.require(self.variant() == Variant::Ar, "ar")?;
        let trimmed = ts.trimmed();
        let predict: Vec<usize> = (0..trimmed.len() - 1).collect();
        let tape = self.forward_batch::<rand_chacha::ChaCha8Rng>(&[Example::new(trimmed, predict)], None)?;
        let mut out = tape.logits;
        for mut row in out.rows_mut() {
            let lp = nn::log_softmax(row.view());
            row.assign(&lp);
        }
        Ok(out)
    }
}

/// `z_i = ĉ_i · e_i`, flattened row-major (concept-major).
pub fn known_embedding<F: Real>(c_hat: &[F], e: &Array2<F>) -> Array1<F> {
    let ce = e.ncols();
    let mut z = Array1::zeros(c_hat.len() * ce);
    for (i, &c) in c_hat.iter().enumerate() {
        z.slice_mut(s![i * ce..(i + 1) * ce]).assign(&(&e.row(i) * c));
    }
    z
}

fn known_embedding_rows<F: Real>(c: &Array2<F>, e: &Array2<F>) -> Array2<F> {
    let ce = e.ncols();
    let mut z = Array2::zeros((c.nrows(), c.ncols() * ce));
    for (b, row) in c.rows().into_iter().enumerate() {
        z.row_mut(b).assign(&known_embedding(row.as_slice().expect("contiguous"), e));
    }
    z
}

/// Adds i.i.d. `N(0, sigma²)` noise to every element (training only).
pub fn add_embedding_noise<F: Real, R: Rng>(emb: &Array2<F>, sigma: f64, rng: &mut R) -> Array2<F> {
    if sigma == 0.0 {
        return emb.clone();
    }
    emb.mapv(|v| {
        let e: f64 = StandardNormal.sample(rng);
        v + F::of(sigma * e)
    })
}
