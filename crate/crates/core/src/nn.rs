//! Dense building blocks with explicit forward caches and backward passes.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Contiguous block of rows belonging to one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// Keys at or beyond `valid` (PAD) are excluded from attention.
    pub valid: usize,
}

/// Packed batch layout: sequences stacked row-wise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub segments: Vec<Segment>,
    pub causal: bool,
}

impl Layout {
    pub fn from_lengths(lengths: impl IntoIterator<Item = (usize, usize)>, causal: bool) -> Self {
        let mut start = 0;
        let segments = lengths
            .into_iter()
            .map(|(len, valid)| {
                let seg = Segment { start, len, valid };
                start += len;
                seg
            })
            .collect();
        Layout { segments, causal }
    }

    pub fn rows(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len)
    }
}

#[derive(Debug, Clone)]
pub struct LnCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm<F: Real>(x: &Array2<F>, g: &Array1<F>, b: &Array1<F>) -> (Array2<F>, LnCache<F>) {
    let n = x.ncols();
    let inv_n = F::of(1.0 / n as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() * inv_n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() * inv_n;
        *r = F::one() / (var + eps).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: &Array1<F>,
    dg: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let inv_n = F::of(1.0 / dy.ncols() as f64);
    let mut dx = dy * g;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let mean_d = row.sum() * inv_n;
        let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() * inv_n;
        Zip::from(&mut row).and(&xh).for_each(|d, &h| *d = r * (*d - mean_d - h * mean_dx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
pub fn gelu<F: Real>(x: &Array2<F>) -> Array2<F> {
    let c = F::of(GELU_C);
    let a = F::of(0.044715);
    let half = F::of(0.5);
    x.mapv(|v| half * v * (F::one() + tanh(c * (v + a * v * v * v))))
}

// libm's tanh is markedly slower than exp; saturates correctly at both ends.
#[inline]
fn tanh<F: Real>(u: F) -> F {
    let two = F::of(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

pub fn gelu_backward<F: Real>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let c = F::of(GELU_C);
    let a = F::of(0.044715);
    let half = F::of(0.5);
    let three = F::of(3.0);
    let mut out = dy.clone();
    Zip::from(&mut out).and(x).for_each(|d, &v| {
        let t = tanh(c * (v + a * v * v * v));
        let dt = (F::one() - t * t) * c * (F::one() + three * a * v * v);
        *d *= half * (F::one() + t) + half * v * dt;
    });
    out
}

/// Row-wise softmax.
pub fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        softmax_inplace(row.as_slice_mut().expect("contiguous row"));
    }
    p
}

pub fn softmax_inplace<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax<F: Real>(row: ArrayView1<F>) -> Array1<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    row.mapv(|v| v - lse)
}

/// Precomputed rotary angles for `positions × head_dim/2`.
#[derive(Debug, Clone)]
pub struct Rope<F> {
    cos: Array2<F>,
    sin: Array2<F>,
}

pub const ROPE_BASE: f64 = 10_000.0;

impl<F: Real> Rope<F> {
    pub fn new(positions: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Array2::zeros((positions, half));
        let mut sin = Array2::zeros((positions, half));
        for p in 0..positions {
            for i in 0..half {
                let theta = p as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                cos[[p, i]] = F::of(theta.cos());
                sin[[p, i]] = F::of(theta.sin());
            }
        }
        Rope { cos, sin }
    }

    pub fn positions(&self) -> usize {
        self.cos.nrows()
    }

    /// Rotates pairs `(i, i + half)` of each row by its position's angle;
    /// `inverse` applies the transpose (used in the backward pass).
    pub fn apply(&self, mut x: ArrayViewMut2<F>, inverse: bool) {
        let half = x.ncols() / 2;
        for (p, mut row) in x.rows_mut().into_iter().enumerate() {
            for i in 0..half {
                let (c, s) = (self.cos[[p, i]], self.sin[[p, i]]);
                let s = if inverse { -s } else { s };
                let (a, b) = (row[i], row[i + half]);
                row[i] = a * c - b * s;
                row[i + half] = a * s + b * c;
            }
        }
    }
}

/// Multi-head scaled dot-product attention over a packed layout.
/// `q` and `k` must already carry rotary position information.
/// Returns the context rows and the attention probabilities per (segment, head).
pub fn attention<F: Real>(q: &Array2<F>, k: &Array2<F>, v: &Array2<F>, heads: usize, layout: &Layout) -> (Array2<F>, Vec<Array2<F>>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(layout.segments.len() * heads);
    for seg in &layout.segments {
        let rows = seg.start..seg.start + seg.len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut scores = qh.dot(&kh.t()) * scale;
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                for (j, sc) in row.iter_mut().enumerate() {
                    if j >= seg.valid || (layout.causal && j > i) {
                        *sc = F::neg_infinity();
                    }
                }
                let slice = row.as_slice_mut().expect("contiguous row");
                softmax_inplace(slice);
            }
            ctx.slice_mut(s![rows.clone(), cols]).assign(&scores.dot(&vh));
            probs.push(scores);
        }
    }
    (ctx, probs)
}

/// Backward of [`attention`]: returns (dq, dk, dv).
pub fn attention_backward<F: Real>(
    dctx: &Array2<F>,
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    probs: &[Array2<F>],
    heads: usize,
    layout: &Layout,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (si, seg) in layout.segments.iter().enumerate() {
        let rows = seg.start..seg.start + seg.len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &probs[si * heads + h];
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let dout = dctx.slice(s![rows.clone(), cols.clone()]);
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dout));
            let dp = dout.dot(&vh.t());
            let mut ds = p * &dp;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = row.sum();
                Zip::from(&mut row).and(&prow).for_each(|x, &pp| *x -= pp * dot);
            }
            ds *= scale;
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
        }
    }
    (dq, dk, dv)
}

/// `dw += x^T dy`, returns `dy w^T`.
pub fn linear_backward<F: Real>(x: ArrayView2<F>, w: &Array2<F>, dy: &Array2<F>, dw: &mut Array2<F>) -> Array2<F> {
    dw.scaled_add(F::one(), &x.t().dot(dy));
    dy.dot(&w.t())
}
