//! Training objectives with their gradients.
//!
//! Each function returns the loss value together with the gradient of that
//! value with respect to its array inputs, so the model can backpropagate.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptVector;
use crate::error::{Error, Result};
use crate::nn::{self, Layout, Real};
use crate::seqio::TokenId;

/// Weights of the concept and orthogonality terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Guard inside the norms of the cosine similarity.
pub const COS_EPS: f64 = 1e-8;

/// Cross-entropy over predicted rows. `groups[m]` names the sequence of row
/// `m`; the loss averages within each sequence, then over sequences.
pub fn mlm_loss_grad<F: Real>(logits: ArrayView2<F>, targets: &[TokenId], groups: &[usize]) -> Result<(f64, Array2<F>)> {
    if logits.nrows() == 0 {
        return Err(Error::EmptyLoss);
    }
    assert_eq!(logits.nrows(), targets.len(), "one target per logit row");
    assert_eq!(groups.len(), targets.len(), "one group per logit row");
    let n_groups = groups.iter().max().map_or(0, |&g| g + 1);
    let mut counts = vec![0usize; n_groups];
    for &g in groups {
        counts[g] += 1;
    }
    let used = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (m, row) in logits.rows().into_iter().enumerate() {
        let t = targets[m] as usize;
        if t >= row.len() {
            return Err(Error::InvalidSequence(format!("target id {t} outside vocabulary")));
        }
        let lp = nn::log_softmax(row);
        let w = 1.0 / (counts[groups[m]] as f64 * used);
        total += -lp[t].f64() * w;
        let wf = F::of(w);
        for (j, g) in grad.row_mut(m).iter_mut().enumerate() {
            let p = lp[j].exp();
            *g = wf * (p - if j == t { F::one() } else { F::zero() });
        }
    }
    Ok((total, grad))
}

/// Mean negative log-likelihood of `targets` for one sequence.
pub fn mlm_loss<F: Real>(logits: ArrayView2<F>, targets: &[TokenId]) -> Result<f64> {
    let groups = vec![0; targets.len()];
    Ok(mlm_loss_grad(logits, targets, &groups)?.0)
}

/// Squared error over observed concepts, averaged over the observed count per
/// sequence (zero when none are observed), then over the batch.
pub fn concept_loss_grad<F: Real>(c_hat: ArrayView2<F>, truth: &[&ConceptVector]) -> (f64, Array2<F>) {
    let b = c_hat.nrows();
    let mut grad = Array2::zeros(c_hat.raw_dim());
    if b == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for (r, cv) in truth.iter().enumerate() {
        let n = cv.observed.iter().filter(|&&o| o).count();
        if n == 0 {
            continue;
        }
        let w = 1.0 / (n as f64 * b as f64);
        for i in 0..c_hat.ncols() {
            if cv.observed[i] {
                let diff = c_hat[[r, i]].f64() - cv.values[i];
                total += w * diff * diff;
                grad[[r, i]] = F::of(2.0 * w * diff);
            }
        }
    }
    (total, grad)
}

/// Concept loss for a single prediction.
pub fn concept_loss<F: Real>(c_hat: &[F], truth: &ConceptVector) -> f64 {
    let view = ArrayView2::from_shape((1, c_hat.len()), c_hat).expect("row vector");
    concept_loss_grad(view, &[truth]).0
}

/// Cosine similarity with the shorter vector zero-padded.
pub fn padded_cosine<F: Real>(a: &[F], b: &[F]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum();
    let na = (a.iter().map(|x| x.f64().powi(2)).sum::<f64>() + COS_EPS).sqrt();
    let nb = (b.iter().map(|x| x.f64().powi(2)).sum::<f64>() + COS_EPS).sqrt();
    dot / (na * nb)
}

/// Mean `|cos(z, h̃_i)|` over the non-PAD positions of each sequence, then over
/// the batch. `z` holds one row per sequence, `h_tilde` one row per packed position.
pub fn orthogonality_loss_grad<F: Real>(z: ArrayView2<F>, h_tilde: ArrayView2<F>, layout: &Layout) -> (f64, Array2<F>, Array2<F>) {
    let mut dz = Array2::zeros(z.raw_dim());
    let mut dh = Array2::zeros(h_tilde.raw_dim());
    let nb = layout.segments.len();
    if nb == 0 {
        return (0.0, dz, dh);
    }
    let width = z.ncols().min(h_tilde.ncols());
    let mut total = 0.0;
    for (b, seg) in layout.segments.iter().enumerate() {
        let zr = z.row(b);
        // z is zero-padded or truncated to the width of h̃
        let zz: f64 = zr.iter().take(width).map(|v| v.f64().powi(2)).sum();
        let nz = (zz + COS_EPS).sqrt();
        let w = 1.0 / (seg.valid as f64 * nb as f64);
        for row in seg.start..seg.start + seg.valid {
            let hr = h_tilde.row(row);
            let hh: f64 = hr.iter().map(|v| v.f64().powi(2)).sum();
            let nh = (hh + COS_EPS).sqrt();
            let dot: f64 = (0..width).map(|j| zr[j].f64() * hr[j].f64()).sum();
            let cos = dot / (nz * nh);
            total += w * cos.abs();
            let sign = if cos > 0.0 {
                1.0
            } else if cos < 0.0 {
                -1.0
            } else {
                0.0
            };
            if sign == 0.0 {
                continue;
            }
            let s = sign * w;
            for j in 0..h_tilde.ncols() {
                let zj = if j < width { zr[j].f64() } else { 0.0 };
                dh[[row, j]] += F::of(s * (zj / (nz * nh) - cos * hr[j].f64() / (nh * nh)));
            }
            for j in 0..width {
                dz[[b, j]] += F::of(s * (hr[j].f64() / (nz * nh) - cos * zr[j].f64() / (nz * nz)));
            }
        }
    }
    (total, dz, dh)
}

/// Weighted objective `mlm + alpha · concept + beta · orth`.
pub fn total_loss(mlm: f64, concept: f64, orth: f64, alpha: f64, beta: f64) -> f64 {
    mlm + alpha * concept + beta * orth
}
