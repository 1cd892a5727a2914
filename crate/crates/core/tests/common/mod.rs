#![allow(dead_code)]

pub mod oracle;

use cbplm::concepts::ConceptVector;
use cbplm::model::{CbModel, Example, ModelConfig, Params, Variant};
use cbplm::seqio::{apply_mask, tokenize_unpadded, MaskSpec};
use cbplm::train::{batch_loss, loss_and_grad, Batch, Objective};

/// Deterministic pseudo-random fill, so tests do not depend on init details.
pub fn scramble(params: &mut Params<f64>, scale: f64, salt: f64) {
    let mut n = 0.0f64;
    params.visit_mut(|_, mut t| {
        t.mapv_inplace(|_| {
            n += 1.0;
            scale * ((n * 0.7548776662 + salt).sin() * 43758.5453).fract()
        })
    });
}

/// 1-layer model of width `d` with every parameter nonzero.
pub fn small_model(variant: Variant, d: usize, layer_norm: bool) -> CbModel<f64> {
    let cfg = ModelConfig { layers: 1, hidden_dim: d, heads: 2, max_len: 16, variant, layer_norm, seed: 5, ..Default::default() };
    let mut m = CbModel::<f64>::new(cfg).unwrap();
    scramble(&mut m.params, 0.5, 0.3);
    m
}

/// Two sequences of six residues with two masked positions each.
pub fn small_batch(variant: Variant) -> Batch {
    let seqs = ["MKWDEA", "GYFSLR"];
    let concepts = [
        ConceptVector { values: (0..14).map(|i| (i as f64 * 0.37).fract()).collect(), observed: (0..14).map(|i| i % 5 != 3).collect(), normalized: true },
        ConceptVector::fully_observed((0..14).map(|i| (i as f64 * 0.61 + 0.2).fract()).collect(), true),
    ];
    let mut examples = Vec::new();
    let mut targets = Vec::new();
    for (n, (seq, c)) in seqs.iter().zip(concepts).enumerate() {
        let ts = tokenize_unpadded(seq, 16).unwrap();
        let positions = vec![2 + n, 5];
        let (masked, plan) = apply_mask(&ts, &MaskSpec::Positions(positions.clone()), 0).unwrap();
        targets.extend(plan.positions.iter().map(|&p| ts.ids()[p]));
        let mut ex = Example::new(masked, plan.positions);
        ex.concepts = Some(c);
        ex.independent = variant == Variant::Cb;
        examples.push(ex);
    }
    Batch { examples, targets }
}

fn perturbed(model: &CbModel<f64>, j: usize, delta: f64) -> CbModel<f64> {
    let mut m = model.clone();
    let mut idx = 0;
    m.params.visit_mut(|_, mut t| {
        for v in t.iter_mut() {
            if idx == j {
                *v += delta;
            }
            idx += 1;
        }
    });
    m
}

/// `‖analytic − central difference‖ / max(‖analytic‖, ‖numeric‖)` over all parameters.
pub fn gradient_error(model: &CbModel<f64>, batch: &Batch, obj: &Objective) -> f64 {
    let (_, grads) = loss_and_grad::<f64, rand_chacha::ChaCha8Rng>(model, batch, obj, None).unwrap();
    let analytic = grads.flatten();
    let h = 1e-5;
    let numeric: Vec<f64> = (0..analytic.len())
        .map(|j| {
            let up = batch_loss(&perturbed(model, j, h), batch, obj).unwrap().total;
            let down = batch_loss(&perturbed(model, j, -h), batch, obj).unwrap().total;
            (up - down) / (2.0 * h)
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-300)
}

/// CB model whose concept head is an affine function of the input rows:
/// no layer norm, zero queries (so attention is a uniform average, linear in
/// the values) and a zero MLP.
pub fn linear_concept_model() -> CbModel<f64> {
    let mut m = small_model(Variant::Cb, 8, false);
    let layer = &mut m.params.layers[0];
    layer.wq.fill(0.0);
    layer.w1.fill(0.0);
    m
}
