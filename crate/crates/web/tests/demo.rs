use cbplm::concepts::{fit_normalization, compute_all, ConceptRegistry};
use cbplm::model::{CbModel, ModelConfig, Variant};
use cbplm::train::Checkpoint;
use cbplm_web::{concepts_json, inspect_json, intervene_json, titration_json};
use serde_json::Value;

const SEQ: &str = "MQIFVKTLTGKTITLEVEPSDTIENVKAKIQDKEGIPPDQQRLIFAGKQLEDGRTLSDYNIQKESTLHLVLRLRGG";

fn checkpoint(variant: Variant) -> Vec<u8> {
    let registry = ConceptRegistry::builtin();
    let raw: Vec<_> = [SEQ, "WWYFFAKDE", "GGGSSPPNNT"].iter().map(|s| compute_all(s, &registry).unwrap()).collect();
    let stats = fit_normalization(&registry, &raw);
    let model = CbModel::<f32>::new(ModelConfig { layers: 1, hidden_dim: 16, heads: 2, variant, ..Default::default() }).unwrap();
    Checkpoint { model, registry, stats }.to_bytes().unwrap()
}

#[test]
fn calculator_lists_every_concept() {
    let rows: Vec<Value> = serde_json::from_str(&concepts_json(SEQ).unwrap()).unwrap();
    assert_eq!(rows.len(), 14);
    assert_eq!(rows[1]["name"], "aromaticity");
    assert!(concepts_json("").is_err());
}

#[test]
fn titration_crosses_zero_at_pi() {
    let t: Value = serde_json::from_str(&titration_json(SEQ, 0.0, 14.0, 57).unwrap()).unwrap();
    let ph: Vec<f64> = serde_json::from_value(t["ph"].clone()).unwrap();
    let charge: Vec<f64> = serde_json::from_value(t["charge"].clone()).unwrap();
    let pi = t["isoelectric_point"].as_f64().unwrap();
    assert_eq!((ph.len(), ph[0], ph[56]), (57, 0.0, 14.0));
    assert!(charge.windows(2).all(|w| w[1] < w[0]));
    for (p, c) in ph.iter().zip(&charge) {
        assert_eq!(*c > 0.0, *p < pi, "pH {p}");
    }
    assert!(titration_json(SEQ, 5.0, 5.0, 10).is_err());
}

#[test]
fn inspector_reads_checkpoint_bytes() {
    let s: Value = serde_json::from_str(&inspect_json(&checkpoint(Variant::Cb)).unwrap()).unwrap();
    assert_eq!(s["variant"], "cb");
    assert_eq!(s["concepts"].as_array().unwrap().len(), 14);
    assert_eq!(s["concepts"][0]["increase"].as_str().unwrap().len(), 5);
    let c: Value = serde_json::from_str(&inspect_json(&checkpoint(Variant::C)).unwrap()).unwrap();
    assert!(c["concepts"].as_array().unwrap().is_empty());
    assert!(inspect_json(b"not a checkpoint").is_err());
}

#[test]
fn intervention_keeps_length() {
    let r: Value = serde_json::from_str(&intervene_json(&checkpoint(Variant::Cb), SEQ, "gravy", "+", 0.05).unwrap()).unwrap();
    let out = r["output"].as_str().unwrap();
    assert_eq!(out.len(), SEQ.len());
    assert_eq!(r["masked_positions"].as_array().unwrap().len(), 4);
    assert!(intervene_json(&checkpoint(Variant::Cb), SEQ, "nope", "+", 0.05).is_err());
    assert!(intervene_json(&checkpoint(Variant::Cb), SEQ, "gravy", "sideways", 0.05).is_err());
}
