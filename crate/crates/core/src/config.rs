//! Run configuration: one JSON document holding every module's settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::intervene::AttributionMethod;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Dirichlet concentration of the per-sequence residue profile; 0 draws
    /// every sequence from the uniform profile.
    pub concentration: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { n: 20_000, min_len: 24, max_len: 48, concentration: 12.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Input FASTA for `prepare`; a synthetic corpus is generated when absent.
    pub fasta: Option<PathBuf>,
    /// Optional TSV of external concept annotations keyed by FASTA header.
    pub annotations: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Prepared corpus directory (corpus.tsv and stats.json).
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub checkpoint: Option<PathBuf>,
    /// Autoregressive checkpoint used to score naturalness.
    pub naturalness_checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mask_rate: f64,
    /// Concepts to evaluate by name; empty means all.
    pub concepts: Vec<String>,
    /// Interventions per direction and concept.
    pub per_direction: usize,
    pub mask_fraction: f64,
    pub attribution: AttributionMethod,
    pub correlation: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mask_rate: 0.25,
            concepts: Vec::new(),
            per_direction: 50,
            mask_fraction: 0.05,
            attribution: AttributionMethod::default(),
            correlation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every random stream is derived from this seed.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
    /// Divides the normalized values of the named concepts by this factor
    /// (a deliberately broken normalization, for debugging drills).
    pub corrupt_normalization: Vec<(String, f64)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
            corrupt_normalization: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads `path` (or defaults), applies `key=value` overrides, then an
    /// optional seed, and resolves derived fields.
    pub fn build(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let base = match path {
            Some(p) => serde_json::from_str::<Value>(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
            None => serde_json::to_value(RunConfig::default())?,
        };
        let mut value = serde_json::to_value(serde_json::from_value::<RunConfig>(base).map_err(|e| Error::Config(e.to_string()))?)?;
        for s in sets {
            apply_set(&mut value, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pushes the top-level seed and loss weights into the module configs.
    pub fn resolve(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.train.weights = self.loss;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let s = &self.data.synthetic;
        if s.min_len == 0 || s.min_len > s.max_len {
            return Err(Error::Config("synthetic lengths must satisfy 0 < min_len <= max_len".into()));
        }
        if !(0.0..1.0).contains(&self.eval.mask_rate) || self.eval.mask_rate == 0.0 {
            return Err(Error::Config("eval.mask_rate must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise. Unknown keys surface when the
/// document is deserialized.
pub fn apply_set(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad key `{key}`")));
        }
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config(format!("`{key}` does not name a setting")))?;
        if n + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
