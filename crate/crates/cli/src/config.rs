//! The run configuration: one JSON document of flat, dot-namespaced keys
//! (`"train.learning_rate": 0.01`). Defaults, then the file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rankvqa::data::SyntheticSpec;
use rankvqa::experiments::{AblationSettings, GradcheckOptions};
use rankvqa::{AblationVariant, FusionMode, HybridConfig, ModelConfig, RankingConfig, SeedPlan, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            weight_decay: t.weight_decay,
            patience: t.patience,
        }
    }
}

/// Synthetic task parameters; the generator seed comes from the top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_concepts: usize,
    pub n_question_types: usize,
    pub n_answers: usize,
    pub noise_sigma: f64,
    pub regions: usize,
    pub d_visual: usize,
    pub d_text: usize,
    pub n_samples: usize,
    pub prototype_scale: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            n_concepts: s.n_concepts,
            n_question_types: s.n_question_types,
            n_answers: s.n_answers,
            noise_sigma: s.noise_sigma,
            regions: s.regions,
            d_visual: s.d_visual,
            d_text: s.d_text,
            n_samples: s.n_samples,
            prototype_scale: s.prototype_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Dataset file; when absent, commands generate the synthetic task in memory.
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub variants: Vec<AblationVariant>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { variants: AblationVariant::ALL.to_vec(), seeds: (0..5).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub step: f64,
    pub batch_size: usize,
    pub fusion_modes: Vec<FusionMode>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let o = GradcheckOptions::default();
        Self {
            seeds: (0..20).collect(),
            tolerance: o.tolerance,
            step: o.step,
            batch_size: o.batch_size,
            fusion_modes: vec![FusionMode::TokenSequence],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub ranking: RankingConfig,
    pub hybrid: HybridConfig,
    pub data: DataSection,
    pub split: SplitSection,
    pub paths: PathsSection,
    pub ablation: AblationSection,
    pub gradcheck: GradcheckSection,
}

impl RunConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec {
            n_concepts: d.n_concepts,
            n_question_types: d.n_question_types,
            n_answers: d.n_answers,
            noise_sigma: d.noise_sigma,
            regions: d.regions,
            d_visual: d.d_visual,
            d_text: d.d_text,
            n_samples: d.n_samples,
            prototype_scale: d.prototype_scale,
            seed: SeedPlan(self.seed).data(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            weight_decay: t.weight_decay,
            patience: t.patience,
            seed: self.seed,
            ranking: self.ranking.clone(),
            hybrid: self.hybrid.clone(),
        }
    }

    pub fn split_fractions(&self) -> [f64; 3] {
        [self.split.train, self.split.val, self.split.test]
    }

    pub fn ablation_settings(&self) -> AblationSettings {
        AblationSettings {
            model: self.model.clone(),
            train: self.train_config(),
            split_fractions: self.split_fractions(),
        }
    }

    pub fn gradcheck_options(&self) -> GradcheckOptions {
        GradcheckOptions {
            tolerance: self.gradcheck.tolerance,
            step: self.gradcheck.step,
            batch_size: self.gradcheck.batch_size,
            ranking: self.ranking.clone(),
            hybrid: self.hybrid.clone(),
            fault: None,
        }
    }

    /// Defaults, overlaid with the file at `path` (if any), overlaid with
    /// `overrides` (flat keys).
    pub fn resolve(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            let Value::Object(flat) = doc else {
                bail!("config {} must be a JSON object of dotted keys", p.display());
            };
            for (k, v) in flat {
                set_path(&mut tree, &k, v)?;
            }
        }
        for (k, v) in overrides {
            set_path(&mut tree, k, v.clone())?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).context("invalid configuration")?;
        cfg.model.validate()?;
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    /// The resolved configuration as a flat object of dotted keys.
    pub fn to_flat(&self) -> Value {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        Value::Object(out)
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("malformed config key `{key}`");
    }
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        // A scalar default (e.g. an enum written as a string) gives way to a
        // nested value; deserialization rejects it if it makes no sense.
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        let Value::Object(map) = node else { unreachable!() };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}
