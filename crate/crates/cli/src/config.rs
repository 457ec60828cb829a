//! Run configuration: JSON file, dotted `--set` overrides, defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use coattn::attention::Variant;
use coattn::data::DataConfig;
use coattn::encoders::ModelConfig;
use coattn::tasks::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Generation settings; `gen-data` and on-the-fly sets use them.
    pub data: DataConfig,
    /// Held-out set size when data is generated on the fly.
    pub val_count: usize,
    pub train: TrainConfig,
    pub inputs: Inputs,
    pub finetune: FinetuneSection,
    pub localize: LocalizeSection,
    pub ablate: AblateSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::desk(Variant::Cma),
            data: DataConfig::default(),
            val_count: 128,
            train: TrainConfig::pretext(),
            inputs: Inputs::default(),
            finetune: FinetuneSection::default(),
            localize: LocalizeSection::default(),
            ablate: AblateSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

/// Files produced by earlier runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Dataset for `eval-sync` and `localize`.
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub vision_only: bool,
    pub train: TrainConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            classes: 4,
            train_count: 256,
            test_count: 128,
            vision_only: false,
            train: TrainConfig::finetune(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeSection {
    /// Clips to render when no dataset is given.
    pub samples: usize,
    pub layer: usize,
    /// One head, or every head when absent.
    pub head: Option<usize>,
}

impl Default for LocalizeSection {
    fn default() -> Self {
        LocalizeSection {
            samples: 8,
            layer: 0,
            head: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<Variant>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub train_count: usize,
    pub val_count: usize,
    pub train: TrainConfig,
}

impl Default for AblateSection {
    fn default() -> Self {
        let mut train = TrainConfig::pretext();
        train.steps = 500;
        train.eval_every = 250;
        train.eval_train = false;
        AblateSection {
            variants: vec![Variant::Cma],
            depths: vec![1, 2],
            heads: vec![2, 4],
            train_count: 512,
            val_count: 128,
            train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub eps: f64,
    /// Sampled coordinates per input tensor of the full-model check.
    pub coords_per_input: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            eps: coattn::gradcheck::DEFAULT_EPS,
            coords_per_input: 6,
        }
    }
}

/// Parses the right-hand side of `--set`: JSON when it parses, a string
/// otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not key=value"))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty component");
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("`{}` is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parse_value(raw));
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .with_context(|| format!("unknown config key `{}`", parts[..=i].join(".")))?;
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Ok(())
}

/// Defaults, then the file, then overrides, then the seed flag (which sets
/// both the run seed and the data seed).
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let parsed: RunConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            serde_json::to_value(parsed)?
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    cfg.model.validate().context("invalid model configuration")?;
    Ok(cfg)
}
