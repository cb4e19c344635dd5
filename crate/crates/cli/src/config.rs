//! Layered configuration: built-in defaults, then a TOML file, then flags.
//! Every effective leaf value remembers which layer set it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nlft_core::corpus::Difficulty;
use nlft_core::judge::RemoteJudgeConfig;
use nlft_core::lm::{Model, TabularConfig, TabularLm, TinyTransformer, TransformerConfig};
use nlft_core::train::{DecodeConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub operand_min: i64,
    pub operand_max: i64,
    pub steps: usize,
    pub multiply: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = Difficulty::default();
        CorpusSection {
            operand_min: d.operand_min,
            operand_max: d.operand_max,
            steps: d.steps,
            multiply: d.multiply,
        }
    }
}

impl CorpusSection {
    pub fn difficulty(&self) -> Difficulty {
        Difficulty {
            operand_min: self.operand_min,
            operand_max: self.operand_max,
            steps: self.steps,
            multiply: self.multiply,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Transformer,
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_window: usize,
    pub init_std: f64,
    pub seed: u64,
    /// Tabular only: context length and hash buckets (0 means one row per token).
    pub order: usize,
    pub buckets: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Transformer,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            context_window: 256,
            init_std: 0.02,
            seed: 0,
            order: 1,
            buckets: 0,
        }
    }
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize) -> Result<Model> {
        Ok(match self.kind {
            ModelKind::Transformer => {
                if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
                    bail!("model.d_model must be a positive multiple of model.n_heads");
                }
                Model::Transformer(TinyTransformer::new(TransformerConfig {
                    vocab_size,
                    d_model: self.d_model,
                    n_layers: self.n_layers,
                    n_heads: self.n_heads,
                    context_window: self.context_window,
                    seed: self.seed,
                    init_std: self.init_std,
                }))
            }
            ModelKind::Tabular => {
                let mut c = if self.order <= 1 && self.buckets == 0 {
                    TabularConfig::bigram(vocab_size, self.seed, self.init_std)
                } else {
                    let buckets = if self.buckets == 0 { vocab_size } else { self.buckets };
                    TabularConfig::hashed(vocab_size, self.order.max(1), buckets, self.seed, self.init_std)
                };
                c.context_window = self.context_window;
                Model::Tabular(TabularLm::new(c))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    Rule,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct JudgeSection {
    pub kind: JudgeKind,
    #[serde(flatten)]
    pub remote: RemoteJudgeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CliConfig {
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub judge: JudgeSection,
    pub eval: DecodeConfig,
}

/// Effective configuration plus the origin of every leaf value.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: CliConfig,
    pub provenance: BTreeMap<String, String>,
}

impl Resolved {
    pub fn provenance_json(&self) -> Value {
        serde_json::to_value(&self.provenance).expect("string map serializes")
    }
}

fn leaves(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaves(&p, child, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("config key {path} does not name a section"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Merges `file` (if any) and `flags` over the defaults. Unknown keys are
/// rejected so typos do not silently fall back to defaults.
pub fn resolve(file: Option<&Path>, flags: &[(&str, Value)]) -> Result<Resolved> {
    let mut tree = serde_json::to_value(CliConfig::default())?;
    let mut known = Vec::new();
    leaves("", &tree, &mut known);
    let mut provenance: BTreeMap<String, String> = known.iter().map(|k| (k.clone(), "default".into())).collect();
    // Optional fields serialize as null; accept them as known leaves too.
    let is_known = |k: &str| known.iter().any(|p| p == k);

    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed: toml::Value = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let as_json = serde_json::to_value(parsed)?;
        let mut keys = Vec::new();
        leaves("", &as_json, &mut keys);
        for k in keys {
            if !is_known(&k) {
                bail!("unknown config key {k} in {}", path.display());
            }
            let v = k.split('.').try_fold(&as_json, |v, p| v.get(p)).cloned().unwrap_or(Value::Null);
            set_path(&mut tree, &k, v)?;
            provenance.insert(k, "file".into());
        }
    }
    for (k, v) in flags {
        if !is_known(k) {
            bail!("internal error: flag maps to unknown key {k}");
        }
        set_path(&mut tree, k, v.clone())?;
        provenance.insert(k.to_string(), "flag".into());
    }
    let config: CliConfig = serde_json::from_value(tree).context("invalid configuration value")?;
    Ok(Resolved { config, provenance })
}
