//! Run configuration: one JSON document covering the model, every pipeline
//! stage and the data source. Unknown keys are rejected, missing keys take
//! their defaults, and `key.path=value` overrides are applied on top of the
//! file before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapt::AdaptConfig;
use crate::autodiff::Activation;
use crate::corpus::{synthetic_text, Corpus, Vocab};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::router::{RouterConfig, RouterNonlinearity};
use crate::tensor::DType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            hidden_dim: 512,
            num_layers: 4,
            num_heads: 4,
            max_seq_len: 64,
            activation: Activation::Silu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            seq_len: d.seq_len,
            lr: d.lr,
            weight_decay: d.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReorderSection {
    /// Share of training tokens used to score hidden units.
    pub calib_fraction: f64,
    pub calib_seq_len: usize,
}

impl Default for ReorderSection {
    fn default() -> Self {
        Self {
            calib_fraction: 0.001,
            calib_seq_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub theta: f64,
    pub lambda_llm: f64,
    pub lambda_router: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub freeze_attention: bool,
    pub ablation_mode: bool,
    pub num_experts: usize,
    pub router_hidden: usize,
    pub router_nonlinearity: RouterNonlinearity,
    /// θ values for `family`.
    pub thetas: Vec<f64>,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let d = AdaptConfig::default();
        Self {
            theta: d.theta,
            lambda_llm: d.lambda_llm,
            lambda_router: d.lambda_router,
            steps: d.steps,
            batch_size: d.batch_size,
            seq_len: d.seq_len,
            lr: d.lr,
            weight_decay: d.weight_decay,
            freeze_attention: d.freeze_attention,
            ablation_mode: d.ablation_mode,
            num_experts: d.num_experts,
            router_hidden: d.router.hidden,
            router_nonlinearity: d.router.nonlinearity,
            thetas: vec![0.7, 0.8, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Cap on evaluation windows; `null` uses the whole held-out split.
    pub max_windows: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: 8,
            seq_len: 64,
            max_windows: Some(256),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Text file to train on; `null` selects the built-in synthetic corpus.
    pub corpus: Option<PathBuf>,
    pub synthetic_chars: usize,
    pub heldout_fraction: f64,
    pub seed: u64,
    pub precision: DType,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub reorder: ReorderSection,
    pub adapt: AdaptSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            synthetic_chars: 1_000_000,
            heldout_fraction: 0.05,
            seed: 0,
            precision: DType::F32,
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            reorder: ReorderSection::default(),
            adapt: AdaptSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for (key, value) in overrides {
            set_path(&mut doc, key, value)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.embed_dim", self.model.embed_dim),
            ("model.hidden_dim", self.model.hidden_dim),
            ("model.num_layers", self.model.num_layers),
            ("model.num_heads", self.model.num_heads),
            ("model.max_seq_len", self.model.max_seq_len),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("adapt.batch_size", self.adapt.batch_size),
            ("adapt.num_experts", self.adapt.num_experts),
            ("adapt.router_hidden", self.adapt.router_hidden),
            ("eval.batch_size", self.eval.batch_size),
            ("reorder.calib_seq_len", self.reorder.calib_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        for (name, len) in [
            ("pretrain.seq_len", self.pretrain.seq_len),
            ("adapt.seq_len", self.adapt.seq_len),
            ("eval.seq_len", self.eval.seq_len),
            ("reorder.calib_seq_len", self.reorder.calib_seq_len),
        ] {
            if len < 2 || len > self.model.max_seq_len {
                return Err(Error::config(format!(
                    "{name} = {len} must lie in [2, model.max_seq_len = {}]",
                    self.model.max_seq_len
                )));
            }
        }
        if !self.model.embed_dim.is_multiple_of(self.model.num_heads) {
            return Err(Error::config(
                "model.embed_dim must be divisible by model.num_heads",
            ));
        }
        if self.adapt.num_experts > self.model.hidden_dim {
            return Err(Error::config(
                "adapt.num_experts must not exceed model.hidden_dim",
            ));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::config("heldout_fraction must lie in [0, 1)"));
        }
        if !(self.reorder.calib_fraction > 0.0 && self.reorder.calib_fraction <= 1.0) {
            return Err(Error::config("reorder.calib_fraction must lie in (0, 1]"));
        }
        if self.adapt.thetas.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::config("adapt.thetas must all lie in (0, 1)"));
        }
        if self.corpus.is_none() && self.synthetic_chars == 0 {
            return Err(Error::config(
                "synthetic_chars must be positive when no corpus is given",
            ));
        }
        self.adapt_config().validate().map_err(|e| match e {
            Error::Config(m) => Error::config(format!("adapt.{m}")),
            other => other,
        })
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            max_seq_len: m.max_seq_len,
            activation: m.activation,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            batch_size: p.batch_size,
            seq_len: p.seq_len,
            lr: p.lr,
            weight_decay: p.weight_decay,
            seed: self.seed,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        let a = &self.adapt;
        AdaptConfig {
            theta: a.theta,
            lambda_llm: a.lambda_llm,
            lambda_router: a.lambda_router,
            steps: a.steps,
            batch_size: a.batch_size,
            seq_len: a.seq_len,
            lr: a.lr,
            weight_decay: a.weight_decay,
            freeze_attention: a.freeze_attention,
            ablation_mode: a.ablation_mode,
            num_experts: a.num_experts,
            router: RouterConfig {
                hidden: a.router_hidden,
                nonlinearity: a.router_nonlinearity,
            },
            seed: self.seed,
        }
    }

    /// The configured corpus text: the file, or the synthetic generator.
    pub fn corpus_text(&self) -> Result<String> {
        match &self.corpus {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                if text.is_empty() {
                    return Err(Error::config(format!("{} is empty", p.display())));
                }
                Ok(text)
            }
            None => Ok(synthetic_text(self.seed, self.synthetic_chars)),
        }
    }

    /// Loads the corpus, encoding with `vocab` when one is given so token ids
    /// agree with an existing checkpoint.
    pub fn load_corpus(&self, vocab: Option<&Vocab>) -> Result<Corpus> {
        let text = self.corpus_text()?;
        match vocab {
            Some(v) => Corpus::with_vocab(&text, v.clone(), self.heldout_fraction),
            None => Corpus::from_text(&text, self.heldout_fraction),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses `a.b.c=value` into its key and value.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{s}` is not of the form key=value")))?;
    if k.is_empty() {
        return Err(Error::config(format!("override `{s}` has an empty key")));
    }
    Ok((k.to_string(), v.to_string()))
}

/// Sets a dotted path inside a JSON object. The value is read as JSON when
/// it parses, otherwise as a string.
fn set_path(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::config(format!(
                "`{key}`: {} is not a section",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}
