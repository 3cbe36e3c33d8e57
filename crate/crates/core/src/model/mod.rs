//! Model architectures whose linear sublayers can be swapped for masked
//! variants: a pre-LN GPT2-style transformer and a small token MLP.

mod checkpoint;
mod forward;
mod layout;

use std::collections::HashMap;
use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::tensor::{Param, Tensor, TensorError};

pub use checkpoint::{ModelManifest, TensorEntry};
pub use forward::{Bound, LinearHook, NoHook};
pub use layout::{HeadGroup, LayerInfo, ModelLayout};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    Token { token: usize, vocab: usize },
    #[error("sequence length {len} invalid (max {max})")]
    SeqLen { len: usize, max: usize },
    #[error("unknown weight `{0}`")]
    UnknownWeight(String),
    #[error("layer {layer} out of range for a {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Hierarchical name of a maskable linear sublayer, e.g. `layer1.mlp.fc1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(String);

impl LayerId {
    pub fn new(path: impl Into<String>) -> Self {
        Self(path.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Transformer block index for `layer{n}.…` ids.
    pub fn block(&self) -> Option<usize> {
        self.0
            .strip_prefix("layer")
            .and_then(|rest| rest.split('.').next())
            .and_then(|n| n.parse().ok())
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.0)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.0)
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LayerId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub causal: bool,
    pub activation: Activation,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            vocab_size: 15,
            max_seq_len: 5,
            causal: true,
            activation: Activation::Gelu,
        }
    }
}

impl TransformerConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Token MLP: embeddings of every position are concatenated and fed through
/// ReLU hidden layers to a vocabulary-sized output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_embed: usize,
    pub hidden: Vec<usize>,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.seq_len == 0 || self.d_embed == 0 {
            return Err(ModelError::InvalidConfig(
                "vocab_size, seq_len and d_embed must be at least 1".into(),
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(ModelError::InvalidConfig("hidden widths must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Mlp(MlpConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Transformer(c) => c.validate(),
            ModelConfig::Mlp(c) => c.validate(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.vocab_size,
            ModelConfig::Mlp(c) => c.vocab_size,
        }
    }

    /// Width of the representation read by the unembedding / probe head.
    pub fn feature_width(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.d_model,
            ModelConfig::Mlp(c) => *c.hidden.last().unwrap_or(&(c.d_embed * c.seq_len)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Gaussian,
    Zeros,
    Ones,
}

/// Ordered weight names, shapes and initializers for a config.
fn weight_plan(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut plan = Vec::new();
    let linear = |plan: &mut Vec<_>, id: &str, out: usize, inp: usize| {
        plan.push((format!("{id}.weight"), vec![out, inp], Init::Gaussian));
        plan.push((format!("{id}.bias"), vec![out], Init::Zeros));
    };
    match config {
        ModelConfig::Transformer(c) => {
            let d = c.d_model;
            plan.push(("embed.tok".into(), vec![c.vocab_size, d], Init::Gaussian));
            plan.push(("embed.pos".into(), vec![c.max_seq_len, d], Init::Gaussian));
            for l in 0..c.n_layers {
                plan.push((format!("layer{l}.ln1.gain"), vec![d], Init::Ones));
                plan.push((format!("layer{l}.ln1.bias"), vec![d], Init::Zeros));
                for p in ["q", "k", "v", "o"] {
                    linear(&mut plan, &format!("layer{l}.attn.{p}"), d, d);
                }
                plan.push((format!("layer{l}.ln2.gain"), vec![d], Init::Ones));
                plan.push((format!("layer{l}.ln2.bias"), vec![d], Init::Zeros));
                linear(&mut plan, &format!("layer{l}.mlp.fc1"), c.d_mlp, d);
                linear(&mut plan, &format!("layer{l}.mlp.fc2"), d, c.d_mlp);
            }
            plan.push(("ln_f.gain".into(), vec![d], Init::Ones));
            plan.push(("ln_f.bias".into(), vec![d], Init::Zeros));
            plan.push(("unembed.weight".into(), vec![c.vocab_size, d], Init::Gaussian));
        }
        ModelConfig::Mlp(c) => {
            plan.push(("embed.tok".into(), vec![c.vocab_size, c.d_embed], Init::Gaussian));
            let mut width = c.d_embed * c.seq_len;
            for (i, &h) in c.hidden.iter().enumerate() {
                linear(&mut plan, &format!("mlp.fc{i}"), h, width);
                width = h;
            }
            linear(&mut plan, "mlp.out", c.vocab_size, width);
        }
    }
    plan
}

/// Maskable linear sublayers in forward order.
fn maskable_ids(config: &ModelConfig) -> Vec<LayerId> {
    match config {
        ModelConfig::Transformer(c) => (0..c.n_layers)
            .flat_map(|l| {
                ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"]
                    .into_iter()
                    .map(move |s| LayerId::new(format!("layer{l}.{s}")))
            })
            .collect(),
        ModelConfig::Mlp(c) => (0..c.hidden.len())
            .map(|i| LayerId::new(format!("mlp.fc{i}")))
            .chain(std::iter::once(LayerId::new("mlp.out")))
            .collect(),
    }
}

/// Weights plus architecture. Frozen models expose no gradients for their
/// base weights.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    weights: Vec<Tensor>,
    index: HashMap<String, usize>,
    maskable: Vec<LayerId>,
    frozen: bool,
}

impl Model {
    /// Seeded Gaussian (std [`INIT_STD`]) init for matrices and embeddings;
    /// zero biases and unit layer-norm gains.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(seed, "model-init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut weights = Vec::new();
        for (name, shape, init) in weight_plan(&config) {
            let t = match init {
                Init::Gaussian => Tensor::from_fn(shape, |_| normal.sample(&mut rng)),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
            };
            names.push(name);
            weights.push(t);
        }
        Ok(Self::assemble(config, names, weights))
    }

    pub fn build_transformer(config: TransformerConfig, seed: u64) -> Result<Self> {
        Self::build(ModelConfig::Transformer(config), seed)
    }

    fn assemble(config: ModelConfig, names: Vec<String>, weights: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let maskable = maskable_ids(&config);
        Self {
            config,
            names,
            weights,
            index,
            maskable,
            frozen: false,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn transformer_config(&self) -> Option<&TransformerConfig> {
        match &self.config {
            ModelConfig::Transformer(c) => Some(c),
            ModelConfig::Mlp(_) => None,
        }
    }

    pub fn weight_names(&self) -> &[String] {
        &self.names
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.weights[i])
            .ok_or_else(|| ModelError::UnknownWeight(name.to_string()))
    }

    pub fn set_weight(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| ModelError::UnknownWeight(name.to_string()))?;
        if value.shape() != self.weights[i].shape() {
            return Err(TensorError::Shape {
                op: "set_weight",
                lhs: self.weights[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            }
            .into());
        }
        self.weights[i] = value;
        Ok(())
    }

    pub fn maskable_layers(&self) -> &[LayerId] {
        &self.maskable
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// All weights as named trainable parameters, in storage order.
    pub fn params(&self) -> Vec<Param> {
        self.names
            .iter()
            .zip(&self.weights)
            .map(|(n, w)| Param::new(n.clone(), w.clone()))
            .collect()
    }

    /// Writes back parameter values produced by an optimizer.
    pub fn assign_params(&mut self, params: &[Param]) -> Result<()> {
        for p in params {
            self.set_weight(&p.name, p.value.clone())?;
        }
        Ok(())
    }

    /// True if every weight is bitwise identical to `other`'s.
    pub fn weights_bit_eq(&self, other: &Model) -> bool {
        self.names == other.names && self.weights.iter().zip(&other.weights).all(|(a, b)| a.bit_eq(b))
    }

    /// Largest absolute difference between corresponding weights.
    pub fn max_weight_diff(&self, other: &Model) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout::new(self)
    }

    /// Head `h` owns rows `h·d_head .. (h+1)·d_head` of the q/k/v weights
    /// (their output features) and the same columns of the o weight (its
    /// input features).
    pub fn attention_head_slices(&self, layer: usize) -> Result<Vec<std::ops::Range<usize>>> {
        let c = self
            .transformer_config()
            .ok_or_else(|| ModelError::InvalidConfig("attention heads exist only in transformers".into()))?;
        if layer >= c.n_layers {
            return Err(ModelError::LayerOutOfRange {
                layer,
                n_layers: c.n_layers,
            });
        }
        let dh = c.d_head();
        Ok((0..c.n_heads).map(|h| h * dh..(h + 1) * dh).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_transformer_has_twelve_maskable_linears() {
        let m = Model::build_transformer(TransformerConfig::default(), 0).unwrap();
        let ids: Vec<&str> = m.maskable_layers().iter().map(LayerId::as_str).collect();
        assert_eq!(ids.len(), 12);
        assert_eq!(ids[0], "layer0.attn.q");
        assert_eq!(ids[11], "layer1.mlp.fc2");
        assert!(!ids.iter().any(|id| id.contains("embed") || id.contains("ln")));
        for id in m.maskable_layers() {
            assert!(m.weight(&id.weight_name()).is_ok());
            assert!(m.weight(&id.bias_name()).is_ok());
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build_transformer(TransformerConfig::default(), 9).unwrap();
        let b = Model::build_transformer(TransformerConfig::default(), 9).unwrap();
        let c = Model::build_transformer(TransformerConfig::default(), 10).unwrap();
        assert!(a.weights_bit_eq(&b));
        assert!(!a.weights_bit_eq(&c));
    }

    #[test]
    fn init_statistics() {
        let m = Model::build_transformer(TransformerConfig::default(), 1).unwrap();
        let w = m.weight("layer0.mlp.fc1.weight").unwrap();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3);
        assert!((std - INIT_STD).abs() < 1e-3, "{std}");
        assert!(m
            .weight("layer0.mlp.fc1.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(m.weight("ln_f.gain").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = TransformerConfig {
            d_model: 10,
            n_heads: 4,
            ..TransformerConfig::default()
        };
        assert!(matches!(
            Model::build_transformer(cfg, 0),
            Err(ModelError::InvalidConfig(_))
        ));
        let cfg = TransformerConfig {
            n_layers: 0,
            ..TransformerConfig::default()
        };
        assert!(Model::build_transformer(cfg, 0).is_err());
    }

    #[test]
    fn head_slices_partition_columns() {
        let m = Model::build_transformer(TransformerConfig::default(), 0).unwrap();
        let slices = m.attention_head_slices(0).unwrap();
        assert_eq!(slices[1], 16..32);
        let mut covered = vec![0u8; 64];
        for r in &slices {
            for i in r.clone() {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        assert!(matches!(
            m.attention_head_slices(2),
            Err(ModelError::LayerOutOfRange { layer: 2, n_layers: 2 })
        ));
    }

    #[test]
    fn layer_id_block() {
        assert_eq!(LayerId::from("layer1.mlp.fc1").block(), Some(1));
        assert_eq!(LayerId::from("mlp.fc0").block(), None);
    }

    #[test]
    fn set_weight_checks_shape() {
        let mut m = Model::build_transformer(TransformerConfig::default(), 0).unwrap();
        assert!(m.set_weight("ln_f.gain", Tensor::zeros([3])).is_err());
        assert!(m.set_weight("nope", Tensor::zeros([3])).is_err());
        m.set_weight("ln_f.gain", Tensor::zeros([64])).unwrap();
    }
}
