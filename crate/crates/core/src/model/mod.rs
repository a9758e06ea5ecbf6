//! ALBERT encoder with factorized embeddings and one transformer layer
//! shared across depth.

mod checkpoint;
mod encoder;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, FORMAT_VERSION};
pub use encoder::{
    bind, encode, forward, gradients_by_name, mlm_logits, pretrain_loss, sop_logits, transformer_layer, BoundParams,
    Encoded, EncoderInput, PretrainLoss,
};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub dropout: f32,
    pub layer_norm_eps: f32,
}

impl ModelConfig {
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embedding_size: 128,
            hidden_size: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_size: 3072,
            max_positions: 512,
            type_vocab_size: 2,
            dropout: 0.0,
            layer_norm_eps: 1e-12,
        }
    }

    /// Same as [`base`](Self::base) with a 256-wide embedding.
    pub fn large(vocab_size: usize) -> Self {
        ModelConfig {
            embedding_size: 256,
            ..Self::base(vocab_size)
        }
    }

    /// Tiny model used for gradient checks and smoke training.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embedding_size: 8,
            hidden_size: 16,
            num_layers: 2,
            num_heads: 2,
            ffn_size: 32,
            max_positions: 64,
            type_vocab_size: 2,
            dropout: 0.0,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embedding_size", self.embedding_size),
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("max_positions", self.max_positions),
            ("type_vocab_size", self.type_vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
            if v > u32::MAX as usize {
                return Err(Error::invalid(format!("{name} too large")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.embedding_size > self.hidden_size {
            return Err(Error::invalid("embedding_size must not exceed hidden_size"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(Error::invalid("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    /// Every pretraining parameter as (name, shape), in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, e, h, f) = (self.vocab_size, self.embedding_size, self.hidden_size, self.ffn_size);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>| out.push((name.to_string(), shape));
        push("embeddings.word", vec![v, e]);
        push("embeddings.position", vec![self.max_positions, e]);
        push("embeddings.token_type", vec![self.type_vocab_size, e]);
        push("embeddings.norm.gamma", vec![e]);
        push("embeddings.norm.beta", vec![e]);
        push("embeddings.projection.weight", vec![e, h]);
        push("embeddings.projection.bias", vec![h]);
        for proj in ["query", "key", "value", "output"] {
            push(&format!("layer.attention.{proj}.weight"), vec![h, h]);
            push(&format!("layer.attention.{proj}.bias"), vec![h]);
        }
        push("layer.attention.norm.gamma", vec![h]);
        push("layer.attention.norm.beta", vec![h]);
        push("layer.ffn.input.weight", vec![h, f]);
        push("layer.ffn.input.bias", vec![f]);
        push("layer.ffn.output.weight", vec![f, h]);
        push("layer.ffn.output.bias", vec![h]);
        push("layer.ffn.norm.gamma", vec![h]);
        push("layer.ffn.norm.beta", vec![h]);
        push("pooler.weight", vec![h, h]);
        push("pooler.bias", vec![h]);
        push("mlm.transform.weight", vec![h, e]);
        push("mlm.transform.bias", vec![e]);
        push("mlm.norm.gamma", vec![e]);
        push("mlm.norm.beta", vec![e]);
        push("mlm.output_bias", vec![v]);
        push("sop.weight", vec![h, 2]);
        push("sop.bias", vec![2]);
        out
    }
}

/// Exact number of scalars in a pretraining [`ParameterStore`]. Does not
/// depend on `num_layers`.
pub fn count_parameters(config: &ModelConfig) -> u64 {
    config
        .parameter_shapes()
        .iter()
        .map(|(_, s)| s.iter().map(|&d| d as u64).product::<u64>())
        .sum()
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that every pretraining tensor exists with the configured shape.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        for (name, shape) in config.parameter_shapes() {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter store",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
        }
        Ok(())
    }
}

/// Normal(0, std) samples redrawn until they fall within two deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

fn is_gain(name: &str) -> bool {
    name.ends_with(".gamma")
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with("output_bias")
}

/// Fresh weights: truncated normal for matrices, zero biases, unit gains.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParameterStore<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for (name, shape) in config.parameter_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if is_gain(&name) {
            vec![1.0; n]
        } else if is_bias(&name) {
            vec![0.0; n]
        } else {
            truncated_normal(&mut rng, n, INIT_STD)
                .into_iter()
                .map(|x| x as f32)
                .collect()
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}
