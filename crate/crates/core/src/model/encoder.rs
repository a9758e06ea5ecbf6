use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::pretrain_data::PretrainExample;
use crate::tensor::{Gradients, Real, Tape, Tensor, Var, IGNORE_INDEX};

/// Parameters recorded on a tape, addressable by name.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        BoundParams {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Records every tensor of `store` on `tape`. With `trainable == false` the
/// leaves are constants and receive no gradients.
pub fn bind<T: Real>(tape: &mut Tape<T>, store: &ParameterStore<T>, trainable: bool) -> Result<BoundParams> {
    let mut vars = IndexMap::with_capacity(store.len());
    for (name, t) in store.iter() {
        let v = if trainable {
            tape.param(t.clone())?
        } else {
            tape.constant(t.clone())?
        };
        vars.insert(name.to_string(), v);
    }
    Ok(BoundParams { vars })
}

pub fn gradients_by_name<T: Real>(grads: &Gradients<T>, params: &BoundParams) -> IndexMap<String, Tensor<T>> {
    params
        .iter()
        .filter_map(|(name, v)| grads.get(v).map(|g| (name.to_string(), g.clone())))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub input_ids: &'a [u32],
    pub segment_ids: &'a [u8],
    pub attention_mask: &'a [u8],
}

impl<'a> EncoderInput<'a> {
    pub fn new(input_ids: &'a [u32], segment_ids: &'a [u8], attention_mask: &'a [u8]) -> Self {
        EncoderInput {
            input_ids,
            segment_ids,
            attention_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = self.input_ids.len();
        if n == 0 {
            return Err(Error::invalid("empty input sequence"));
        }
        if self.segment_ids.len() != n || self.attention_mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "encoder input",
                lhs: vec![n],
                rhs: vec![self.segment_ids.len(), self.attention_mask.len()],
            });
        }
        if n > config.max_positions {
            return Err(Error::IndexOutOfRange {
                what: "sequence length",
                index: n,
                len: config.max_positions,
            });
        }
        if let Some(&id) = self.input_ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                index: id as usize,
                len: config.vocab_size,
            });
        }
        if let Some(&s) = self.segment_ids.iter().find(|&&s| s as usize >= config.type_vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "segment id",
                index: s as usize,
                len: config.type_vocab_size,
            });
        }
        if !self.attention_mask.contains(&1) {
            return Err(Error::invalid("attention mask has no visible position"));
        }
        Ok(())
    }

    /// Drops trailing masked-out positions.
    pub fn trimmed(&self) -> EncoderInput<'a> {
        let n = self.attention_mask.iter().rposition(|&m| m != 0).map_or(0, |p| p + 1);
        EncoderInput {
            input_ids: &self.input_ids[..n],
            segment_ids: &self.segment_ids[..n],
            attention_mask: &self.attention_mask[..n],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[len, H]`
    pub sequence: Var,
    /// `[1, H]`
    pub pooled: Var,
}

fn dense<T: Real>(tape: &mut Tape<T>, params: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn norm<T: Real>(tape: &mut Tape<T>, params: &BoundParams, x: Var, prefix: &str, eps: f32) -> Result<Var> {
    let g = params.get(&format!("{prefix}.gamma"))?;
    let b = params.get(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, eps as f64)
}

fn maybe_dropout<T: Real>(tape: &mut Tape<T>, x: Var, rate: f32, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => tape.dropout(x, rate as f64, r),
        _ => Ok(x),
    }
}

/// One application of the shared layer (post-norm residual wiring).
pub fn transformer_layer<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &ModelConfig,
    x: Var,
    key_mask: &[bool],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let q = dense(tape, params, x, "layer.attention.query")?;
    let k = dense(tape, params, x, "layer.attention.key")?;
    let v = dense(tape, params, x, "layer.attention.value")?;
    let ctx = tape.attention(q, k, v, key_mask, config.num_heads)?;
    let attn = dense(tape, params, ctx, "layer.attention.output")?;
    let attn = maybe_dropout(tape, attn, config.dropout, rng.as_deref_mut())?;
    let x = tape.add(x, attn)?;
    let x = norm(tape, params, x, "layer.attention.norm", config.layer_norm_eps)?;

    let h = dense(tape, params, x, "layer.ffn.input")?;
    let h = tape.gelu(h)?;
    let h = dense(tape, params, h, "layer.ffn.output")?;
    let h = maybe_dropout(tape, h, config.dropout, rng)?;
    let x = tape.add(x, h)?;
    norm(tape, params, x, "layer.ffn.norm", config.layer_norm_eps)
}

/// Embeddings, projection to H, the shared layer `num_layers` times and the
/// tanh pooler over the first position. Dropout is active only when an RNG
/// is supplied.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &ModelConfig,
    input: &EncoderInput,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Encoded> {
    input.validate(config)?;
    let n = input.len();
    let ids: Vec<usize> = input.input_ids.iter().map(|&t| t as usize).collect();
    let types: Vec<usize> = input.segment_ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..n).collect();
    let key_mask: Vec<bool> = input.attention_mask.iter().map(|&m| m != 0).collect();

    let word = tape.gather_rows(params.get("embeddings.word")?, &ids)?;
    let pos = tape.gather_rows(params.get("embeddings.position")?, &positions)?;
    let typ = tape.gather_rows(params.get("embeddings.token_type")?, &types)?;
    let emb = tape.add(word, pos)?;
    let emb = tape.add(emb, typ)?;
    let emb = norm(tape, params, emb, "embeddings.norm", config.layer_norm_eps)?;
    let emb = maybe_dropout(tape, emb, config.dropout, rng.as_deref_mut())?;
    let mut x = dense(tape, params, emb, "embeddings.projection")?;

    for _ in 0..config.num_layers {
        x = transformer_layer(tape, params, config, x, &key_mask, rng.as_deref_mut())?;
    }

    let cls = tape.gather_rows(x, &[0])?;
    let pooled = dense(tape, params, cls, "pooler")?;
    let pooled = tape.tanh(pooled)?;
    Ok(Encoded { sequence: x, pooled })
}

/// `[positions, V]` logits through the transform, GeLU, norm and the
/// transposed word embedding.
pub fn mlm_logits<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &ModelConfig,
    sequence: Var,
    positions: &[usize],
) -> Result<Var> {
    let picked = tape.gather_rows(sequence, positions)?;
    let h = dense(tape, params, picked, "mlm.transform")?;
    let h = tape.gelu(h)?;
    let h = norm(tape, params, h, "mlm.norm", config.layer_norm_eps)?;
    let word_t = tape.transpose(params.get("embeddings.word")?)?;
    let logits = tape.matmul(h, word_t)?;
    tape.add_bias(logits, params.get("mlm.output_bias")?)
}

/// `[1, 2]` sentence-order logits.
pub fn sop_logits<T: Real>(tape: &mut Tape<T>, params: &BoundParams, pooled: Var) -> Result<Var> {
    dense(tape, params, pooled, "sop")
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainLoss {
    pub total: Var,
    pub mlm: Var,
    pub sop: Var,
}

/// Mean MLM + SOP loss over `batch`; each example's MLM term is the mean
/// over its masked positions.
pub fn pretrain_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &ModelConfig,
    batch: &[PretrainExample],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<PretrainLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut mlm_sum: Option<Var> = None;
    let mut sop_sum: Option<Var> = None;
    for ex in batch {
        let input = EncoderInput::new(&ex.input_ids, &ex.segment_ids, &ex.attention_mask).trimmed();
        let enc = forward(tape, params, config, &input, rng.as_deref_mut())?;
        if ex.masked_positions.is_empty() {
            return Err(Error::invalid("example has no masked positions"));
        }
        let logits = mlm_logits(tape, params, config, enc.sequence, &ex.masked_positions)?;
        let targets: Vec<i64> = ex.mlm_labels.iter().map(|&t| t as i64).collect();
        let mlm = tape.cross_entropy(logits, &targets, IGNORE_INDEX)?;
        let sop_l = sop_logits(tape, params, enc.pooled)?;
        let sop = tape.cross_entropy(sop_l, &[ex.sop_label as i64], IGNORE_INDEX)?;
        mlm_sum = Some(match mlm_sum {
            Some(acc) => tape.add(acc, mlm)?,
            None => mlm,
        });
        sop_sum = Some(match sop_sum {
            Some(acc) => tape.add(acc, sop)?,
            None => sop,
        });
    }
    let inv = 1.0 / batch.len() as f64;
    let mlm = tape.scale(mlm_sum.expect("non-empty batch"), inv)?;
    let sop = tape.scale(sop_sum.expect("non-empty batch"), inv)?;
    let total = tape.add(mlm, sop)?;
    Ok(PretrainLoss { total, mlm, sop })
}

/// Inference on an immutable store: `([len, H] states, [H] pooled)`.
pub fn encode(
    store: &ParameterStore<f32>,
    config: &ModelConfig,
    input: &EncoderInput,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut tape = Tape::new();
    let params = bind(&mut tape, store, false)?;
    let out = forward(&mut tape, &params, config, input, None)?;
    let seq = tape.value(out.sequence).clone();
    let pooled = tape.value(out.pooled);
    let pooled = Tensor::new(vec![config.hidden_size], pooled.data().to_vec())?;
    Ok((seq, pooled))
}
