//! MLM + SOP pretraining loop with LAMB and the warmup/decay schedule.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{bind, gradients_by_name, pretrain_loss, ModelConfig, ParameterStore};
use crate::optim::{lamb_step, lr_at, OptState};
use crate::pretrain_data::{derive_seed, PretrainExample};
use crate::tensor::Tape;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            total_steps: 200_000,
            batch_size: 1024,
            peak_lr: 0.00176,
            warmup_steps: 3125,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub mlm_loss: f64,
    pub sop_loss: f64,
}

pub const LOG_HEADER: &str = "step,lr,mlm_loss,sop_loss";

pub fn write_log_row<W: Write>(mut w: W, row: &StepLog) -> std::io::Result<()> {
    writeln!(w, "{},{:e},{},{}", row.step, row.lr, row.mlm_loss, row.sop_loss)
}

/// Batch indices for a step: a seeded draw without replacement.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[step]));
    let mut idx = sample(&mut rng, n, batch_size.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// One optimizer step on `batch`. Returns (mlm, sop) losses before the
/// update.
pub fn train_step(
    store: &mut ParameterStore<f32>,
    state: &mut OptState<f32>,
    model: &ModelConfig,
    batch: &[PretrainExample],
    lr: f64,
    dropout_seed: u64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let params = bind(&mut tape, store, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let rng = (model.dropout > 0.0).then_some(&mut rng);
    let loss = pretrain_loss(&mut tape, &params, model, batch, rng)?;
    let mlm = tape.value(loss.mlm).item()?.into();
    let sop = tape.value(loss.sop).item()?.into();
    let grads = tape.backward(loss.total)?;
    let grads = gradients_by_name(&grads, &params);
    lamb_step(store, &grads, state, lr)?;
    Ok((mlm, sop))
}

/// Runs from `state.step` up to `config.total_steps`, calling `on_step`
/// after every update.
pub fn pretrain(
    store: &mut ParameterStore<f32>,
    state: &mut OptState<f32>,
    model: &ModelConfig,
    examples: &[PretrainExample],
    config: &PretrainConfig,
    mut on_step: impl FnMut(&StepLog, &ParameterStore<f32>, &OptState<f32>) -> Result<()>,
) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::invalid("no pretraining examples"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    store.check_against(model)?;
    while state.step < config.total_steps {
        let step = state.step + 1;
        let lr = lr_at(step, config.peak_lr, config.warmup_steps, config.total_steps)?;
        let batch: Vec<PretrainExample> = batch_indices(config.seed, step, examples.len(), config.batch_size)
            .into_iter()
            .map(|i| examples[i].clone())
            .collect();
        let dropout_seed = derive_seed(config.seed, &[step, u64::MAX]);
        let (mlm_loss, sop_loss) = train_step(store, state, model, &batch, lr, dropout_seed)?;
        on_step(
            &StepLog {
                step,
                lr,
                mlm_loss,
                sop_loss,
            },
            store,
            state,
        )?;
    }
    Ok(())
}
