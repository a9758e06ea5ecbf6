use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::heads::{attach_head, encode_example, head_logits, task_loss, EncodedExample, Target};
use super::qa::predict_spans;
use super::{decode_bio, Dataset, Span, TaskConfig, TaskExample, TaskFamily};
use crate::error::{Error, Result};
use crate::model::{bind, gradients_by_name, ModelConfig, ParameterStore};
use crate::optim::{adamw_step, lr_at, OptState, OptimizerConfig};
use crate::pretrain::batch_indices;
use crate::pretrain_data::derive_seed;
use crate::tensor::{argmax, Tape};
use crate::tokenizer::Vocab;

/// Family-specific prediction or gold value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredictionPayload {
    Spans(Vec<Span>),
    Mask(Vec<u8>),
    Answers(Vec<String>),
    Class(String),
    Score(f64),
}

impl PredictionPayload {
    pub fn spans(&self) -> Result<&[Span]> {
        match self {
            PredictionPayload::Spans(s) => Ok(s),
            PredictionPayload::Mask(m) if m.is_empty() => Ok(&[]),
            PredictionPayload::Answers(a) if a.is_empty() => Ok(&[]),
            _ => Err(Error::invalid("expected a span list")),
        }
    }

    pub fn mask(&self) -> Result<Vec<bool>> {
        match self {
            PredictionPayload::Mask(m) => m
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(Error::invalid("label mask entries must be 0 or 1")),
                })
                .collect(),
            _ => Err(Error::invalid("expected a 0/1 label mask")),
        }
    }

    pub fn answers(&self) -> Result<&[String]> {
        match self {
            PredictionPayload::Answers(a) => Ok(a),
            PredictionPayload::Spans(s) if s.is_empty() => Ok(&[]),
            _ => Err(Error::invalid("expected a list of answer strings")),
        }
    }

    pub fn class(&self) -> Result<&str> {
        match self {
            PredictionPayload::Class(c) => Ok(c),
            _ => Err(Error::invalid("expected a class label")),
        }
    }

    pub fn score(&self) -> Result<f64> {
        match self {
            PredictionPayload::Score(s) => Ok(*s),
            _ => Err(Error::invalid("expected a numeric score")),
        }
    }
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub family: TaskFamily,
    pub prediction: PredictionPayload,
    pub gold: PredictionPayload,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ParameterStore<f32>,
    pub state: OptState<f32>,
    /// (step, mean batch loss) for every step.
    pub losses: Vec<(u64, f64)>,
}

fn encode_all(dataset: &Dataset, vocab: &Vocab, task: &TaskConfig, with_target: bool) -> Result<Vec<EncodedExample>> {
    dataset
        .examples
        .iter()
        .map(|ex| encode_example(ex, vocab, task, with_target))
        .collect()
}

/// AdamW fine-tuning with the warmup/decay schedule. A head is attached when
/// `params` lacks one; `on_checkpoint` runs every `checkpoint_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    mut params: ParameterStore<f32>,
    model: &ModelConfig,
    vocab: &Vocab,
    train: &Dataset,
    task: &TaskConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(u64, &ParameterStore<f32>, &OptState<f32>) -> Result<()>,
) -> Result<FinetuneOutcome> {
    task.validate(model.max_positions)?;
    if train.family != task.family {
        return Err(Error::invalid(format!(
            "dataset is {} but the task is {}",
            train.family, task.family
        )));
    }
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if vocab.size() != model.vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary has {} pieces but the model expects {}",
            vocab.size(),
            model.vocab_size
        )));
    }
    params.check_against(model)?;
    attach_head(&mut params, task, model, derive_seed(seed, &[u64::MAX]))?;

    let examples: Vec<EncodedExample> = encode_all(train, vocab, task, true)?
        .into_iter()
        .filter(|e| e.target != Target::None)
        .collect();
    if examples.is_empty() {
        return Err(Error::invalid("no training example has a usable target"));
    }

    let mut state = OptState::new(OptimizerConfig {
        weight_decay: task.weight_decay,
        ..OptimizerConfig::default()
    });
    let mut losses = Vec::with_capacity(task.total_steps as usize);
    for step in 1..=task.total_steps {
        let lr = lr_at(step, task.peak_lr, task.warmup_steps, task.total_steps)?;
        let batch: Vec<EncodedExample> = batch_indices(seed, step, examples.len(), task.batch_size)
            .into_iter()
            .map(|i| examples[i].clone())
            .collect();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[step, u64::MAX - 1]));
        let rng = (model.dropout > 0.0).then_some(&mut rng);
        let loss = task_loss(&mut tape, &bound, model, task.family, &batch, rng)?;
        losses.push((step, f64::from(tape.value(loss).item()?)));
        let grads = tape.backward(loss)?;
        adamw_step(&mut params, &gradients_by_name(&grads, &bound), &mut state, lr)?;
        if task.checkpoint_every > 0 && step % task.checkpoint_every == 0 {
            on_checkpoint(step, &params, &state)?;
        }
    }
    Ok(FinetuneOutcome { params, state, losses })
}

fn gold_payload(ex: &TaskExample) -> PredictionPayload {
    match ex {
        TaskExample::Tagged { tags, .. } => PredictionPayload::Spans(decode_bio(tags)),
        TaskExample::Class { label, .. } => PredictionPayload::Class(label.clone()),
        TaskExample::MultiLabel { labels, .. } => PredictionPayload::Mask(labels.iter().map(|&b| b as u8).collect()),
        TaskExample::Score { score, .. } => PredictionPayload::Score(*score),
        TaskExample::Qa { answers, .. } => PredictionPayload::Answers(answers.clone()),
    }
}

fn predict_one(
    store: &ParameterStore<f32>,
    model: &ModelConfig,
    task: &TaskConfig,
    ex: &TaskExample,
    enc: &EncodedExample,
) -> Result<Prediction> {
    let mut tape = Tape::<f32>::new();
    let bound = bind(&mut tape, store, false)?;
    let logits = head_logits(&mut tape, &bound, model, task.family, enc, None)?;
    let out = tape.value(logits);
    let prediction = match task.family {
        TaskFamily::Ner => {
            let n_words = match ex {
                TaskExample::Tagged { tokens, .. } => tokens.len(),
                _ => enc.words.len(),
            };
            let mut tags = vec!["O".to_string(); n_words];
            for (w, &pos) in enc.word_starts.iter().enumerate() {
                tags[w] = task.labels[argmax(out.row(pos))].clone();
            }
            PredictionPayload::Spans(decode_bio(&tags))
        }
        TaskFamily::Re | TaskFamily::Nli => PredictionPayload::Class(task.labels[argmax(out.row(0))].clone()),
        TaskFamily::MultiLabel => PredictionPayload::Mask(out.row(0).iter().map(|&z| (z > 0.0) as u8).collect()),
        TaskFamily::Sts => PredictionPayload::Score(f64::from(out.row(0)[0])),
        TaskFamily::Qa => {
            let start: Vec<f64> = enc.word_starts.iter().map(|&p| f64::from(out.row(p)[0])).collect();
            let end: Vec<f64> = enc.word_starts.iter().map(|&p| f64::from(out.row(p)[1])).collect();
            PredictionPayload::Answers(predict_spans(
                &start,
                &end,
                &enc.words,
                task.qa_top_k,
                task.max_answer_len,
            )?)
        }
    };
    Ok(Prediction {
        id: enc.id.clone(),
        family: task.family,
        prediction,
        gold: gold_payload(ex),
    })
}

/// Predictions for every example, in dataset order.
pub fn predict(
    store: &ParameterStore<f32>,
    model: &ModelConfig,
    vocab: &Vocab,
    task: &TaskConfig,
    dataset: &Dataset,
) -> Result<Vec<Prediction>> {
    if dataset.family != task.family {
        return Err(Error::invalid(format!(
            "dataset is {} but the task is {}",
            dataset.family, task.family
        )));
    }
    store.get(super::heads::HEAD_WEIGHT)?;
    let encoded = encode_all(dataset, vocab, task, false)?;
    dataset
        .examples
        .par_iter()
        .zip(encoded.par_iter())
        .map(|(ex, enc)| predict_one(store, model, task, ex, enc))
        .collect()
}
