use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TaskConfig, TaskExample, TaskFamily};
use crate::error::{Error, Result};
use crate::model::{forward, truncated_normal, BoundParams, EncoderInput, ModelConfig, ParameterStore, INIT_STD};
use crate::tensor::{Real, Tape, Tensor, Var, IGNORE_INDEX};
use crate::tokenizer::{normalize, Vocab, CLS_ID, SEP_ID};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Per-token tag ids, ignore index off the first piece of each word.
    Tags(Vec<i64>),
    Class(usize),
    Multi(Vec<f64>),
    Score(f64),
    /// Token positions of the answer's first and last word.
    Span {
        start: usize,
        end: usize,
    },
    None,
}

/// Model-ready view of one task example.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub input_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub target: Target,
    /// Token position of the first piece of every kept word (NER tokens or
    /// QA passage words).
    pub word_starts: Vec<usize>,
    pub words: Vec<String>,
}

pub fn head_shapes(task: &TaskConfig, hidden_size: usize) -> Vec<(String, Vec<usize>)> {
    let n = task.num_outputs();
    vec![
        (HEAD_WEIGHT.to_string(), vec![hidden_size, n]),
        (HEAD_BIAS.to_string(), vec![n]),
    ]
}

/// Adds a freshly initialised head unless one of the right shape exists.
pub fn attach_head(store: &mut ParameterStore<f32>, task: &TaskConfig, model: &ModelConfig, seed: u64) -> Result<()> {
    let shapes = head_shapes(task, model.hidden_size);
    let present = shapes
        .iter()
        .all(|(n, s)| store.get(n).is_ok_and(|t| t.shape() == s.as_slice()));
    if present {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name == HEAD_BIAS {
            vec![0.0; n]
        } else {
            truncated_normal(&mut rng, n, INIT_STD)
                .into_iter()
                .map(|x| x as f32)
                .collect()
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(())
}

fn pieces(vocab: &Vocab, text: &str, lower: bool) -> Vec<u32> {
    vocab.encode(&normalize(text, lower))
}

/// Drops tail pieces from the longer side until both fit in `budget`.
fn truncate_pair(a: &mut Vec<u32>, b: &mut Vec<u32>, budget: usize) {
    while a.len() + b.len() > budget {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
}

fn layout(a: &[u32], b: Option<&[u32]>) -> (Vec<u32>, Vec<u8>) {
    let mut ids = vec![CLS_ID];
    ids.extend_from_slice(a);
    ids.push(SEP_ID);
    let mut seg = vec![0u8; ids.len()];
    if let Some(b) = b {
        ids.extend_from_slice(b);
        ids.push(SEP_ID);
        seg.resize(ids.len(), 1);
    }
    (ids, seg)
}

fn word_pieces(vocab: &Vocab, words: &[String], lower: bool) -> Result<Vec<Vec<u32>>> {
    words
        .iter()
        .map(|w| {
            let p = vocab.encode_word(&normalize(w, lower));
            if p.is_empty() {
                Err(Error::invalid(format!("word {w:?} produced no subword pieces")))
            } else {
                Ok(p)
            }
        })
        .collect()
}

/// Tokenizes one example. Targets are resolved against the task's label set
/// only when `with_target` is set.
pub fn encode_example(ex: &TaskExample, vocab: &Vocab, task: &TaskConfig, with_target: bool) -> Result<EncodedExample> {
    let lower = task.lower_case;
    let max = task.max_seq_len;
    let label_id = |label: &str| {
        task.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::invalid(format!("label {label:?} is not in the label set")))
    };
    let mut out = EncodedExample {
        id: ex.id().to_string(),
        input_ids: Vec::new(),
        segment_ids: Vec::new(),
        target: Target::None,
        word_starts: Vec::new(),
        words: Vec::new(),
    };
    match ex {
        TaskExample::Tagged { tokens, tags, .. } => {
            let word_p = word_pieces(vocab, tokens, lower)?;
            let mut ids = vec![CLS_ID];
            let mut labels = vec![IGNORE_INDEX];
            for ((w, p), tag) in tokens.iter().zip(&word_p).zip(tags) {
                if ids.len() + p.len() + 1 > max {
                    break;
                }
                out.word_starts.push(ids.len());
                out.words.push(w.clone());
                ids.extend_from_slice(p);
                if with_target {
                    labels.push(label_id(tag)? as i64);
                    labels.extend(std::iter::repeat_n(IGNORE_INDEX, p.len() - 1));
                }
            }
            ids.push(SEP_ID);
            labels.push(IGNORE_INDEX);
            if out.words.is_empty() {
                return Err(Error::invalid(format!(
                    "example {:?}: first word exceeds max_seq_len",
                    ex.id()
                )));
            }
            out.segment_ids = vec![0; ids.len()];
            out.input_ids = ids;
            if with_target {
                out.target = Target::Tags(labels);
            }
        }
        TaskExample::Class { text, text2, label, .. } => {
            let mut a = pieces(vocab, text, lower);
            let (ids, seg) = match text2 {
                Some(t2) => {
                    let mut b = pieces(vocab, t2, lower);
                    truncate_pair(&mut a, &mut b, max - 3);
                    layout(&a, Some(&b))
                }
                None => {
                    a.truncate(max - 2);
                    layout(&a, None)
                }
            };
            out.input_ids = ids;
            out.segment_ids = seg;
            if with_target {
                out.target = Target::Class(label_id(label)?);
            }
        }
        TaskExample::MultiLabel { text, labels, .. } => {
            let mut a = pieces(vocab, text, lower);
            a.truncate(max - 2);
            (out.input_ids, out.segment_ids) = layout(&a, None);
            if with_target {
                if labels.len() != task.labels.len() {
                    return Err(Error::invalid(format!("example {:?}: wrong label-mask width", ex.id())));
                }
                out.target = Target::Multi(labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
            }
        }
        TaskExample::Score { text, text2, score, .. } => {
            let mut a = pieces(vocab, text, lower);
            let mut b = pieces(vocab, text2, lower);
            truncate_pair(&mut a, &mut b, max - 3);
            (out.input_ids, out.segment_ids) = layout(&a, Some(&b));
            if with_target {
                out.target = Target::Score(*score);
            }
        }
        TaskExample::Qa {
            question,
            passage,
            spans,
            ..
        } => {
            let mut q = pieces(vocab, question, lower);
            q.truncate((max - 3) / 2);
            let (mut ids, mut seg) = layout(&q, None);
            let words: Vec<String> = passage.split_whitespace().map(str::to_string).collect();
            let word_p = word_pieces(vocab, &words, lower)?;
            for (w, p) in words.iter().zip(&word_p) {
                if ids.len() + p.len() + 1 > max {
                    break;
                }
                out.word_starts.push(ids.len());
                out.words.push(w.clone());
                ids.extend_from_slice(p);
            }
            if out.words.is_empty() {
                return Err(Error::invalid(format!("example {:?}: no passage words fit", ex.id())));
            }
            ids.push(SEP_ID);
            seg.resize(ids.len(), 1);
            out.input_ids = ids;
            out.segment_ids = seg;
            if with_target {
                let kept = out.words.len();
                if let Some(&(s, e)) = spans.iter().find(|&&(_, e)| e <= kept) {
                    out.target = Target::Span {
                        start: out.word_starts[s],
                        end: out.word_starts[e - 1],
                    };
                }
            }
        }
    }
    Ok(out)
}

/// Raw head outputs: `[len, tags]` for NER, `[len, 2]` start/end logits for
/// QA, `[1, outputs]` from the pooled state otherwise.
pub fn head_logits<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    model: &ModelConfig,
    family: TaskFamily,
    ex: &EncodedExample,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mask = vec![1u8; ex.input_ids.len()];
    let enc = forward(
        tape,
        params,
        model,
        &EncoderInput::new(&ex.input_ids, &ex.segment_ids, &mask),
        rng,
    )?;
    let from = match family {
        TaskFamily::Ner | TaskFamily::Qa => enc.sequence,
        _ => enc.pooled,
    };
    let y = tape.matmul(from, params.get(HEAD_WEIGHT)?)?;
    tape.add_bias(y, params.get(HEAD_BIAS)?)
}

fn example_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    model: &ModelConfig,
    family: TaskFamily,
    ex: &EncodedExample,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let logits = head_logits(tape, params, model, family, ex, rng)?;
    match (&ex.target, family) {
        (Target::Tags(tags), TaskFamily::Ner) => tape.cross_entropy(logits, tags, IGNORE_INDEX),
        (Target::Class(c), TaskFamily::Re | TaskFamily::Nli) => tape.cross_entropy(logits, &[*c as i64], IGNORE_INDEX),
        (Target::Multi(m), TaskFamily::MultiLabel) => {
            let m: Vec<T> = m.iter().map(|&x| T::lit(x)).collect();
            tape.bce_with_logits(logits, &m)
        }
        (Target::Score(s), TaskFamily::Sts) => tape.mse(logits, &[T::lit(*s)]),
        (Target::Span { start, end }, TaskFamily::Qa) => {
            let cols = tape.transpose(logits)?;
            let s = tape.gather_rows(cols, &[0])?;
            let e = tape.gather_rows(cols, &[1])?;
            let ls = tape.cross_entropy(s, &[*start as i64], IGNORE_INDEX)?;
            let le = tape.cross_entropy(e, &[*end as i64], IGNORE_INDEX)?;
            let both = tape.add(ls, le)?;
            tape.scale(both, 0.5)
        }
        _ => Err(Error::invalid(format!("example {:?} has no {family} target", ex.id))),
    }
}

/// Mean task loss over `batch`.
pub fn task_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    model: &ModelConfig,
    family: TaskFamily,
    batch: &[EncodedExample],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ex in batch {
        let l = example_loss(tape, params, model, family, ex, rng.as_deref_mut())?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    tape.scale(total, 1.0 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bind, init_model};
    use crate::tasks::{bio_tag_set, HOC_LABELS, NLI_LABELS};
    use crate::tensor::gradcheck::{check_gradients, DEFAULT_STEP};

    fn vocab() -> Vocab {
        let mut pieces: Vec<(String, f64)> = Vec::new();
        for w in [
            "\u{2581}the",
            "\u{2581}drug",
            "\u{2581}binds",
            "\u{2581}il",
            "immuno",
            "histo",
            "chemistry",
        ] {
            pieces.push((w.to_string(), -2.0));
        }
        for c in "\u{2581}abcdefghijklmnopqrstuvwxyz-6.?".chars() {
            pieces.push((c.to_string(), -6.0));
        }
        Vocab::from_pieces(pieces).unwrap()
    }

    fn tagged(tokens: &[&str], tags: &[&str]) -> TaskExample {
        TaskExample::Tagged {
            id: "s".into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn ner_alignment_and_truncation() {
        let v = vocab();
        let task = TaskConfig::new(TaskFamily::Ner, bio_tag_set(["Chem"]));
        let ex = tagged(&["the", "immunohistochemistry", "drug"], &["O", "B-Chem", "O"]);
        let enc = encode_example(&ex, &v, &task, true).unwrap();
        // [CLS] the | ▁ immuno histo chemistry | drug [SEP]
        assert_eq!(enc.input_ids.len(), 8);
        assert_eq!(enc.word_starts, vec![1, 2, 6]);
        assert_eq!(
            enc.target,
            Target::Tags(vec![
                IGNORE_INDEX,
                0,
                1,
                IGNORE_INDEX,
                IGNORE_INDEX,
                IGNORE_INDEX,
                0,
                IGNORE_INDEX
            ])
        );

        let short = TaskConfig {
            max_seq_len: 6,
            ..task.clone()
        };
        let enc = encode_example(&ex, &v, &short, true).unwrap();
        assert_eq!(enc.words, ["the"]);
        assert!(encode_example(&tagged(&["the"], &["B-Gene"]), &v, &task, true).is_err());
        assert!(encode_example(&tagged(&["the"], &["B-Gene"]), &v, &task, false).is_ok());
    }

    #[test]
    fn pair_layout_and_truncation() {
        let v = vocab();
        let task = TaskConfig {
            max_seq_len: 8,
            ..TaskConfig::new(TaskFamily::Nli, NLI_LABELS.iter().map(|s| s.to_string()).collect())
        };
        let ex = TaskExample::Class {
            id: "p".into(),
            text: "the drug binds the drug binds".into(),
            text2: Some("the drug".into()),
            label: "neutral".into(),
        };
        let enc = encode_example(&ex, &v, &task, true).unwrap();
        assert_eq!(enc.input_ids.len(), 8);
        assert_eq!(enc.segment_ids, [0, 0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(enc.target, Target::Class(1));
    }

    #[test]
    fn qa_target_positions() {
        let v = vocab();
        let task = TaskConfig::new(TaskFamily::Qa, vec![]);
        let ex = TaskExample::Qa {
            id: "q".into(),
            question: "the drug?".into(),
            passage: "the drug binds il-6".into(),
            answers: vec!["binds il-6".into()],
            spans: vec![(2, 4)],
        };
        let enc = encode_example(&ex, &v, &task, true).unwrap();
        let Target::Span { start, end } = enc.target else {
            panic!()
        };
        assert_eq!(start, enc.word_starts[2]);
        assert_eq!(end, enc.word_starts[3]);
        assert_eq!(enc.segment_ids[start], 1);
    }

    fn head_gradcheck(family: TaskFamily, ex: TaskExample, labels: Vec<String>) {
        let v = vocab();
        let model = ModelConfig {
            num_layers: 1,
            ..ModelConfig::micro(v.size())
        };
        let task = TaskConfig::new(family, labels);
        let mut store = init_model(&model, 3).unwrap();
        attach_head(&mut store, &task, &model, 4).unwrap();
        let enc = encode_example(&ex, &v, &task, true).unwrap();
        let s64 = store.cast::<f64>();
        let names: Vec<String> = s64.names().map(String::from).collect();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| s64.get(n).unwrap().clone()).collect();
        let check = check_gradients(&inputs, DEFAULT_STEP, |tape, vars| {
            let bound: BoundParams = names.iter().cloned().zip(vars.iter().copied()).collect();
            task_loss(tape, &bound, &model, family, std::slice::from_ref(&enc), None)
        })
        .unwrap();
        for (n, e) in names.iter().zip(&check.max_rel_error) {
            assert!(*e < 1e-4, "{family} {n}: {e}");
        }
    }

    #[test]
    fn head_gradients() {
        head_gradcheck(
            TaskFamily::Ner,
            tagged(&["the", "drug", "binds"], &["O", "B-Chem", "I-Chem"]),
            bio_tag_set(["Chem"]),
        );
        head_gradcheck(
            TaskFamily::MultiLabel,
            TaskExample::MultiLabel {
                id: "m".into(),
                text: "the drug".into(),
                labels: (0..10).map(|i| i % 3 == 0).collect(),
            },
            HOC_LABELS.iter().map(|s| s.to_string()).collect(),
        );
        head_gradcheck(
            TaskFamily::Sts,
            TaskExample::Score {
                id: "s".into(),
                text: "the drug".into(),
                text2: "binds".into(),
                score: 2.5,
            },
            vec![],
        );
        head_gradcheck(
            TaskFamily::Qa,
            TaskExample::Qa {
                id: "q".into(),
                question: "drug?".into(),
                passage: "the drug binds".into(),
                answers: vec!["drug".into()],
                spans: vec![(1, 2)],
            },
            vec![],
        );
    }

    #[test]
    fn ner_loss_only_counts_first_pieces() {
        let v = vocab();
        let model = ModelConfig::micro(v.size());
        let task = TaskConfig::new(TaskFamily::Ner, bio_tag_set(["Chem"]));
        let mut store = init_model(&model, 3).unwrap();
        attach_head(&mut store, &task, &model, 4).unwrap();
        let ex = tagged(&["the", "immunohistochemistry"], &["O", "B-Chem"]);
        let enc = encode_example(&ex, &v, &task, true).unwrap();

        let mut tape = Tape::<f64>::new();
        let p = bind(&mut tape, &store.cast(), false).unwrap();
        let loss = task_loss(&mut tape, &p, &model, TaskFamily::Ner, std::slice::from_ref(&enc), None).unwrap();
        let logits = head_logits(&mut tape, &p, &model, TaskFamily::Ner, &enc, None).unwrap();
        let l = tape.value(logits).clone();
        // Hand-filtered positions 1 ("the", O) and 2 (first piece, B-Chem).
        let nll = |row: &[f64], t: usize| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            -(row[t] - m - z.ln())
        };
        let want = (nll(l.row(1), 0) + nll(l.row(2), 1)) / 2.0;
        assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-12);
    }
}
