//! Fine-tuning task families: datasets, input encodings, heads and the
//! training loop.

mod bio;
mod data;
mod finetune;
mod heads;
mod qa;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bio::{align_labels, decode_bio, encode_bio};
pub use data::{
    load_conll, load_qa, load_tsv, parse_conll, parse_qa, parse_tsv, write_conll, write_qa, write_tsv, TsvSchema,
};
pub use finetune::{finetune, predict, FinetuneOutcome, Prediction, PredictionPayload};
pub use heads::{
    attach_head, encode_example, head_logits, head_shapes, task_loss, EncodedExample, Target, HEAD_BIAS, HEAD_WEIGHT,
};
pub use qa::{normalize_answer, predict_spans, top_spans, ScoredSpan};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskFamily {
    #[serde(rename = "ner")]
    Ner,
    #[serde(rename = "re")]
    Re,
    #[serde(rename = "cls-multilabel")]
    MultiLabel,
    #[serde(rename = "nli")]
    Nli,
    #[serde(rename = "sts")]
    Sts,
    #[serde(rename = "qa")]
    Qa,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 6] = [
        TaskFamily::Ner,
        TaskFamily::Re,
        TaskFamily::MultiLabel,
        TaskFamily::Nli,
        TaskFamily::Sts,
        TaskFamily::Qa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::Ner => "ner",
            TaskFamily::Re => "re",
            TaskFamily::MultiLabel => "cls-multilabel",
            TaskFamily::Nli => "nli",
            TaskFamily::Sts => "sts",
            TaskFamily::Qa => "qa",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown task family {s:?}")))
    }
}

pub const NLI_LABELS: [&str; 3] = ["entailment", "neutral", "contradiction"];

/// The ten hallmarks of cancer, in output-unit order.
pub const HOC_LABELS: [&str; 10] = [
    "sustaining proliferative signaling",
    "evading growth suppressors",
    "resisting cell death",
    "enabling replicative immortality",
    "inducing angiogenesis",
    "activating invasion and metastasis",
    "genomic instability and mutation",
    "tumor promoting inflammation",
    "cellular energetics",
    "avoiding immune destruction",
];

/// Entity mention over word positions `start..end`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    #[serde(rename = "type")]
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        Span {
            label: label.into(),
            start,
            end,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskExample {
    /// NER: words with BIO tags.
    Tagged {
        id: String,
        tokens: Vec<String>,
        tags: Vec<String>,
    },
    /// RE / NLI: one text or a text pair with a class label.
    Class {
        id: String,
        text: String,
        text2: Option<String>,
        label: String,
    },
    /// Multi-label document classification.
    MultiLabel {
        id: String,
        text: String,
        labels: Vec<bool>,
    },
    /// Sentence similarity.
    Score {
        id: String,
        text: String,
        text2: String,
        score: f64,
    },
    /// Extractive QA; spans are word ranges `start..end` of the passage.
    Qa {
        id: String,
        question: String,
        passage: String,
        answers: Vec<String>,
        spans: Vec<(usize, usize)>,
    },
}

impl TaskExample {
    pub fn id(&self) -> &str {
        match self {
            TaskExample::Tagged { id, .. }
            | TaskExample::Class { id, .. }
            | TaskExample::MultiLabel { id, .. }
            | TaskExample::Score { id, .. }
            | TaskExample::Qa { id, .. } => id,
        }
    }

    fn fits(&self, family: TaskFamily) -> bool {
        matches!(
            (self, family),
            (TaskExample::Tagged { .. }, TaskFamily::Ner)
                | (TaskExample::Class { .. }, TaskFamily::Re | TaskFamily::Nli)
                | (TaskExample::MultiLabel { .. }, TaskFamily::MultiLabel)
                | (TaskExample::Score { .. }, TaskFamily::Sts)
                | (TaskExample::Qa { .. }, TaskFamily::Qa)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub family: TaskFamily,
    /// NER: tag inventory; RE/NLI: classes; multi-label: label names;
    /// empty for STS and QA.
    pub labels: Vec<String>,
    pub examples: Vec<TaskExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::invalid(format!("label {label:?} is not in the label set")))
    }

    /// Checks every example against the family and the label set.
    pub fn validate(&self) -> Result<()> {
        for ex in &self.examples {
            if !ex.fits(self.family) {
                return Err(Error::invalid(format!(
                    "example {:?} does not belong to family {}",
                    ex.id(),
                    self.family
                )));
            }
            match ex {
                TaskExample::Tagged { tokens, tags, .. } => {
                    if tokens.len() != tags.len() {
                        return Err(Error::invalid(format!(
                            "example {:?}: tokens and tags differ in length",
                            ex.id()
                        )));
                    }
                    for t in tags {
                        self.label_index(t)?;
                    }
                }
                TaskExample::Class { label, .. } => {
                    self.label_index(label)?;
                }
                TaskExample::MultiLabel { labels, .. } => {
                    if labels.len() != self.labels.len() {
                        return Err(Error::invalid(format!("example {:?}: wrong label-mask width", ex.id())));
                    }
                }
                TaskExample::Score { score, .. } => {
                    if !score.is_finite() {
                        return Err(Error::invalid(format!("example {:?}: non-finite score", ex.id())));
                    }
                }
                TaskExample::Qa {
                    passage,
                    answers,
                    spans,
                    ..
                } => {
                    let n = passage.split_whitespace().count();
                    if answers.is_empty() {
                        return Err(Error::invalid(format!("example {:?}: no gold answers", ex.id())));
                    }
                    if spans.iter().any(|&(s, e)| s >= e || e > n) {
                        return Err(Error::invalid(format!(
                            "example {:?}: answer span outside passage",
                            ex.id()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// BIO tag inventory: `O`, then `B-X`, `I-X` for each type in sorted order.
pub fn bio_tag_set<'a>(types: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut types: Vec<&str> = types.into_iter().collect();
    types.sort_unstable();
    types.dedup();
    let mut tags = vec!["O".to_string()];
    for t in types {
        tags.push(format!("B-{t}"));
        tags.push(format!("I-{t}"));
    }
    tags
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub family: TaskFamily,
    pub labels: Vec<String>,
    pub max_seq_len: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub lower_case: bool,
    pub checkpoint_every: u64,
    pub qa_top_k: usize,
    pub max_answer_len: usize,
}

impl TaskConfig {
    /// Fine-tuning defaults: 512 tokens for NER and 128 otherwise.
    pub fn new(family: TaskFamily, labels: Vec<String>) -> Self {
        TaskConfig {
            family,
            labels,
            max_seq_len: if family == TaskFamily::Ner { 512 } else { 128 },
            batch_size: 32,
            peak_lr: 1e-5,
            total_steps: 10_000,
            warmup_steps: 320,
            weight_decay: 0.01,
            lower_case: true,
            checkpoint_every: 500,
            qa_top_k: 5,
            max_answer_len: 30,
        }
    }

    pub fn for_dataset(dataset: &Dataset) -> Self {
        Self::new(dataset.family, dataset.labels.clone())
    }

    pub fn num_outputs(&self) -> usize {
        match self.family {
            TaskFamily::Ner | TaskFamily::Re | TaskFamily::Nli | TaskFamily::MultiLabel => self.labels.len(),
            TaskFamily::Sts => 1,
            TaskFamily::Qa => 2,
        }
    }

    pub fn validate(&self, max_positions: usize) -> Result<()> {
        if self.max_seq_len < 4 || self.max_seq_len > max_positions {
            return Err(Error::invalid(format!(
                "max_seq_len {} must be within 4..={max_positions}",
                self.max_seq_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid("warmup_steps exceeds total_steps"));
        }
        let needs_labels = matches!(
            self.family,
            TaskFamily::Ner | TaskFamily::Re | TaskFamily::Nli | TaskFamily::MultiLabel
        );
        if needs_labels && self.labels.len() < 2 && self.family != TaskFamily::MultiLabel {
            return Err(Error::invalid(format!("{} needs at least two labels", self.family)));
        }
        if needs_labels && self.labels.is_empty() {
            return Err(Error::invalid("empty label set"));
        }
        if self.family == TaskFamily::Qa && (self.qa_top_k == 0 || self.max_answer_len == 0) {
            return Err(Error::invalid("QA needs positive top-k and answer length"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_names_round_trip() {
        for f in TaskFamily::ALL {
            assert_eq!(f.as_str().parse::<TaskFamily>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{f}\""));
        }
        assert!("pos".parse::<TaskFamily>().is_err());
    }

    #[test]
    fn defaults_follow_family() {
        let ner = TaskConfig::new(TaskFamily::Ner, bio_tag_set(["Chem"]));
        assert_eq!((ner.max_seq_len, ner.batch_size, ner.warmup_steps), (512, 32, 320));
        assert_eq!(TaskConfig::new(TaskFamily::Sts, vec![]).max_seq_len, 128);
        assert_eq!(ner.num_outputs(), 3);
    }

    #[test]
    fn tag_set_order() {
        assert_eq!(
            bio_tag_set(["Gene", "Chem", "Gene"]),
            ["O", "B-Chem", "I-Chem", "B-Gene", "I-Gene"]
        );
    }

    #[test]
    fn dataset_validation() {
        let mut d = Dataset {
            family: TaskFamily::Nli,
            labels: NLI_LABELS.iter().map(|s| s.to_string()).collect(),
            examples: vec![TaskExample::Class {
                id: "0".into(),
                text: "a".into(),
                text2: Some("b".into()),
                label: "neutral".into(),
            }],
        };
        d.validate().unwrap();
        d.family = TaskFamily::Sts;
        assert!(d.validate().is_err());
        d.family = TaskFamily::Nli;
        d.examples.push(TaskExample::Class {
            id: "1".into(),
            text: "a".into(),
            text2: None,
            label: "maybe".into(),
        });
        assert!(d.validate().is_err());
    }
}
