//! Dataset file formats: CoNLL-style `token<TAB>tag` for NER, headed TSV
//! for RE/NLI/STS/multi-label, JSON lines for QA.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::qa::normalize_answer;
use super::{bio_tag_set, Dataset, TaskExample, TaskFamily, HOC_LABELS, NLI_LABELS};
use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn check_tag(tag: &str) -> bool {
    tag == "O"
        || tag
            .strip_prefix("B-")
            .or_else(|| tag.strip_prefix("I-"))
            .is_some_and(|t| !t.is_empty())
}

pub fn parse_conll(text: &str, source: &str) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut types = BTreeSet::new();
    let (mut tokens, mut tags) = (Vec::new(), Vec::new());
    let flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, examples: &mut Vec<TaskExample>| {
        if !tokens.is_empty() {
            examples.push(TaskExample::Tagged {
                id: examples.len().to_string(),
                tokens: std::mem::take(tokens),
                tags: std::mem::take(tags),
            });
        }
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, &mut examples);
            continue;
        }
        let loc = || format!("{source}:{}", i + 1);
        let (token, tag) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(loc(), "expected token<TAB>tag"))?;
        if token.is_empty() || token.contains(char::is_whitespace) || tag.contains('\t') {
            return Err(Error::format(loc(), "expected token<TAB>tag"));
        }
        let tag = tag.trim();
        if !check_tag(tag) {
            return Err(Error::format(loc(), format!("tag {tag:?} is not O, B-X or I-X")));
        }
        if tag != "O" {
            types.insert(tag[2..].to_string());
        }
        tokens.push(token.to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags, &mut examples);
    Ok(Dataset {
        family: TaskFamily::Ner,
        labels: bio_tag_set(types.iter().map(String::as_str)),
        examples,
    })
}

pub fn load_conll(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_conll(&read(path)?, &path.display().to_string())
}

pub fn write_conll(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    for ex in &dataset.examples {
        let TaskExample::Tagged { tokens, tags, .. } = ex else {
            return Err(Error::invalid("write_conll needs tagged examples"));
        };
        for (tok, tag) in tokens.iter().zip(tags) {
            let _ = writeln!(out, "{tok}\t{tag}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Column names for a TSV dataset. Without an explicit id column an `id`
/// header is used when present, the row number otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsvSchema {
    pub id: Option<String>,
    pub text: String,
    pub text2: Option<String>,
    pub target: String,
}

impl TsvSchema {
    pub fn for_family(family: TaskFamily) -> Result<Self> {
        let (text, text2, target) = match family {
            TaskFamily::Re => ("sentence", None, "label"),
            TaskFamily::Nli => ("premise", Some("hypothesis"), "label"),
            TaskFamily::Sts => ("sentence1", Some("sentence2"), "score"),
            TaskFamily::MultiLabel => ("text", None, "labels"),
            TaskFamily::Ner | TaskFamily::Qa => {
                return Err(Error::invalid(format!("{family} data is not stored as TSV")));
            }
        };
        Ok(TsvSchema {
            id: None,
            text: text.to_string(),
            text2: text2.map(str::to_string),
            target: target.to_string(),
        })
    }
}

fn parse_label_mask(field: &str, loc: &str) -> Result<Vec<bool>> {
    let mut mask = vec![false; HOC_LABELS.len()];
    for name in field.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let i = HOC_LABELS
            .iter()
            .position(|l| l.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::format(loc, format!("unknown label {name:?}")))?;
        mask[i] = true;
    }
    Ok(mask)
}

/// Parses a headed TSV. RE classes come from `labels` when given and from
/// the sorted distinct values otherwise; NLI and multi-label sets are fixed.
pub fn parse_tsv(
    text: &str,
    family: TaskFamily,
    schema: &TsvSchema,
    labels: Option<&[String]>,
    source: &str,
) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(source, "missing header row"))?;
    let header: Vec<&str> = header.trim_end_matches('\r').split('\t').map(str::trim).collect();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::format(format!("{source}:1"), format!("missing column {name:?}")))
    };
    let text_col = column(&schema.text)?;
    let text2_col = schema.text2.as_deref().map(column).transpose()?;
    let target_col = column(&schema.target)?;
    let id_col = match &schema.id {
        Some(name) => Some(column(name)?),
        None => header.iter().position(|h| *h == "id"),
    };

    let mut rows = Vec::new();
    for (row, (i, line)) in lines.enumerate() {
        let loc = format!("{source}:{}", i + 1);
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if fields.len() != header.len() {
            return Err(Error::format(
                loc,
                format!("expected {} fields, found {}", header.len(), fields.len()),
            ));
        }
        let id = id_col.map_or_else(|| row.to_string(), |c| fields[c].trim().to_string());
        rows.push((loc, id, fields));
    }

    let label_set: Vec<String> = match family {
        TaskFamily::Re => match labels {
            Some(l) => l.to_vec(),
            None => rows
                .iter()
                .map(|(_, _, f)| f[target_col].trim().to_string())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        },
        TaskFamily::Nli => NLI_LABELS.iter().map(|s| s.to_string()).collect(),
        TaskFamily::MultiLabel => HOC_LABELS.iter().map(|s| s.to_string()).collect(),
        TaskFamily::Sts => Vec::new(),
        TaskFamily::Ner | TaskFamily::Qa => {
            return Err(Error::invalid(format!("{family} data is not stored as TSV")));
        }
    };

    let mut examples = Vec::with_capacity(rows.len());
    for (loc, id, f) in rows {
        let text = f[text_col].to_string();
        let text2 = text2_col.map(|c| f[c].to_string());
        let target = f[target_col].trim();
        let ex = match family {
            TaskFamily::Re | TaskFamily::Nli => {
                let label = if family == TaskFamily::Nli {
                    target.to_lowercase()
                } else {
                    target.to_string()
                };
                if !label_set.contains(&label) {
                    return Err(Error::format(loc, format!("label {target:?} is not in the label set")));
                }
                TaskExample::Class { id, text, text2, label }
            }
            TaskFamily::MultiLabel => TaskExample::MultiLabel {
                id,
                text,
                labels: parse_label_mask(target, &loc)?,
            },
            TaskFamily::Sts => {
                let score: f64 = target
                    .parse()
                    .ok()
                    .filter(|s: &f64| s.is_finite())
                    .ok_or_else(|| Error::format(&loc, format!("unparsable score {target:?}")))?;
                let text2 = text2.ok_or_else(|| Error::invalid("STS needs a second text column"))?;
                TaskExample::Score { id, text, text2, score }
            }
            TaskFamily::Ner | TaskFamily::Qa => unreachable!("rejected above"),
        };
        examples.push(ex);
    }
    Ok(Dataset {
        family,
        labels: label_set,
        examples,
    })
}

pub fn load_tsv(
    path: impl AsRef<Path>,
    family: TaskFamily,
    schema: &TsvSchema,
    labels: Option<&[String]>,
) -> Result<Dataset> {
    let path = path.as_ref();
    parse_tsv(&read(path)?, family, schema, labels, &path.display().to_string())
}

fn tsv_field(s: &str) -> Result<&str> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::invalid(format!("field {s:?} contains a tab or newline")));
    }
    Ok(s)
}

pub fn write_tsv(dataset: &Dataset, schema: &TsvSchema) -> Result<String> {
    let id_name = schema.id.as_deref().unwrap_or("id");
    let mut header = vec![id_name, schema.text.as_str()];
    header.extend(schema.text2.as_deref());
    header.push(&schema.target);
    let mut out = header.join("\t");
    out.push('\n');
    for ex in &dataset.examples {
        let (id, text, text2, target) = match ex {
            TaskExample::Class { id, text, text2, label } => (id, text, text2.clone(), label.clone()),
            TaskExample::MultiLabel { id, text, labels } => {
                let names: Vec<&str> = HOC_LABELS
                    .iter()
                    .zip(labels)
                    .filter(|(_, &on)| on)
                    .map(|(n, _)| *n)
                    .collect();
                (id, text, None, names.join(","))
            }
            TaskExample::Score { id, text, text2, score } => (id, text, Some(text2.clone()), score.to_string()),
            _ => return Err(Error::invalid("write_tsv needs classification or score examples")),
        };
        let mut fields = vec![tsv_field(id)?, tsv_field(text)?];
        if schema.text2.is_some() {
            fields.push(tsv_field(text2.as_deref().unwrap_or(""))?);
        }
        fields.push(tsv_field(&target)?);
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct QaRecord {
    id: String,
    question: String,
    passage: String,
    answers: Vec<String>,
    #[serde(default)]
    spans: Vec<(usize, usize)>,
}

/// Word ranges of `passage` whose normalized text equals a normalized answer.
fn locate_answers(words: &[&str], answers: &[String]) -> Vec<(usize, usize)> {
    let mut found = Vec::new();
    for a in answers {
        let target = normalize_answer(a);
        let width = a.split_whitespace().count();
        if target.is_empty() || width == 0 || width > words.len() {
            continue;
        }
        if let Some(s) = (0..=words.len() - width).find(|&s| normalize_answer(&words[s..s + width].join(" ")) == target)
        {
            if !found.contains(&(s, s + width)) {
                found.push((s, s + width));
            }
        }
    }
    found
}

/// JSON lines `{id, question, passage, answers, spans?}`; spans are passage
/// word ranges and are located from the answers when absent.
pub fn parse_qa(text: &str, source: &str) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{source}:{}", i + 1);
        let rec: QaRecord = serde_json::from_str(line).map_err(|e| Error::format(&loc, e.to_string()))?;
        if rec.answers.is_empty() {
            return Err(Error::format(loc, "no gold answers"));
        }
        let words: Vec<&str> = rec.passage.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::format(loc, "empty passage"));
        }
        if rec.spans.iter().any(|&(s, e)| s >= e || e > words.len()) {
            return Err(Error::format(loc, "answer span outside passage"));
        }
        let spans = if rec.spans.is_empty() {
            locate_answers(&words, &rec.answers)
        } else {
            rec.spans
        };
        examples.push(TaskExample::Qa {
            id: rec.id,
            question: rec.question,
            passage: rec.passage,
            answers: rec.answers,
            spans,
        });
    }
    Ok(Dataset {
        family: TaskFamily::Qa,
        labels: Vec::new(),
        examples,
    })
}

pub fn load_qa(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_qa(&read(path)?, &path.display().to_string())
}

pub fn write_qa(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    for ex in &dataset.examples {
        let TaskExample::Qa {
            id,
            question,
            passage,
            answers,
            spans,
        } = ex
        else {
            return Err(Error::invalid("write_qa needs QA examples"));
        };
        let rec = QaRecord {
            id: id.clone(),
            question: question.clone(),
            passage: passage.clone(),
            answers: answers.clone(),
            spans: spans.clone(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conll_basic() {
        let d = parse_conll("aspirin\tB-Chem\n.\tO\n\n", "t").unwrap();
        assert_eq!(d.len(), 1);
        let TaskExample::Tagged { tokens, tags, .. } = &d.examples[0] else {
            panic!()
        };
        assert_eq!(tokens, &["aspirin", "."]);
        assert_eq!(tags, &["B-Chem", "O"]);
        assert_eq!(d.labels, ["O", "B-Chem", "I-Chem"]);
    }

    #[test]
    fn conll_blocks_and_stray_inside() {
        let text = "a\tO\n\n\nb\tI-Dis\nc\tI-Dis\n\nd\tB-Gene\n";
        let d = parse_conll(text, "t").unwrap();
        assert_eq!(d.len(), 3);
        d.validate().unwrap();
    }

    #[test]
    fn conll_errors() {
        assert!(parse_conll("aspirin B-Chem\n", "t").is_err());
        assert!(parse_conll("aspirin\tX-Chem\n", "t").is_err());
        assert!(parse_conll("aspirin\tB-\n", "t").is_err());
        assert!(parse_conll("a\tO\tO\n", "t").is_err());
    }

    #[test]
    fn conll_round_trip() {
        let text = "IL-6\tB-Gene\nlevels\tO\n\nCisplatin\tB-Chem\ntoxicity\tO\n\n";
        let d = parse_conll(text, "t").unwrap();
        assert_eq!(write_conll(&d).unwrap(), text);
        assert_eq!(parse_conll(&write_conll(&d).unwrap(), "t").unwrap(), d);
    }

    #[test]
    fn nli_rows() {
        let schema = TsvSchema::for_family(TaskFamily::Nli).unwrap();
        let text = "premise\thypothesis\tlabel\nHe has a fever.\tHe is febrile.\tentailment\n";
        let d = parse_tsv(text, TaskFamily::Nli, &schema, None, "t").unwrap();
        let TaskExample::Class { label, text2, .. } = &d.examples[0] else {
            panic!()
        };
        assert_eq!(d.label_index(label).unwrap(), 0);
        assert_eq!(text2.as_deref(), Some("He is febrile."));
        assert!(parse_tsv(
            "premise\thypothesis\tlabel\na\tb\tmaybe\n",
            TaskFamily::Nli,
            &schema,
            None,
            "t"
        )
        .is_err());
    }

    #[test]
    fn sts_scores() {
        let schema = TsvSchema::for_family(TaskFamily::Sts).unwrap();
        let d = parse_tsv(
            "sentence1\tsentence2\tscore\na\tb\t3.4\n",
            TaskFamily::Sts,
            &schema,
            None,
            "t",
        )
        .unwrap();
        let TaskExample::Score { score, .. } = d.examples[0] else {
            panic!()
        };
        assert_eq!(score, 3.4);
        assert!(parse_tsv(
            "sentence1\tsentence2\tscore\na\tb\thigh\n",
            TaskFamily::Sts,
            &schema,
            None,
            "t"
        )
        .is_err());
        assert!(parse_tsv("sentence1\tscore\na\t1\n", TaskFamily::Sts, &schema, None, "t").is_err());
    }

    #[test]
    fn hoc_masks() {
        let schema = TsvSchema::for_family(TaskFamily::MultiLabel).unwrap();
        let text = "id\ttext\tlabels\nd1\tsome text\t\nd2\tmore\tinducing angiogenesis,Resisting cell death\n";
        let d = parse_tsv(text, TaskFamily::MultiLabel, &schema, None, "t").unwrap();
        let TaskExample::MultiLabel { labels, id, .. } = &d.examples[0] else {
            panic!()
        };
        assert_eq!(id, "d1");
        assert!(labels.iter().all(|&b| !b));
        let TaskExample::MultiLabel { labels, .. } = &d.examples[1] else {
            panic!()
        };
        assert_eq!(labels.iter().filter(|&&b| b).count(), 2);
        assert!(labels[2] && labels[4]);
        assert!(parse_tsv("text\tlabels\nx\tunknown\n", TaskFamily::MultiLabel, &schema, None, "t").is_err());
    }

    #[test]
    fn tsv_round_trips() {
        for (family, text) in [
            (
                TaskFamily::Re,
                "id\tsentence\tlabel\n0\t@GENE$ binds @CHEM$\ttrue\n1\tnothing here\tfalse\n",
            ),
            (TaskFamily::Nli, "id\tpremise\thypothesis\tlabel\na\tp\th\tneutral\n"),
            (TaskFamily::Sts, "id\tsentence1\tsentence2\tscore\nx\ta\tb\t2.5\n"),
            (
                TaskFamily::MultiLabel,
                "id\ttext\tlabels\nx\tt\tevading growth suppressors,cellular energetics\n",
            ),
        ] {
            let schema = TsvSchema::for_family(family).unwrap();
            let d = parse_tsv(text, family, &schema, None, "t").unwrap();
            let written = write_tsv(&d, &schema).unwrap();
            assert_eq!(written, text);
            assert_eq!(parse_tsv(&written, family, &schema, None, "t").unwrap(), d);
        }
    }

    #[test]
    fn re_labels_sorted_or_given() {
        let schema = TsvSchema::for_family(TaskFamily::Re).unwrap();
        let text = "sentence\tlabel\na\tfalse\nb\ttrue\n";
        let d = parse_tsv(text, TaskFamily::Re, &schema, None, "t").unwrap();
        assert_eq!(d.labels, ["false", "true"]);
        let given = vec!["true".to_string()];
        assert!(parse_tsv(text, TaskFamily::Re, &schema, Some(&given), "t").is_err());
    }

    #[test]
    fn qa_records() {
        let text = concat!(
            r#"{"id":"q1","question":"What does IL-6 activate?","passage":"IL-6 activates the STAT3 pathway .","answers":["STAT3 pathway"]}"#,
            "\n",
            r#"{"id":"q2","question":"q","passage":"a b c","answers":["b"],"spans":[[1,2]]}"#,
            "\n"
        );
        let d = parse_qa(text, "t").unwrap();
        let TaskExample::Qa { spans, .. } = &d.examples[0] else {
            panic!()
        };
        assert_eq!(spans, &[(3, 5)]);
        let again = parse_qa(&write_qa(&d).unwrap(), "t").unwrap();
        assert_eq!(again, d);
        assert!(parse_qa(r#"{"id":"x","question":"q","passage":"a","answers":[]}"#, "t").is_err());
        assert!(parse_qa(
            r#"{"id":"x","question":"q","passage":"a","answers":["a"],"spans":[[0,2]]}"#,
            "t"
        )
        .is_err());
    }
}
