use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Answer candidate over positions `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSpan {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

fn rank(a: &ScoredSpan, b: &ScoredSpan) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
}

fn all_spans(start: &[f64], end: &[f64], max_answer_len: usize) -> Result<Vec<ScoredSpan>> {
    if start.is_empty() {
        return Err(Error::invalid("empty passage"));
    }
    if start.len() != end.len() {
        return Err(Error::ShapeMismatch {
            op: "span logits",
            lhs: vec![start.len()],
            rhs: vec![end.len()],
        });
    }
    if max_answer_len == 0 {
        return Err(Error::invalid("max_answer_len must be positive"));
    }
    let mut spans = Vec::new();
    for (s, &ls) in start.iter().enumerate() {
        for (e, &le) in end.iter().enumerate().take(s + max_answer_len).skip(s) {
            spans.push(ScoredSpan {
                start: s,
                end: e,
                score: ls + le,
            });
        }
    }
    spans.sort_by(rank);
    Ok(spans)
}

/// The `k` best spans by start + end logit with `end >= start` and at most
/// `max_answer_len` positions. Ties go to the earlier span.
pub fn top_spans(start: &[f64], end: &[f64], k: usize, max_answer_len: usize) -> Result<Vec<ScoredSpan>> {
    let mut spans = all_spans(start, end, max_answer_len)?;
    spans.truncate(k);
    Ok(spans)
}

/// Up to `k` distinct answer strings, best first, read off `words`.
pub fn predict_spans<S: AsRef<str>>(
    start: &[f64],
    end: &[f64],
    words: &[S],
    k: usize,
    max_answer_len: usize,
) -> Result<Vec<String>> {
    if words.len() != start.len() {
        return Err(Error::ShapeMismatch {
            op: "predict_spans",
            lhs: vec![words.len()],
            rhs: vec![start.len()],
        });
    }
    let mut out: Vec<String> = Vec::with_capacity(k);
    for span in all_spans(start, end, max_answer_len)? {
        if out.len() == k {
            break;
        }
        let text = words[span.start..=span.end]
            .iter()
            .map(|w| w.as_ref())
            .collect::<Vec<_>>()
            .join(" ");
        if !out.contains(&text) {
            out.push(text);
        }
    }
    Ok(out)
}

/// Lower-case, drop punctuation and the articles a/an/the, collapse spaces.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}
