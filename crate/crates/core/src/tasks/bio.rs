use super::Span;
use crate::error::{Error, Result};
use crate::tensor::IGNORE_INDEX;

fn split_tag(tag: &str) -> (char, &str) {
    match tag.split_once('-') {
        Some(("B", t)) if !t.is_empty() => ('B', t),
        Some(("I", t)) if !t.is_empty() => ('I', t),
        _ => ('O', ""),
    }
}

/// Entity spans from a BIO sequence with conlleval chunking: a chunk starts
/// at any `B-X`, at an `I-X` after `O`, and at an `I-X` whose type differs
/// from the previous tag. Unrecognised tags count as `O`.
pub fn decode_bio<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (kind, ty) = split_tag(tag.as_ref());
        let continues = kind == 'I' && matches!(open, Some((t, _)) if t == ty);
        if continues {
            continue;
        }
        if let Some((t, start)) = open.take() {
            spans.push(Span::new(t, start, i));
        }
        if kind != 'O' {
            open = Some((ty, i));
        }
    }
    if let Some((t, start)) = open {
        spans.push(Span::new(t, start, tags.len()));
    }
    spans
}

/// BIO tags of length `len` for non-overlapping `spans`.
pub fn encode_bio(spans: &[Span], len: usize) -> Result<Vec<String>> {
    let mut tags = vec!["O".to_string(); len];
    let mut taken = vec![false; len];
    for s in spans {
        if s.start >= s.end || s.end > len {
            return Err(Error::invalid(format!("span {s:?} outside 0..{len}")));
        }
        if s.label.is_empty() || s.label.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("bad entity type {:?}", s.label)));
        }
        for i in s.start..s.end {
            if std::mem::replace(&mut taken[i], true) {
                return Err(Error::invalid(format!("span {s:?} overlaps another span")));
            }
            tags[i] = format!("{}-{}", if i == s.start { 'B' } else { 'I' }, s.label);
        }
    }
    Ok(tags)
}

/// Word labels spread over subword pieces: the first piece of each word
/// keeps the label, continuation pieces get the ignore index.
pub fn align_labels(word_labels: &[i64], word_pieces: &[Vec<u32>]) -> Result<Vec<i64>> {
    if word_labels.len() != word_pieces.len() {
        return Err(Error::ShapeMismatch {
            op: "align_labels",
            lhs: vec![word_labels.len()],
            rhs: vec![word_pieces.len()],
        });
    }
    let mut out = Vec::new();
    for (i, (&label, pieces)) in word_labels.iter().zip(word_pieces).enumerate() {
        if pieces.is_empty() {
            return Err(Error::invalid(format!("word {i} produced no subword pieces")));
        }
        out.push(label);
        out.extend(std::iter::repeat_n(IGNORE_INDEX, pieces.len() - 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    fn spans(v: &[(&str, usize, usize)]) -> Vec<Span> {
        v.iter().map(|&(t, s, e)| Span::new(t, s, e)).collect()
    }

    #[test]
    fn documented_cases() {
        assert_eq!(decode_bio(&["B-D", "I-D", "O"]), spans(&[("D", 0, 2)]));
        assert_eq!(decode_bio(&["O", "I-D", "I-D"]), spans(&[("D", 1, 3)]));
        assert_eq!(decode_bio(&["B-D", "I-C"]), spans(&[("D", 0, 1), ("C", 1, 2)]));
        assert_eq!(decode_bio(&["I-D", "B-D", "I-D"]), spans(&[("D", 0, 1), ("D", 1, 3)]));
        assert_eq!(decode_bio(&["B-D", "B-D"]), spans(&[("D", 0, 1), ("D", 1, 2)]));
        assert_eq!(decode_bio(&["B-D", "weird", "I-D"]), spans(&[("D", 0, 1), ("D", 2, 3)]));
        assert!(decode_bio::<&str>(&[]).is_empty());
    }

    #[test]
    fn encode_rejects_bad_spans() {
        assert!(encode_bio(&spans(&[("D", 0, 3)]), 2).is_err());
        assert!(encode_bio(&spans(&[("D", 1, 1)]), 2).is_err());
        assert!(encode_bio(&spans(&[("D", 0, 2), ("C", 1, 3)]), 4).is_err());
        assert_eq!(encode_bio(&spans(&[("D", 0, 2)]), 3).unwrap(), ["B-D", "I-D", "O"]);
    }

    #[test]
    fn alignment() {
        assert_eq!(align_labels(&[3, 0], &[vec![9], vec![10]]).unwrap(), vec![3, 0]);
        assert_eq!(
            align_labels(&[1], &[vec![7, 8, 9]]).unwrap(),
            vec![1, IGNORE_INDEX, IGNORE_INDEX]
        );
        assert!(align_labels(&[1], &[vec![]]).is_err());
        assert!(align_labels(&[1, 2], &[vec![3]]).is_err());
    }

    fn span_set() -> impl Strategy<Value = (Vec<Span>, usize)> {
        (1usize..30).prop_flat_map(|len| {
            proptest::collection::vec((0..len, 1usize..5, 0usize..3), 0..8).prop_map(move |raw| {
                let mut used = vec![false; len];
                let mut out = Vec::new();
                for (start, width, ty) in raw {
                    let end = (start + width).min(len);
                    if used[start..end].iter().any(|&u| u) {
                        continue;
                    }
                    used[start..end].iter_mut().for_each(|u| *u = true);
                    out.push(Span::new(["Chem", "Gene", "Dis"][ty], start, end));
                }
                out.sort();
                (out, len)
            })
        })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode((set, len) in span_set()) {
            let tags = encode_bio(&set, len).unwrap();
            let got: BTreeSet<Span> = decode_bio(&tags).into_iter().collect();
            let want: BTreeSet<Span> = set.into_iter().collect();
            prop_assert_eq!(got, want);
        }
    }
}
