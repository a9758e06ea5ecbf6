//! Unigram language-model subword tokenizer.
//!
//! Words are whitespace-delimited and every word-initial piece carries the
//! [`WORD_BOUNDARY`] glyph, so decoding can restore spaces exactly.

mod trainer;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub use trainer::{train_unigram, train_unigram_with, TrainerConfig, TrainingTrace};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const WORD_BOUNDARY: char = '\u{2581}';

/// Collapses whitespace runs to single spaces, optionally lower-casing.
pub fn normalize(text: &str, lower_case: bool) -> String {
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if lower_case {
        joined.to_lowercase()
    } else {
        joined
    }
}

/// A trained subword inventory. Ids are dense; ids `0..5` are the specials.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pieces: Vec<(String, f64)>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
    unk_score: f64,
}

impl Vocab {
    /// Builds a vocabulary from ordinary (non-special) pieces; the specials are
    /// prepended with log-probability 0.
    pub fn from_pieces(pieces: Vec<(String, f64)>) -> Result<Self> {
        let mut all: Vec<(String, f64)> = SPECIAL_TOKENS.iter().map(|s| (s.to_string(), 0.0)).collect();
        all.extend(pieces);
        Self::from_all(all)
    }

    fn from_all(pieces: Vec<(String, f64)>) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if pieces.get(i).map(|p| p.0.as_str()) != Some(special) {
                return Err(Error::format(
                    format!("vocab id {i}"),
                    format!("expected special token {special}"),
                ));
            }
        }
        let mut index = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        let mut min_score = 0.0f64;
        for (id, (surface, score)) in pieces.iter().enumerate().skip(NUM_SPECIALS) {
            if surface.is_empty() || surface.contains(['\t', '\n', '\r']) {
                return Err(Error::format(format!("vocab id {id}"), "empty or unprintable piece"));
            }
            if !score.is_finite() || *score > 0.0 {
                return Err(Error::format(
                    format!("vocab id {id}"),
                    format!("log-probability {score} must be finite and <= 0"),
                ));
            }
            if index.insert(surface.clone(), id as u32).is_some() {
                return Err(Error::format(
                    format!("vocab id {id}"),
                    format!("duplicate piece {surface:?}"),
                ));
            }
            max_piece_chars = max_piece_chars.max(surface.chars().count());
            min_score = min_score.min(*score);
        }
        Ok(Vocab {
            pieces,
            index,
            max_piece_chars,
            unk_score: min_score - 10.0,
        })
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(|p| p.0.as_str())
    }

    pub fn logprob(&self, id: u32) -> Option<f64> {
        self.pieces.get(id as usize).map(|p| p.1)
    }

    /// Id of an ordinary piece; specials are not looked up by surface.
    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Ordinary pieces with their log-probabilities, in id order.
    pub fn pieces(&self) -> impl Iterator<Item = (&str, f64)> {
        self.pieces[NUM_SPECIALS..].iter().map(|(s, p)| (s.as_str(), *p))
    }

    /// Whitespace-splits `text` and segments each word (with its boundary
    /// glyph). Characters the vocabulary has never seen become [UNK].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            ids.extend(self.encode_word(word));
        }
        ids
    }

    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut marked = String::with_capacity(word.len() + 3);
        marked.push(WORD_BOUNDARY);
        marked.push_str(word);
        self.segment(&marked)
    }

    /// Maximum log-probability segmentation of `s` as-is (Viterbi).
    pub fn segment(&self, s: &str) -> Vec<u32> {
        let offsets: Vec<usize> = s
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(s.len()))
            .collect();
        let n = offsets.len() - 1;
        if n == 0 {
            return Vec::new();
        }
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back: Vec<(usize, u32)> = vec![(0, UNK_ID); n + 1];
        best[0] = 0.0;
        for end in 1..=n {
            let mut single_known = false;
            for len in 1..=self.max_piece_chars.min(end) {
                let start = end - len;
                if best[start] == f64::NEG_INFINITY {
                    continue;
                }
                if let Some(&id) = self.index.get(&s[offsets[start]..offsets[end]]) {
                    single_known |= len == 1;
                    let score = best[start] + self.pieces[id as usize].1;
                    if score > best[end] {
                        best[end] = score;
                        back[end] = (start, id);
                    }
                }
            }
            if !single_known {
                let score = best[end - 1] + self.unk_score;
                if score > best[end] {
                    best[end] = score;
                    back[end] = (end - 1, UNK_ID);
                }
            }
        }
        let mut ids = Vec::new();
        let mut pos = n;
        while pos > 0 {
            let (start, id) = back[pos];
            ids.push(id);
            pos = start;
        }
        ids.reverse();
        ids
    }

    /// Total log-probability of a segmentation (UNK scored with the fallback penalty).
    pub fn score(&self, ids: &[u32]) -> f64 {
        ids.iter()
            .map(|&id| {
                if id == UNK_ID {
                    self.unk_score
                } else {
                    self.pieces[id as usize].1
                }
            })
            .sum()
    }

    /// Concatenates surfaces, turning boundary glyphs back into spaces.
    /// Special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(Error::IndexOutOfRange {
                what: "vocab",
                index: id as usize,
                len: self.size(),
            })?;
            if !Self::is_special(id) {
                out.push_str(piece);
            }
        }
        let text = out.replace(WORD_BOUNDARY, " ");
        Ok(text.strip_prefix(' ').unwrap_or(&text).to_string())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (surface, score) in &self.pieces {
            writeln!(w, "{surface}\t{score}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut pieces = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let location = format!("{}:{}", path.display(), lineno + 1);
            let (surface, score) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(&location, "expected `surface<TAB>logprob`"))?;
            let score: f64 = score
                .parse()
                .map_err(|_| Error::format(&location, format!("bad log-probability {score:?}")))?;
            pieces.push((surface.to_string(), score));
        }
        Self::from_all(pieces)
    }
}
