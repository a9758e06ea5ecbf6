//! EM training and likelihood-based pruning of a unigram piece inventory.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{normalize, Vocab, NUM_SPECIALS, WORD_BOUNDARY};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    /// Final vocabulary size including the five specials.
    pub target_size: usize,
    pub max_piece_chars: usize,
    /// Multi-character seed pieces need at least this corpus frequency.
    pub min_seed_freq: u64,
    pub max_seed_pieces: usize,
    /// Fraction of prunable pieces kept after each pruning round.
    pub shrink_factor: f64,
    pub em_iterations: usize,
    pub lower_case: bool,
    /// Lines beyond this count are subsampled using `seed`.
    pub max_sentences: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            target_size: 2000,
            max_piece_chars: 16,
            min_seed_freq: 2,
            max_seed_pieces: 200_000,
            shrink_factor: 0.8,
            em_iterations: 2,
            lower_case: false,
            max_sentences: 1_000_000,
            seed: 0,
        }
    }
}

/// Corpus log-likelihood at the start of every EM iteration, grouped by
/// pruning round (the last group is the final re-estimation).
#[derive(Debug, Clone, Default)]
pub struct TrainingTrace {
    pub rounds: Vec<Vec<f64>>,
}

pub fn train_unigram<S: AsRef<str>>(corpus: &[S], target_size: usize, seed: u64) -> Result<Vocab> {
    let config = TrainerConfig {
        target_size,
        seed,
        ..TrainerConfig::default()
    };
    train_unigram_with(corpus, &config).map(|(v, _)| v)
}

struct Word {
    chars: Vec<char>,
    count: f64,
}

struct Model {
    pieces: Vec<(String, f64)>,
    required: Vec<bool>,
    lookup: HashMap<String, usize>,
}

impl Model {
    fn new(pieces: Vec<(String, f64)>, required: Vec<bool>) -> Self {
        let lookup = pieces.iter().enumerate().map(|(i, (s, _))| (s.clone(), i)).collect();
        Model {
            pieces,
            required,
            lookup,
        }
    }

    fn len(&self) -> usize {
        self.pieces.len()
    }

    /// Calls `f(start, end, piece)` for every piece occurrence in `chars`.
    fn lattice(&self, chars: &[char], max_len: usize, mut f: impl FnMut(usize, usize, usize)) {
        let mut buf = String::new();
        for start in 0..chars.len() {
            buf.clear();
            for end in start + 1..=chars.len().min(start + max_len) {
                buf.push(chars[end - 1]);
                if let Some(&p) = self.lookup.get(buf.as_str()) {
                    f(start, end, p);
                }
            }
        }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn train_unigram_with<S: AsRef<str>>(corpus: &[S], config: &TrainerConfig) -> Result<(Vocab, TrainingTrace)> {
    if corpus.is_empty() {
        return Err(Error::invalid("tokenizer corpus is empty"));
    }
    let lines = select_lines(corpus, config);

    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in &lines {
        for word in normalize(line, config.lower_case).split(' ').filter(|w| !w.is_empty()) {
            let mut marked = String::with_capacity(word.len() + 3);
            marked.push(WORD_BOUNDARY);
            marked.push_str(word);
            *counts.entry(marked).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::invalid("tokenizer corpus has no words"));
    }
    let words: Vec<Word> = counts
        .into_iter()
        .map(|(w, c)| Word {
            chars: w.chars().collect(),
            count: c as f64,
        })
        .collect();

    let mut model = seed_pieces(&words, config);
    let n_required = model.required.iter().filter(|&&r| r).count();
    if config.target_size <= n_required + NUM_SPECIALS {
        return Err(Error::invalid(format!(
            "target size {} must exceed {} distinct characters + {} specials",
            config.target_size, n_required, NUM_SPECIALS
        )));
    }

    let mut trace = TrainingTrace::default();
    loop {
        let mut round = Vec::with_capacity(config.em_iterations);
        for _ in 0..config.em_iterations.max(1) {
            round.push(em_step(&mut model, &words, config.max_piece_chars));
        }
        trace.rounds.push(round);
        if model.len() + NUM_SPECIALS <= config.target_size {
            break;
        }
        prune(&mut model, &words, config);
    }

    let mut finals: Vec<(String, f64)> = model.pieces;
    finals.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let vocab = Vocab::from_pieces(finals)?;
    Ok((vocab, trace))
}

fn select_lines<'a, S: AsRef<str>>(corpus: &'a [S], config: &TrainerConfig) -> Vec<&'a str> {
    if corpus.len() <= config.max_sentences {
        return corpus.iter().map(|s| s.as_ref()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut picked = sample(&mut rng, corpus.len(), config.max_sentences).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| corpus[i].as_ref()).collect()
}

/// Every character, plus every frequent substring up to `max_piece_chars`.
fn seed_pieces(words: &[Word], config: &TrainerConfig) -> Model {
    let mut freq: HashMap<String, u64> = HashMap::new();
    let mut singles: BTreeMap<char, u64> = BTreeMap::new();
    for w in words {
        let c = w.count as u64;
        for start in 0..w.chars.len() {
            *singles.entry(w.chars[start]).or_default() += c;
            let mut s = String::new();
            s.push(w.chars[start]);
            for end in start + 2..=w.chars.len().min(start + config.max_piece_chars) {
                s.push(w.chars[end - 1]);
                *freq.entry(s.clone()).or_default() += c;
            }
        }
    }
    let mut multi: Vec<(String, u64)> = freq.into_iter().filter(|(_, f)| *f >= config.min_seed_freq).collect();
    // Rank by frequency x length.
    multi.sort_by(|a, b| {
        let sa = a.1 * a.0.chars().count() as u64;
        let sb = b.1 * b.0.chars().count() as u64;
        sb.cmp(&sa).then_with(|| a.0.cmp(&b.0))
    });
    multi.truncate(config.max_seed_pieces);

    let total: f64 =
        singles.values().map(|&f| f as f64).sum::<f64>() + multi.iter().map(|(_, f)| *f as f64).sum::<f64>();
    let mut pieces = Vec::with_capacity(singles.len() + multi.len());
    let mut required = Vec::with_capacity(pieces.capacity());
    for (c, f) in singles {
        pieces.push((c.to_string(), (f as f64 / total).ln()));
        required.push(true);
    }
    for (s, f) in multi {
        pieces.push((s, (f as f64 / total).ln()));
        required.push(false);
    }
    Model::new(pieces, required)
}

/// One expectation-maximization step. Returns the corpus log-likelihood under
/// the parameters *before* the update.
fn em_step(model: &mut Model, words: &[Word], max_len: usize) -> f64 {
    let mut expected = vec![0.0f64; model.len()];
    let mut loglik = 0.0;
    let mut edges: Vec<(usize, usize, usize)> = Vec::new();
    for w in words {
        let n = w.chars.len();
        edges.clear();
        model.lattice(&w.chars, max_len, |s, e, p| edges.push((s, e, p)));
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        // Edges are grouped by start, so sort by end for the forward pass.
        let mut by_end = edges.clone();
        by_end.sort_by_key(|&(s, e, _)| (e, s));
        for &(s, e, p) in &by_end {
            alpha[e] = log_add(alpha[e], alpha[s] + model.pieces[p].1);
        }
        let mut beta = vec![f64::NEG_INFINITY; n + 1];
        beta[n] = 0.0;
        for &(s, e, p) in by_end.iter().rev() {
            beta[s] = log_add(beta[s], model.pieces[p].1 + beta[e]);
        }
        let z = alpha[n];
        loglik += w.count * z;
        for &(s, e, p) in &edges {
            let post = (alpha[s] + model.pieces[p].1 + beta[e] - z).exp();
            expected[p] += w.count * post;
        }
    }

    let total: f64 = expected.iter().sum();
    let mut keep = Vec::with_capacity(model.len());
    let mut floor = 0.0f64;
    for (i, &c) in expected.iter().enumerate() {
        let lp = (c / total).ln();
        if lp.is_finite() {
            floor = floor.min(lp);
            keep.push((i, lp));
        } else if model.required[i] {
            keep.push((i, f64::NEG_INFINITY));
        }
    }
    let pieces = keep
        .iter()
        .map(|&(i, lp)| {
            let lp = if lp == f64::NEG_INFINITY { floor - 10.0 } else { lp };
            (model.pieces[i].0.clone(), lp)
        })
        .collect();
    let required = keep.iter().map(|&(i, _)| model.required[i]).collect();
    *model = Model::new(pieces, required);
    loglik
}

/// Best segmentation score of `chars` over the lattice, skipping piece `skip`.
fn viterbi(model: &Model, chars: &[char], max_len: usize, skip: Option<usize>, out: &mut Vec<usize>) -> f64 {
    let n = chars.len();
    let mut best = vec![f64::NEG_INFINITY; n + 1];
    let mut back = vec![(0usize, usize::MAX); n + 1];
    best[0] = 0.0;
    let mut edges = Vec::new();
    model.lattice(chars, max_len, |s, e, p| edges.push((s, e, p)));
    edges.sort_by_key(|&(s, e, _)| (e, s));
    for (s, e, p) in edges {
        if Some(p) == skip || best[s] == f64::NEG_INFINITY {
            continue;
        }
        let score = best[s] + model.pieces[p].1;
        if score > best[e] {
            best[e] = score;
            back[e] = (s, p);
        }
    }
    out.clear();
    let mut pos = n;
    while pos > 0 && back[pos].1 != usize::MAX {
        out.push(back[pos].1);
        pos = back[pos].0;
    }
    best[n]
}

/// Drops the multi-character pieces whose removal costs the least likelihood.
fn prune(model: &mut Model, words: &[Word], config: &TrainerConfig) {
    let max_len = config.max_piece_chars;
    let mut freq = vec![0.0f64; model.len()];
    let mut path = Vec::new();
    for w in words {
        viterbi(model, &w.chars, max_len, None, &mut path);
        for &p in &path {
            freq[p] += w.count;
        }
    }

    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for (i, (surface, lp)) in model.pieces.iter().enumerate() {
        if model.required[i] {
            continue;
        }
        let loss = if freq[i] == 0.0 {
            0.0
        } else {
            let chars: Vec<char> = surface.chars().collect();
            let alt = viterbi(model, &chars, max_len, Some(i), &mut path);
            freq[i] * (lp - alt)
        };
        candidates.push((loss, i));
    }
    candidates.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| model.pieces[a.1].0.cmp(&model.pieces[b.1].0))
    });

    let excess = model.len() + NUM_SPECIALS - config.target_size;
    let per_round = ((candidates.len() as f64) * (1.0 - config.shrink_factor)).ceil() as usize;
    let drop_count = excess.min(per_round.max(1)).min(candidates.len());
    let mut dropped = vec![false; model.len()];
    for &(_, i) in &candidates[..drop_count] {
        dropped[i] = true;
    }
    let mut pieces = Vec::with_capacity(model.len() - drop_count);
    let mut required = Vec::with_capacity(pieces.capacity());
    for (i, piece) in model.pieces.iter().enumerate() {
        if !dropped[i] {
            pieces.push(piece.clone());
            required.push(model.required[i]);
        }
    }
    *model = Model::new(pieces, required);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::UNK_ID;

    fn sample_corpus() -> Vec<String> {
        let words = [
            "protein",
            "kinase",
            "binds",
            "receptor",
            "the",
            "cell",
            "inhibits",
            "expression",
            "gene",
            "tumor",
            "patients",
            "with",
            "acute",
            "kidney",
            "injury",
        ];
        (0..120)
            .map(|i| {
                (0..8)
                    .map(|j| words[(i * 7 + j * 3 + i / 5) % words.len()])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }

    #[test]
    fn one_word_corpus_learns_the_word() {
        let corpus = vec!["deoxyribose"; 1000];
        let vocab = train_unigram(&corpus, 50, 0).unwrap();
        assert!(vocab.id("\u{2581}deoxyribose").is_some() || vocab.id("deoxyribose").is_some());
        assert_eq!(vocab.encode("deoxyribose").len(), 1);
    }

    #[test]
    fn respects_target_size_and_specials() {
        let corpus = sample_corpus();
        for target in [40, 80, 200] {
            let vocab = train_unigram(&corpus, target, 1).unwrap();
            assert!(vocab.size() <= target);
            assert_eq!(vocab.piece(0), Some("[PAD]"));
            assert_eq!(vocab.piece(4), Some("[MASK]"));
            assert!(vocab.pieces().all(|(_, lp)| lp <= 0.0));
        }
    }

    #[test]
    fn character_fallback() {
        let vocab = train_unigram(&["ab ba aab", "bba ab"], 10, 0).unwrap();
        assert!(vocab.id("a").is_some());
        assert!(vocab.id("b").is_some());
        assert!(vocab.size() <= 10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty: Vec<String> = vec![];
        assert!(train_unigram(&empty, 100, 0).is_err());
        assert!(train_unigram(&["   "], 100, 0).is_err());
        // 3 characters (including the boundary glyph) + 5 specials = 8
        assert!(train_unigram(&["ab ab"], 8, 0).is_err());
        assert!(train_unigram(&["ab ab"], 9, 0).is_ok());
    }

    #[test]
    fn em_likelihood_never_decreases_within_a_round() {
        let corpus = sample_corpus();
        let config = TrainerConfig {
            target_size: 60,
            em_iterations: 5,
            ..TrainerConfig::default()
        };
        let (_, trace) = train_unigram_with(&corpus, &config).unwrap();
        assert!(trace.rounds.len() > 1);
        for round in &trace.rounds {
            for pair in round.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-9, "{round:?}");
            }
        }
    }

    #[test]
    fn training_lines_round_trip() {
        let corpus = sample_corpus();
        let vocab = train_unigram(&corpus, 60, 0).unwrap();
        for line in &corpus {
            let ids = vocab.encode(line);
            assert!(!ids.contains(&UNK_ID));
            assert_eq!(vocab.decode(&ids).unwrap(), normalize(line, false));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = sample_corpus();
        let a = train_unigram(&corpus, 70, 3).unwrap();
        let b = train_unigram(&corpus, 70, 3).unwrap();
        assert_eq!(a, b);
    }
}
