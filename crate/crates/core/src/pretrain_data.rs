//! Masked-LM + sentence-order-prediction examples built from packed segments.
//!
//! Every adjacent segment pair of a document becomes one SOP pair (swapped
//! with probability `swap_prob`), and every pair is emitted `dupe_factor`
//! times with independently drawn masks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{thread_pool, Segment};
use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub input_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    pub masked_positions: Vec<usize>,
    pub mlm_labels: Vec<u32>,
    /// 0 = in order, 1 = swapped.
    pub sop_label: u8,
    pub doc_id: usize,
    pub dup_index: usize,
}

impl PretrainExample {
    /// Number of non-padding positions.
    pub fn len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input ids with the original tokens put back at the masked positions.
    pub fn unmasked_ids(&self) -> Vec<u32> {
        let mut ids = self.input_ids.clone();
        for (&p, &label) in self.masked_positions.iter().zip(&self.mlm_labels) {
            ids[p] = label;
        }
        ids
    }
}

#[derive(Debug, Clone)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    pub max_predictions: usize,
    /// Chosen positions become [MASK] with this probability...
    pub mask_token_prob: f64,
    /// ...a random ordinary piece with this one, and stay unchanged otherwise.
    pub random_token_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_prob: 0.15,
            max_predictions: 20,
            mask_token_prob: 0.8,
            random_token_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainDataConfig {
    pub max_seq_len: usize,
    pub masking: MaskingConfig,
    pub dupe_factor: usize,
    pub swap_prob: f64,
    pub lower_case: bool,
    pub seed: u64,
}

impl Default for PretrainDataConfig {
    fn default() -> Self {
        PretrainDataConfig {
            max_seq_len: 512,
            masking: MaskingConfig::default(),
            dupe_factor: 5,
            swap_prob: 0.5,
            lower_case: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SopPair {
    pub first: Vec<u32>,
    pub second: Vec<u32>,
    pub sop_label: u8,
}

/// SplitMix64 finalizer folded over `parts`; gives independent streams per
/// (document, pair, duplicate).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const SOP_STREAM: u64 = u64::MAX;

/// Pair `(segments[i], segments[i+1])`, swapped when `swapped`. Both halves
/// are truncated (longer one first, from the tail) so that the packed
/// `[CLS] A [SEP] B [SEP]` fits in `max_seq_len`.
pub fn make_sop_pair_with_coin(
    segments: &[Vec<u32>],
    pair_index: usize,
    swapped: bool,
    max_seq_len: usize,
) -> Result<SopPair> {
    if segments.len() < 2 {
        return Err(Error::invalid("SOP pairs need at least two segments"));
    }
    if pair_index + 1 >= segments.len() {
        return Err(Error::IndexOutOfRange {
            what: "SOP pair",
            index: pair_index,
            len: segments.len() - 1,
        });
    }
    if max_seq_len < 5 {
        return Err(Error::invalid("max_seq_len must leave room for both segments"));
    }
    let mut a = segments[pair_index].clone();
    let mut b = segments[pair_index + 1].clone();
    while a.len() + b.len() + 3 > max_seq_len {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("SOP pair has an empty segment"));
    }
    Ok(if swapped {
        SopPair {
            first: b,
            second: a,
            sop_label: 1,
        }
    } else {
        SopPair {
            first: a,
            second: b,
            sop_label: 0,
        }
    })
}

pub fn make_sop_pair<R: Rng + ?Sized>(
    segments: &[Vec<u32>],
    pair_index: usize,
    max_seq_len: usize,
    swap_prob: f64,
    rng: &mut R,
) -> Result<SopPair> {
    let swapped = rng.gen_bool(swap_prob);
    make_sop_pair_with_coin(segments, pair_index, swapped, max_seq_len)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input_ids: Vec<u32>,
    pub masked_positions: Vec<usize>,
    pub mlm_labels: Vec<u32>,
}

/// Number of predictions for `candidates` maskable positions.
pub fn num_predictions(candidates: usize, config: &MaskingConfig) -> usize {
    let wanted = (config.mask_prob * candidates as f64).round() as usize;
    wanted.max(1).min(config.max_predictions).min(candidates)
}

/// Chooses positions among non-special tokens uniformly without replacement
/// and corrupts them with the [MASK]/random/keep mix.
pub fn apply_mlm<R: Rng + ?Sized>(
    tokens: &[u32],
    vocab_size: usize,
    config: &MaskingConfig,
    rng: &mut R,
) -> Result<MaskedSequence> {
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::invalid("vocabulary has no ordinary pieces"));
    }
    let candidates: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t as usize >= NUM_SPECIALS)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::invalid("no maskable positions"));
    }
    let n = num_predictions(candidates.len(), config);
    let mut positions: Vec<usize> = sample(rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    positions.sort_unstable();

    let mut input_ids = tokens.to_vec();
    let mut labels = Vec::with_capacity(n);
    for &p in &positions {
        labels.push(tokens[p]);
        let r: f64 = rng.gen();
        if r < config.mask_token_prob {
            input_ids[p] = MASK_ID;
        } else if r < config.mask_token_prob + config.random_token_prob {
            input_ids[p] = rng.gen_range(NUM_SPECIALS as u32..vocab_size as u32);
        }
    }
    Ok(MaskedSequence {
        input_ids,
        masked_positions: positions,
        mlm_labels: labels,
    })
}

/// `[CLS] A [SEP] B [SEP]` with segment ids `0…0 1…1`.
pub fn layout_pair(first: &[u32], second: &[u32]) -> (Vec<u32>, Vec<u8>) {
    let mut ids = Vec::with_capacity(first.len() + second.len() + 3);
    ids.push(CLS_ID);
    ids.extend_from_slice(first);
    ids.push(SEP_ID);
    let type_a = ids.len();
    ids.extend_from_slice(second);
    ids.push(SEP_ID);
    let mut seg = vec![0u8; type_a];
    seg.resize(ids.len(), 1);
    (ids, seg)
}

/// All examples of one document, ordered by (pair index, duplicate index).
/// Documents with fewer than two segments yield nothing.
pub fn build_document_examples(
    doc_id: usize,
    segments: &[Vec<u32>],
    vocab_size: usize,
    config: &PretrainDataConfig,
) -> Result<Vec<PretrainExample>> {
    if config.dupe_factor < 1 {
        return Err(Error::invalid("dupe_factor must be at least 1"));
    }
    if segments.len() < 2 {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity((segments.len() - 1) * config.dupe_factor);
    for pair_index in 0..segments.len() - 1 {
        let mut coin = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[doc_id as u64, pair_index as u64, SOP_STREAM],
        ));
        let pair = make_sop_pair(segments, pair_index, config.max_seq_len, config.swap_prob, &mut coin)?;
        let (ids, segment_ids) = layout_pair(&pair.first, &pair.second);
        for dup in 0..config.dupe_factor {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed,
                &[doc_id as u64, pair_index as u64, dup as u64],
            ));
            let masked = apply_mlm(&ids, vocab_size, &config.masking, &mut rng)?;
            let real = masked.input_ids.len();
            let mut input_ids = masked.input_ids;
            input_ids.resize(config.max_seq_len, PAD_ID);
            let mut seg = segment_ids.clone();
            seg.resize(config.max_seq_len, 0);
            let mut attention_mask = vec![1u8; real];
            attention_mask.resize(config.max_seq_len, 0);
            out.push(PretrainExample {
                input_ids,
                segment_ids: seg,
                attention_mask,
                masked_positions: masked.masked_positions,
                mlm_labels: masked.mlm_labels,
                sop_label: pair.sop_label,
                doc_id,
                dup_index: dup,
            });
        }
    }
    Ok(out)
}

/// Tokenized segments grouped by document, in document order.
pub fn tokenize_segments(segments: &[Segment], vocab: &Vocab, lower_case: bool) -> Vec<(usize, Vec<Vec<u32>>)> {
    let mut docs: Vec<(usize, Vec<Vec<u32>>)> = Vec::new();
    for seg in segments {
        let text = seg.words.join(" ");
        let text = if lower_case { text.to_lowercase() } else { text };
        let ids = vocab.encode(&text);
        match docs.last_mut() {
            Some((id, segs)) if *id == seg.doc_id => segs.push(ids),
            _ => docs.push((seg.doc_id, vec![ids])),
        }
    }
    docs.sort_by_key(|(id, _)| *id);
    docs
}

/// Examples for every document, processed on `threads` workers and ordered
/// by (doc_id, pair index, duplicate index).
pub fn build_pretrain_set(
    docs: &[(usize, Vec<Vec<u32>>)],
    vocab_size: usize,
    config: &PretrainDataConfig,
    threads: usize,
) -> Result<Vec<PretrainExample>> {
    if config.dupe_factor < 1 {
        return Err(Error::invalid("dupe_factor must be at least 1"));
    }
    let pool = thread_pool(threads)?;
    let per_doc: Vec<Vec<PretrainExample>> = pool.install(|| {
        docs.par_iter()
            .map(|(id, segs)| build_document_examples(*id, segs, vocab_size, config))
            .collect::<Result<_>>()
    })?;
    Ok(per_doc.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn segs(lens: &[usize]) -> Vec<Vec<u32>> {
        lens.iter()
            .enumerate()
            .map(|(i, &n)| (0..n as u32).map(|t| 5 + (t * 7 + i as u32 * 13) % 90).collect())
            .collect()
    }

    #[test]
    fn sop_pair_coins() {
        let s = segs(&[4, 6, 3]);
        let tails = make_sop_pair_with_coin(&s, 1, false, 64).unwrap();
        assert_eq!(
            (tails.first.clone(), tails.second.clone(), tails.sop_label),
            (s[1].clone(), s[2].clone(), 0)
        );
        let heads = make_sop_pair_with_coin(&s, 1, true, 64).unwrap();
        assert_eq!(
            (heads.first, heads.second, heads.sop_label),
            (s[2].clone(), s[1].clone(), 1)
        );
        assert!(make_sop_pair_with_coin(&s[..1], 0, false, 64).is_err());
        assert!(make_sop_pair_with_coin(&s, 2, false, 64).is_err());
    }

    #[test]
    fn sop_pair_truncation_fits() {
        let s = segs(&[300, 400]);
        let p = make_sop_pair_with_coin(&s, 0, false, 512).unwrap();
        assert_eq!(p.first.len() + p.second.len() + 3, 512);
        assert_eq!(p.first[..], s[0][..p.first.len()]);
    }

    #[test]
    fn sop_swap_rate_is_balanced() {
        let s = segs(&[3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let swapped = (0..20_000)
            .filter(|_| make_sop_pair(&s, 0, 64, 0.5, &mut rng).unwrap().sop_label == 1)
            .count();
        let frac = swapped as f64 / 20_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn prediction_counts() {
        let cfg = MaskingConfig::default();
        assert_eq!(num_predictions(509, &cfg), 20);
        assert_eq!(num_predictions(40, &cfg), 6);
        assert_eq!(num_predictions(2, &cfg), 1);

        let s = segs(&[300, 300]);
        let p = make_sop_pair_with_coin(&s, 0, false, 512).unwrap();
        let (ids, _) = layout_pair(&p.first, &p.second);
        assert_eq!(ids.len(), 512);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = apply_mlm(&ids, 100, &cfg, &mut rng).unwrap();
        assert_eq!(m.masked_positions.len(), 20);

        let (ids, _) = layout_pair(&s[0][..19], &s[1][..21]);
        let m = apply_mlm(&ids, 100, &cfg, &mut rng).unwrap();
        assert_eq!(m.masked_positions.len(), 6);

        assert!(apply_mlm(&[CLS_ID, SEP_ID], 100, &cfg, &mut rng).is_err());
    }

    #[test]
    fn dupe_factor_multiplies_pairs() {
        let cfg = PretrainDataConfig {
            max_seq_len: 32,
            dupe_factor: 5,
            seed: 3,
            ..Default::default()
        };
        // 101 segments -> 100 adjacent pairs
        let docs = vec![(0usize, segs(&[10; 101]))];
        assert_eq!(build_pretrain_set(&docs, 100, &cfg, 2).unwrap().len(), 500);
        let one = PretrainDataConfig {
            dupe_factor: 1,
            ..cfg.clone()
        };
        assert_eq!(build_pretrain_set(&docs, 100, &one, 2).unwrap().len(), 100);
        let zero = PretrainDataConfig { dupe_factor: 0, ..cfg };
        assert!(build_pretrain_set(&docs, 100, &zero, 1).is_err());
    }

    #[test]
    fn duplicates_share_text_but_not_masks() {
        let cfg = PretrainDataConfig {
            dupe_factor: 2,
            seed: 9,
            ..Default::default()
        };
        let docs = vec![(4usize, segs(&[300, 300]))];
        let ex = build_pretrain_set(&docs, 100, &cfg, 1).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].unmasked_ids(), ex[1].unmasked_ids());
        assert_eq!(ex[0].sop_label, ex[1].sop_label);
        assert_ne!(ex[0].masked_positions, ex[1].masked_positions);
        assert_eq!((ex[0].dup_index, ex[1].dup_index), (0, 1));
    }

    #[test]
    fn output_is_thread_count_invariant() {
        let cfg = PretrainDataConfig {
            max_seq_len: 40,
            dupe_factor: 3,
            seed: 5,
            ..Default::default()
        };
        let docs: Vec<(usize, Vec<Vec<u32>>)> = (0..30).map(|d| (d, segs(&vec![12 + d % 5; 2 + d % 4]))).collect();
        let a = build_pretrain_set(&docs, 100, &cfg, 1).unwrap();
        let b = build_pretrain_set(&docs, 100, &cfg, 4).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn example_invariants(lens in proptest::collection::vec(1usize..30, 2..6), seed in 0u64..1000) {
            let cfg = PretrainDataConfig { max_seq_len: 48, dupe_factor: 2, seed, ..Default::default() };
            let docs = vec![(0usize, segs(&lens))];
            for ex in build_pretrain_set(&docs, 100, &cfg, 1).unwrap() {
                prop_assert_eq!(ex.input_ids.len(), 48);
                prop_assert_eq!(ex.masked_positions.len(), ex.mlm_labels.len());
                prop_assert!(ex.masked_positions.len() <= 20);
                let original = ex.unmasked_ids();
                prop_assert_eq!(original[0], CLS_ID);
                let n = ex.len();
                prop_assert_eq!(original[n - 1], SEP_ID);
                prop_assert!(original[n..].iter().all(|&t| t == PAD_ID));
                for &p in &ex.masked_positions {
                    prop_assert!(!Vocab::is_special(original[p]));
                }
                prop_assert_eq!(original.iter().filter(|&&t| t == SEP_ID).count(), 2);
            }
        }
    }
}
