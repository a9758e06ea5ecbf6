//! C ABI over the core crate. Every fallible function returns a
//! [`BaStatus`]; on failure [`ba_last_error`] describes the problem for the
//! calling thread. Handles are opaque and must be released with their
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bioalbert::metrics;
use bioalbert::model::{self, EncoderInput, ModelConfig, ParameterStore};
use bioalbert::optim;
use bioalbert::tasks::Span;
use bioalbert::tokenizer::Vocab;
use bioalbert::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Tokenizer vocabulary handle.
pub struct BaVocab(Vocab);

/// Model weights and configuration, read-only after loading.
pub struct BaModel {
    config: ModelConfig,
    params: ParameterStore<f32>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaModelConfig {
    pub vocab_size: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub dropout: f32,
    pub layer_norm_eps: f32,
}

impl From<&ModelConfig> for BaModelConfig {
    fn from(c: &ModelConfig) -> Self {
        BaModelConfig {
            vocab_size: c.vocab_size,
            embedding_size: c.embedding_size,
            hidden_size: c.hidden_size,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            ffn_size: c.ffn_size,
            max_positions: c.max_positions,
            type_vocab_size: c.type_vocab_size,
            dropout: c.dropout,
            layer_norm_eps: c.layer_norm_eps,
        }
    }
}

impl From<&BaModelConfig> for ModelConfig {
    fn from(c: &BaModelConfig) -> Self {
        ModelConfig {
            vocab_size: c.vocab_size,
            embedding_size: c.embedding_size,
            hidden_size: c.hidden_size,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            ffn_size: c.ffn_size,
            max_positions: c.max_positions,
            type_vocab_size: c.type_vocab_size,
            dropout: c.dropout,
            layer_norm_eps: c.layer_norm_eps,
        }
    }
}

/// Entity mention: words `start..end` of sentence `sentence`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BaSpan {
    pub sentence: usize,
    pub label: *const c_char,
    pub start: usize,
    pub end: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BaPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(BaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ShapeMismatch { .. } => BaStatus::ShapeMismatch,
            Error::NonFinite(_) => BaStatus::Numeric,
            Error::IndexOutOfRange { .. } | Error::InvalidArgument(_) => BaStatus::InvalidArgument,
            Error::Format { .. } | Error::Json(_) => BaStatus::Format,
            Error::Io { .. } => BaStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: BaStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            BaStatus::Panic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(BaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(BaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(BaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(BaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(BaStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message for the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ba_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ba_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ba_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ba_vocab_load(path: *const c_char, out: *mut *mut BaVocab) -> BaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let vocab = Vocab::load(c_str(path, "path")?)?;
        *out = Box::into_raw(Box::new(BaVocab(vocab)));
        Ok(())
    })
}

/// Number of pieces, or 0 for a null handle.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ba_vocab_size(vocab: *const BaVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.size())
}

/// Encodes `text`. `*len` receives the number of ids; when it exceeds
/// `capacity` nothing is written and `BA_STATUS_BUFFER_TOO_SMALL` is
/// returned, so a first call with `capacity = 0` sizes the buffer.
///
/// # Safety
/// `ids` must have room for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn ba_vocab_encode(
    vocab: *const BaVocab,
    text: *const c_char,
    ids: *mut u32,
    capacity: usize,
    len: *mut usize,
) -> BaStatus {
    guard(|| {
        let vocab = nonnull(vocab, "vocab")?;
        let len = out_ref(len, "len")?;
        let encoded = vocab.0.encode(c_str(text, "text")?);
        *len = encoded.len();
        if encoded.len() > capacity {
            return Err(fail(
                BaStatus::BufferTooSmall,
                format!("{} ids do not fit in {capacity}", encoded.len()),
            ));
        }
        if !encoded.is_empty() {
            if ids.is_null() {
                return Err(fail(BaStatus::NullPointer, "ids is null"));
            }
            ptr::copy_nonoverlapping(encoded.as_ptr(), ids, encoded.len());
        }
        Ok(())
    })
}

/// Decodes ids into a new string released with [`ba_string_free`].
///
/// # Safety
/// `ids` must hold `n` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ba_vocab_decode(
    vocab: *const BaVocab,
    ids: *const u32,
    n: usize,
    out: *mut *mut c_char,
) -> BaStatus {
    guard(|| {
        let vocab = nonnull(vocab, "vocab")?;
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let text = vocab.0.decode(slice(ids, n, "ids")?)?;
        let c = CString::new(text).map_err(|_| fail(BaStatus::Format, "decoded text contains NUL"))?;
        *out = c.into_raw();
        Ok(())
    })
}

/// # Safety
/// `vocab` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ba_vocab_free(vocab: *mut BaVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Loads weights from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ba_model_load(path: *const c_char, out: *mut *mut BaModel) -> BaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let ckpt = model::load_checkpoint(c_str(path, "path")?)?;
        *out = Box::into_raw(Box::new(BaModel {
            config: ckpt.config,
            params: ckpt.params,
        }));
        Ok(())
    })
}

/// Freshly initialised weights for `config`.
///
/// # Safety
/// `config` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ba_model_init(config: *const BaModelConfig, seed: u64, out: *mut *mut BaModel) -> BaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let config = ModelConfig::from(nonnull(config, "config")?);
        let params = model::init_model(&config, seed)?;
        *out = Box::into_raw(Box::new(BaModel { config, params }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ba_model_config(model: *const BaModel, out: *mut BaModelConfig) -> BaStatus {
    guard(|| {
        let model = nonnull(model, "model")?;
        *out_ref(out, "out")? = BaModelConfig::from(&model.config);
        Ok(())
    })
}

/// Encodes one unpadded sequence. `segment_ids` may be null (all zero).
/// `sequence_out` receives `n * hidden_size` floats and `pooled_out`
/// `hidden_size` floats; either may be null.
///
/// # Safety
/// Buffers must match the sizes above.
#[no_mangle]
pub unsafe extern "C" fn ba_model_forward(
    model: *const BaModel,
    ids: *const u32,
    segment_ids: *const u8,
    n: usize,
    sequence_out: *mut f32,
    pooled_out: *mut f32,
) -> BaStatus {
    guard(|| {
        let model = nonnull(model, "model")?;
        let ids = slice(ids, n, "ids")?;
        let zeros;
        let segments = if segment_ids.is_null() {
            zeros = vec![0u8; n];
            &zeros[..]
        } else {
            slice(segment_ids, n, "segment_ids")?
        };
        let mask = vec![1u8; n];
        let (seq, pooled) = model::encode(&model.params, &model.config, &EncoderInput::new(ids, segments, &mask))?;
        if !sequence_out.is_null() {
            ptr::copy_nonoverlapping(seq.data().as_ptr(), sequence_out, seq.data().len());
        }
        if !pooled_out.is_null() {
            ptr::copy_nonoverlapping(pooled.data().as_ptr(), pooled_out, pooled.data().len());
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ba_model_free(model: *mut BaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trainable parameter count of the encoder with its pretraining heads.
///
/// # Safety
/// `config` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ba_count_parameters(config: *const BaModelConfig, out: *mut u64) -> BaStatus {
    guard(|| {
        let config = ModelConfig::from(nonnull(config, "config")?);
        config.validate()?;
        *out_ref(out, "out")? = model::count_parameters(&config);
        Ok(())
    })
}

/// Learning rate at 1-based `step` of the linear warmup/decay schedule.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ba_lr_at(
    step: u64,
    peak_lr: f64,
    warmup_steps: u64,
    total_steps: u64,
    out: *mut f64,
) -> BaStatus {
    guard(|| {
        *out_ref(out, "out")? = optim::lr_at(step, peak_lr, warmup_steps, total_steps)?;
        Ok(())
    })
}

/// # Safety
/// `x` and `y` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ba_pearson(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> BaStatus {
    guard(|| {
        *out_ref(out, "out")? = metrics::pearson(slice(x, n, "x")?, slice(y, n, "y")?)?;
        Ok(())
    })
}

unsafe fn group_spans(spans: &[BaSpan], sentences: usize) -> Result<Vec<Vec<Span>>, Failure> {
    let mut out = vec![Vec::new(); sentences];
    for s in spans {
        if s.start >= s.end {
            return Err(fail(BaStatus::InvalidArgument, "span start must be before end"));
        }
        out[s.sentence].push(Span::new(c_str(s.label, "span label")?, s.start, s.end));
    }
    Ok(out)
}

/// Exact-match entity precision, recall and F1 over `n_sentences`
/// sentences.
///
/// # Safety
/// Span arrays must hold the given counts with valid label strings.
#[no_mangle]
pub unsafe extern "C" fn ba_entity_f1(
    gold: *const BaSpan,
    n_gold: usize,
    pred: *const BaSpan,
    n_pred: usize,
    n_sentences: usize,
    out: *mut BaPrf,
) -> BaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let gold = slice(gold, n_gold, "gold")?;
        let pred = slice(pred, n_pred, "pred")?;
        if let Some(s) = gold.iter().chain(pred).find(|s| s.sentence >= n_sentences) {
            return Err(fail(
                BaStatus::InvalidArgument,
                format!("sentence index {} out of range for {n_sentences}", s.sentence),
            ));
        }
        let prf = metrics::entity_f1(&group_spans(gold, n_sentences)?, &group_spans(pred, n_sentences)?)?;
        *out = BaPrf {
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
        };
        Ok(())
    })
}
