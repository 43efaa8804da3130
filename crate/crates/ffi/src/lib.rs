//! C ABI for loading a trained checkpoint and using it from other languages.
//!
//! Every fallible function returns a [`GmtStatus`]. On failure the message
//! is kept per thread and can be copied out with
//! [`gmt_last_error_message`]. Handles are opaque and must be released with
//! their `_free` function; passing NULL to a `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use guidemt::data::{detokenize, split_words, with_bos_eos, ImageFeatures, Vocabulary, UNK};
use guidemt::eval::{corpus_bleu, perplexity, BleuSmoothing};
use guidemt::guidance::AlignmentRecord;
use guidemt::model::{load_checkpoint, InputAblation, Model, MultimodalInput};
use guidemt::numerics::Tensor;
use guidemt::pipeline::{checkpoint_ablation, checkpoint_vocab};
use guidemt::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Invalid = 4,
    /// The output buffer is too small; the required size was written.
    BufferTooSmall = 5,
    Panic = 6,
}

/// A loaded checkpoint with its vocabulary.
pub struct GmtModel {
    model: Model,
    vocab: Vocabulary,
    ablation: InputAblation,
}

/// Region features, an optional whole-image feature and region alignments.
pub struct GmtImage {
    features: ImageFeatures,
    has_global: bool,
    alignments: Vec<AlignmentRecord>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(GmtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => GmtStatus::Io,
            _ => GmtStatus::Invalid,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GmtStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GmtStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(GmtStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(GmtStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn ids(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>, Failure> {
    split_words(text)
        .iter()
        .map(|w| match vocab.id(w) {
            Some(id) if id != UNK => Ok(id),
            _ => Err(Failure(GmtStatus::Invalid, format!("word {w:?} is not in the vocabulary"))),
        })
        .collect()
}

fn build_input(m: &GmtModel, source: &str, image: Option<&GmtImage>) -> Result<MultimodalInput, Failure> {
    let source = ids(source, &m.vocab)?;
    let input = match image {
        Some(img) => {
            let mut input = guidemt::data::encoder_input(&source, &img.features, &img.alignments)?;
            if !img.has_global {
                input = InputAblation {
                    use_global: false,
                    ..InputAblation::default()
                }
                .apply(&input);
            }
            m.ablation.apply(&input)
        }
        None => {
            let empty = ImageFeatures {
                local: Tensor::zeros(&[0, m.model.config.d_local_in]),
                global: vec![0.0; m.model.config.d_global_in],
            };
            InputAblation::text_only().apply(&guidemt::data::encoder_input(&source, &empty, &[])?)
        }
    };
    input.validate(&m.model.config)?;
    Ok(input)
}

/// Short constant name of a status code.
#[no_mangle]
pub extern "C" fn gmt_status_name(status: GmtStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        GmtStatus::Ok => b"ok\0",
        GmtStatus::NullPointer => b"null pointer\0",
        GmtStatus::InvalidUtf8 => b"invalid utf-8\0",
        GmtStatus::Io => b"i/o error\0",
        GmtStatus::Invalid => b"invalid input\0",
        GmtStatus::BufferTooSmall => b"buffer too small\0",
        GmtStatus::Panic => b"panic\0",
    };
    s.as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len - 1` bytes) and returns the full message
/// length without the terminator.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gmt_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint written by `guidemt train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gmt_model_load(path: *const c_char, out: *mut *mut GmtModel) -> GmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let ckpt = load_checkpoint(Path::new(path))?;
        let vocab = checkpoint_vocab(&ckpt)?;
        let ablation = checkpoint_ablation(&ckpt)?;
        *out = Box::into_raw(Box::new(GmtModel {
            model: ckpt.model,
            vocab,
            ablation,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`gmt_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gmt_model_free(model: *mut GmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of the model, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gmt_model_vocab_size(model: *const GmtModel) -> usize {
    model.as_ref().map_or(0, |m| m.vocab.len())
}

/// Creates image features from a row-major `n_local x d_local` region
/// matrix and a `d_global` whole-image vector. `d_global = 0` means no
/// whole-image feature.
///
/// # Safety
/// `local` must point to `n_local * d_local` values (or be NULL when that
/// is 0), `global` to `d_global` values, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gmt_image_new(
    local: *const f64,
    n_local: usize,
    d_local: usize,
    global: *const f64,
    d_global: usize,
    out: *mut *mut GmtImage,
) -> GmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let len = n_local
            .checked_mul(d_local)
            .ok_or_else(|| Failure(GmtStatus::Invalid, "region matrix too large".into()))?;
        let local = Tensor::matrix(n_local, d_local, slice(local, len, "local")?.to_vec())?;
        let global = slice(global, d_global, "global")?.to_vec();
        if local.data().iter().chain(&global).any(|v| !v.is_finite()) {
            return Err(Failure(GmtStatus::Invalid, "features must be finite".into()));
        }
        *out = Box::into_raw(Box::new(GmtImage {
            features: ImageFeatures { local, global },
            has_global: d_global > 0,
            alignments: Vec::new(),
        }));
        Ok(())
    })
}

/// Links source tokens `[token_start, token_end)` to region `box_index`.
/// The span is checked against the sentence when the image is used.
///
/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gmt_image_add_alignment(
    image: *mut GmtImage,
    token_start: usize,
    token_end: usize,
    box_index: usize,
) -> GmtStatus {
    guard(|| {
        let img = image.as_mut().ok_or_else(|| null("image"))?;
        if box_index >= img.features.local.rows() {
            return Err(Failure(
                GmtStatus::Invalid,
                format!(
                    "box {box_index} out of range ({} regions)",
                    img.features.local.rows()
                ),
            ));
        }
        img.alignments.push(AlignmentRecord::new(token_start, token_end, box_index));
        Ok(())
    })
}

/// # Safety
/// `image` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gmt_image_free(image: *mut GmtImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Teacher-forced perplexity of `target` given `source` and `image`. A
/// NULL image scores with text only.
///
/// # Safety
/// Strings must be NUL-terminated, handles live, `out_ppl` valid.
#[no_mangle]
pub unsafe extern "C" fn gmt_perplexity(
    model: *const GmtModel,
    source: *const c_char,
    image: *const GmtImage,
    target: *const c_char,
    out_ppl: *mut f64,
) -> GmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_ppl.is_null() {
            return Err(null("out_ppl"));
        }
        let input = build_input(m, c_str(source, "source")?, image.as_ref())?;
        let target = with_bos_eos(&ids(c_str(target, "target")?, &m.vocab)?);
        *out_ppl = perplexity(&m.model.sequence_log_prob(&input, &target)?)?;
        Ok(())
    })
}

/// Greedy translation written to `buf` as a NUL-terminated string. The
/// length without terminator goes to `out_len` (if not NULL) even when the
/// buffer is too small.
///
/// # Safety
/// Strings must be NUL-terminated, handles live, `buf` NULL or `buf_len`
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gmt_translate(
    model: *const GmtModel,
    source: *const c_char,
    image: *const GmtImage,
    max_len: usize,
    buf: *mut c_char,
    buf_len: usize,
    out_len: *mut usize,
) -> GmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let input = build_input(m, c_str(source, "source")?, image.as_ref())?;
        let y = m.model.greedy_translate(&input, max_len)?;
        let text = detokenize(&y, &m.vocab);
        if !out_len.is_null() {
            *out_len = text.len();
        }
        if buf.is_null() || buf_len <= text.len() {
            return Err(Failure(
                GmtStatus::BufferTooSmall,
                format!("translation needs {} bytes", text.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// Corpus BLEU in [0, 100] of `n` hypothesis/reference sentence pairs,
/// split on whitespace and punctuation. `add_one` nonzero smooths the
/// 2- to 4-gram precisions.
///
/// # Safety
/// `hypotheses` and `references` must point to `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn gmt_bleu(
    hypotheses: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    add_one: i32,
    out_bleu: *mut f64,
) -> GmtStatus {
    guard(|| {
        if out_bleu.is_null() {
            return Err(null("out_bleu"));
        }
        if n > 0 && (hypotheses.is_null() || references.is_null()) {
            return Err(null("sentence array"));
        }
        let read = |arr: *const *const c_char, what: &str| -> Result<Vec<Vec<String>>, Failure> {
            (0..n).map(|i| Ok(split_words(c_str(*arr.add(i), what)?))).collect()
        };
        let hyps = read(hypotheses, "hypothesis")?;
        let refs = read(references, "reference")?;
        let smoothing = if add_one != 0 {
            BleuSmoothing::AddOne
        } else {
            BleuSmoothing::None
        };
        *out_bleu = corpus_bleu(&hyps, &refs, smoothing)?;
        Ok(())
    })
}
