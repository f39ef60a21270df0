//! C ABI over `mmattn`: load a checkpoint, translate sentences, score BLEU.
//!
//! Every function returns an [`MmStatus`]. On failure a description is
//! available from [`mm_last_error`] on the same thread until the next call.
//! Strings handed out by the library must be released with
//! [`mm_string_free`]; models with [`mm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mmattn::bleu::{corpus_bleu4, tokenize};
use mmattn::{checkpoint, Error, Model, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    BadFormat = 4,
    InvalidArgument = 5,
    Shape = 6,
    Internal = 7,
}

/// Opaque handle to a loaded model and its vocabularies.
pub struct MmModel {
    model: Model<f32>,
    src: mmattn::vocab::Vocabulary,
    tgt: mmattn::vocab::Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> MmStatus {
    match e {
        Error::Io { .. } | Error::IoBare(_) => MmStatus::Io,
        Error::FeatureFormat(_) | Error::Checkpoint(_) | Error::Json(_) | Error::Config(_) => MmStatus::BadFormat,
        Error::Shape(_) | Error::ShapeMismatch { .. } => MmStatus::Shape,
        Error::InvalidArgument(_) | Error::TokenOutOfRange { .. } | Error::LineCountMismatch { .. } => {
            MmStatus::InvalidArgument
        }
        _ => MmStatus::Internal,
    }
}

struct Failure(MmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MmStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MmStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(MmStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn null(name: &str) -> Failure {
    Failure(MmStatus::NullPointer, format!("{name} is null"))
}

/// Loads a checkpoint together with its `.src.vocab` / `.tgt.vocab` files.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mm_model_load(path: *const c_char, out: *mut *mut MmModel) -> MmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let (model, src, tgt) = checkpoint::load::<f32>(path)?;
        *out = Box::into_raw(Box::new(MmModel { model, src, tgt }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`mm_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mm_model_free(model: *mut MmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image feature geometry expected by the model: width per location, or 0
/// for text-only models.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mm_model_feature_dim(model: *const MmModel) -> usize {
    match model.as_ref() {
        Some(m) if m.model.config().is_multimodal() => m.model.config().img_dim,
        _ => 0,
    }
}

/// Greedy-translates a whitespace-tokenized sentence.
///
/// `features` holds `locations × dim` row-major floats and may be null for
/// text-only models. `max_len == 0` uses twice the source length plus 5.
/// On success `*out` receives a string to free with [`mm_string_free`].
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn mm_translate(
    model: *const MmModel,
    sentence: *const c_char,
    features: *const f32,
    locations: usize,
    dim: usize,
    max_len: usize,
    out: *mut *mut c_char,
) -> MmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let sentence = str_arg(sentence, "sentence")?;
        let feats = if m.model.config().is_multimodal() {
            if features.is_null() {
                return Err(null("features"));
            }
            let data = std::slice::from_raw_parts(features, locations * dim).to_vec();
            Some(Tensor::new(vec![locations, dim], data)?)
        } else {
            None
        };
        let ids = m.src.encode(&tokenize(sentence));
        let max_len = if max_len == 0 { 2 * ids.len() + 5 } else { max_len };
        let (tokens, _) = m.model.greedy_decode(&ids, feats.as_ref(), max_len)?;
        let text = m.tgt.decode(&tokens).join(" ");
        *out = CString::new(text).map_err(|_| Failure(MmStatus::Internal, "NUL in output".into()))?.into_raw();
        Ok(())
    })
}

/// Corpus BLEU-4 (0–100) of `n` hypotheses against `n` references.
///
/// # Safety
/// `hyps` and `refs` must each point to `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mm_corpus_bleu(
    hyps: *const *const c_char,
    refs: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> MmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if hyps.is_null() || refs.is_null() {
            return Err(null("hyps/refs"));
        }
        let read = |arr: *const *const c_char, name: &str| -> Result<Vec<Vec<String>>, Failure> {
            (0..n).map(|i| str_arg(*arr.add(i), name).map(tokenize)).collect()
        };
        let h = read(hyps, "hypothesis")?;
        let r = read(refs, "reference")?;
        *out = corpus_bleu4(&h, &r)?.score;
        Ok(())
    })
}

/// Releases a string returned by the library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread; empty after success.
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn mm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
