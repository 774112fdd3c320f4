//! C ABI over the tabular model: load or build a model, query next-token
//! distributions, score responses and compute exact sequence-level KL.
//!
//! Every entry point returns a [`KdStatus`]. On failure a message is kept in
//! thread-local storage and can be read with [`kd_last_error`]. Panics never
//! cross the boundary; they surface as `KD_STATUS_PANIC`.
//!
//! Models are opaque [`KdModel`] handles owned by the caller and released with
//! [`kd_model_free`]. A handle may be shared across threads for reading.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use kdlab::divergence::{markov_kld, KlKind};
use kdlab::{Error, Sequence, TabularLM, Vocab};

/// Result code of every `kd_*` call. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Bad token ids, vocabulary, order or length bound.
    InvalidArgument = 3,
    Io = 4,
    /// Model JSON could not be parsed or failed validation.
    Parse = 5,
    /// Two models do not share a vocabulary.
    Mismatch = 6,
    NonFinite = 7,
    /// The output buffer is shorter than the vocabulary.
    BufferTooSmall = 8,
    Panic = 9,
    Internal = 10,
}

/// Opaque model handle.
pub struct KdModel {
    inner: TabularLM,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    // interior NULs would truncate the message on the C side
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> KdStatus {
    match err {
        Error::Vocab(_)
        | Error::Sequence(_)
        | Error::UnknownContext { .. }
        | Error::EnumerationTooLarge { .. }
        | Error::Undefined(_) => KdStatus::InvalidArgument,
        Error::Config(_) | Error::Json(_) => KdStatus::Parse,
        Error::Mismatch(_) | Error::SupportMismatch(_) => KdStatus::Mismatch,
        Error::NonFinite(_) => KdStatus::NonFinite,
        Error::Io(_) => KdStatus::Io,
        _ => KdStatus::Internal,
    }
}

struct Fail(KdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            KdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside kdlab".into());
            KdStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(KdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model<'a>(m: *const KdModel, what: &str) -> Result<&'a TabularLM, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null(what))
}

unsafe fn string<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| Fail(KdStatus::InvalidUtf8, format!("{what}: {e}")))
}

/// A null pointer is accepted for an empty slice.
unsafe fn tokens<'a>(p: *const u32, len: usize, what: &str) -> Result<&'a [u32], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn hand_out(m: TabularLM, dst: *mut *mut KdModel) -> Result<(), Fail> {
    *out(dst, "out")? = Box::into_raw(Box::new(KdModel { inner: m }));
    Ok(())
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer is valid until the next `kd_*` call on the same thread.
#[no_mangle]
pub extern "C" fn kd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a model JSON file. On success `*out` holds a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kd_model_load(path: *const c_char, out: *mut *mut KdModel) -> KdStatus {
    guard(|| {
        let path = string(path, "path")?;
        hand_out(TabularLM::load(Path::new(path))?, out)
    })
}

/// Parses a model from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kd_model_from_json(
    json: *const c_char,
    out: *mut *mut KdModel,
) -> KdStatus {
    guard(|| hand_out(TabularLM::from_json(string(json, "json")?)?, out))
}

/// Builds a uniform model of the given order over `vocab_size` tokens with
/// `eos` as the end-of-sequence id.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kd_model_uniform(
    vocab_size: usize,
    eos: u32,
    order: usize,
    out: *mut *mut KdModel,
) -> KdStatus {
    guard(|| {
        hand_out(
            TabularLM::uniform(Vocab::new(vocab_size, eos)?, order)?,
            out,
        )
    })
}

/// Writes the model as JSON to `path`.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kd_model_save(model: *const KdModel, path: *const c_char) -> KdStatus {
    guard(|| {
        let m = self::model(model, "model")?;
        Ok(m.save(Path::new(string(path, "path")?))?)
    })
}

/// Releases a handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kd_model_free(model: *mut KdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, EOS id and context order of a model.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kd_model_shape(
    model: *const KdModel,
    vocab_size: *mut usize,
    eos: *mut u32,
    order: *mut usize,
) -> KdStatus {
    guard(|| {
        let m = self::model(model, "model")?;
        *out(vocab_size, "vocab_size")? = m.vocab().size();
        *out(eos, "eos")? = m.vocab().eos();
        *out(order, "order")? = m.order();
        Ok(())
    })
}

/// Next-token distribution after `context` (prompt followed by any response
/// prefix). Writes `vocab_size` probabilities into `probs`.
///
/// # Safety
/// `context` must point to `context_len` ids (may be null when zero) and
/// `probs` to `probs_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn kd_model_next_token_dist(
    model: *const KdModel,
    context: *const u32,
    context_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> KdStatus {
    guard(|| {
        let m = self::model(model, "model")?;
        let ctx = tokens(context, context_len, "context")?;
        let v = m.vocab().size();
        if probs.is_null() {
            return Err(null("probs"));
        }
        if probs_len < v {
            return Err(Fail(
                KdStatus::BufferTooSmall,
                format!("probs holds {probs_len} values, vocabulary has {v}"),
            ));
        }
        let dist = m.next_token_dist(ctx)?;
        std::slice::from_raw_parts_mut(probs, v).copy_from_slice(&dist);
        Ok(())
    })
}

/// Log-probability of a finished response given a prompt. The response ends
/// with EOS or was cut at the length cap.
///
/// # Safety
/// The token pointers must cover their lengths (null allowed when zero) and
/// `log_prob` must be valid.
#[no_mangle]
pub unsafe extern "C" fn kd_model_log_prob(
    model: *const KdModel,
    prompt: *const u32,
    prompt_len: usize,
    response: *const u32,
    response_len: usize,
    log_prob: *mut f64,
) -> KdStatus {
    guard(|| {
        let m = self::model(model, "model")?;
        let x = Sequence::prompt(tokens(prompt, prompt_len, "prompt")?.to_vec());
        let y = Sequence::new(tokens(response, response_len, "response")?.to_vec(), true);
        *out(log_prob, "log_prob")? = m.log_prob_seq(&x, &y)?;
        Ok(())
    })
}

/// Exact sequence-level KL between `teacher` and `student` for one prompt with
/// responses capped at `max_len` tokens. `reverse` selects `KL[student||teacher]`
/// instead of `KL[teacher||student]`. Result in nats.
///
/// # Safety
/// Both handles must be live, `prompt` must cover `prompt_len` ids and `kl`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn kd_kl(
    teacher: *const KdModel,
    student: *const KdModel,
    prompt: *const u32,
    prompt_len: usize,
    max_len: usize,
    reverse: bool,
    kl: *mut f64,
) -> KdStatus {
    guard(|| {
        let p = model(teacher, "teacher")?;
        let q = model(student, "student")?;
        let x = Sequence::prompt(tokens(prompt, prompt_len, "prompt")?.to_vec());
        let kind = if reverse {
            KlKind::Reverse
        } else {
            KlKind::Forward
        };
        *out(kl, "kl")? = markov_kld(p, q, &x, max_len, kind)?.value;
        Ok(())
    })
}
