//! C ABI over the asnmt toolkit.
//!
//! Models travel as opaque `AsnmtModel*` handles; every fallible call
//! returns an [`AsnmtStatus`] and records a human-readable message
//! retrievable through [`asnmt_last_error`]. The generated header lives
//! in `include/asnmt.h`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use asnmt::autosize::{compact, detect_dead_groups, scope_to_groups, zero_near_dead_groups, AutosizeScope};
use asnmt::checkpoint;
use asnmt::data::Vocab;
use asnmt::decode::beam_search;
use asnmt::model::TransformerModel;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsnmtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidCheckpoint = 4,
    InvalidArgument = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Opaque handle: a loaded model together with its vocabulary.
pub struct AsnmtModel {
    model: TransformerModel,
    vocab: Vocab,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &asnmt::Error) -> AsnmtStatus {
    match err {
        asnmt::Error::Io(_) => AsnmtStatus::Io,
        asnmt::Error::Checkpoint(_) => AsnmtStatus::InvalidCheckpoint,
        asnmt::Error::InvalidArg(_) | asnmt::Error::TokenOutOfRange { .. } => {
            AsnmtStatus::InvalidArgument
        }
        _ => AsnmtStatus::Internal,
    }
}

/// Message describing the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn asnmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn asnmt_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

unsafe fn path_from(ptr: *const c_char) -> Result<&'static Path, AsnmtStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(AsnmtStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(AsnmtStatus::InvalidUtf8)
        }
    }
}

/// Load a checkpoint file into a fresh handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
/// On success `*out` owns the model; release it with [`asnmt_model_free`].
#[no_mangle]
pub unsafe extern "C" fn asnmt_model_load(
    path: *const c_char,
    out: *mut *mut AsnmtModel,
) -> AsnmtStatus {
    if out.is_null() {
        set_error("null output handle");
        return AsnmtStatus::NullArgument;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let result = catch_unwind(|| checkpoint::load(path));
    match result {
        Ok(Ok((model, vocab))) => {
            *out = Box::into_raw(Box::new(AsnmtModel { model, vocab }));
            AsnmtStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic while loading");
            AsnmtStatus::Internal
        }
    }
}

/// Serialize the handle back to a checkpoint file.
///
/// # Safety
/// `handle` must come from this library and `path` must be a valid
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn asnmt_model_save(
    handle: *const AsnmtModel,
    path: *const c_char,
) -> AsnmtStatus {
    let Some(m) = handle.as_ref() else {
        set_error("null model handle");
        return AsnmtStatus::NullArgument;
    };
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match checkpoint::save(path, &m.model, &m.vocab) {
        Ok(()) => AsnmtStatus::Ok,
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Release a handle. Null is a no-op.
///
/// # Safety
/// `handle` must have been returned by [`asnmt_model_load`] and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn asnmt_model_free(handle: *mut AsnmtModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Total parameter element count; 0 for a null handle.
///
/// # Safety
/// `handle` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn asnmt_model_param_count(handle: *const AsnmtModel) -> u64 {
    handle.as_ref().map(|m| m.model.param_count() as u64).unwrap_or(0)
}

/// Vocabulary size; 0 for a null handle.
///
/// # Safety
/// `handle` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn asnmt_model_vocab_size(handle: *const AsnmtModel) -> u64 {
    handle.as_ref().map(|m| m.vocab.len() as u64).unwrap_or(0)
}

/// Count of exactly-zero regularization groups across every attention
/// and feed-forward matrix.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn asnmt_model_dead_groups(
    handle: *const AsnmtModel,
    out: *mut u64,
) -> AsnmtStatus {
    let Some(m) = handle.as_ref() else {
        set_error("null model handle");
        return AsnmtStatus::NullArgument;
    };
    if out.is_null() {
        set_error("null output pointer");
        return AsnmtStatus::NullArgument;
    }
    let specs = scope_to_groups(&m.model, AutosizeScope::All);
    match detect_dead_groups(&m.model, &specs) {
        Ok(dead) => {
            *out = dead.iter().map(|(_, idx)| idx.len() as u64).sum();
            AsnmtStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Compact the model in place: groups with max-abs entry below `epsilon`
/// are zeroed first (pass 0.0 to delete exact zeros only). Writes the
/// number of deleted parameter elements to `deleted_out` when non-null.
///
/// # Safety
/// `handle` must be a valid handle; `deleted_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn asnmt_model_prune(
    handle: *mut AsnmtModel,
    epsilon: f64,
    deleted_out: *mut u64,
) -> AsnmtStatus {
    let Some(m) = handle.as_mut() else {
        set_error("null model handle");
        return AsnmtStatus::NullArgument;
    };
    let result = catch_unwind(AssertUnwindSafe(|| -> asnmt::Result<u64> {
        let specs = scope_to_groups(&m.model, AutosizeScope::All);
        if epsilon > 0.0 {
            zero_near_dead_groups(&mut m.model, &specs, epsilon)?;
        }
        let dead = detect_dead_groups(&m.model, &specs)?;
        let (compacted, report) = compact(&m.model, &dead, &m.vocab)?;
        m.model = compacted;
        Ok((report.params_before - report.params_after) as u64)
    }));
    match result {
        Ok(Ok(deleted)) => {
            if !deleted_out.is_null() {
                *deleted_out = deleted;
            }
            AsnmtStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic while pruning");
            AsnmtStatus::Internal
        }
    }
}

/// Beam-search translation of one source sentence given as token ids.
/// The decoded tokens (no bos/eos) are written to `out`; `*out_len`
/// carries its capacity in and the decoded length out.
///
/// # Safety
/// `src` must point to `src_len` ids, `out` to `*out_len` writable slots,
/// and `handle` must be valid.
#[no_mangle]
pub unsafe extern "C" fn asnmt_translate(
    handle: *const AsnmtModel,
    src: *const u32,
    src_len: usize,
    beam: usize,
    alpha: f64,
    out: *mut u32,
    out_len: *mut usize,
) -> AsnmtStatus {
    let Some(m) = handle.as_ref() else {
        set_error("null model handle");
        return AsnmtStatus::NullArgument;
    };
    if src.is_null() || out.is_null() || out_len.is_null() {
        set_error("null buffer argument");
        return AsnmtStatus::NullArgument;
    }
    let source: Vec<usize> =
        std::slice::from_raw_parts(src, src_len).iter().map(|&t| t as usize).collect();
    let capacity = *out_len;
    let result = catch_unwind(AssertUnwindSafe(|| beam_search(&m.model, &source, beam, alpha)));
    match result {
        Ok(Ok(tokens)) => {
            if tokens.len() > capacity {
                set_error("output buffer too small");
                *out_len = tokens.len();
                return AsnmtStatus::BufferTooSmall;
            }
            let out_slice = std::slice::from_raw_parts_mut(out, tokens.len());
            for (o, t) in out_slice.iter_mut().zip(&tokens) {
                *o = *t as u32;
            }
            *out_len = tokens.len();
            AsnmtStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic while decoding");
            AsnmtStatus::Internal
        }
    }
}
