//! C ABI for the mathtran toolkit: opaque handles, integer error
//! codes, and a thread-local last-error message.
//!
//! Ownership rules: every `char*` returned through an out-parameter is
//! owned by the caller and must be released with `mt_string_free`;
//! bundles are released with `mt_bundle_free`. The pointer returned by
//! `mt_last_error` is borrowed and valid until the next API call on the
//! same thread.

use libc::c_char;
use mathtran::decode::{translate, ModelBundle};
use mathtran::tokenizer::{tokenize, Language};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;

/// Success.
pub const MT_OK: i32 = 0;
/// A required pointer argument was null.
pub const MT_ERR_NULL_POINTER: i32 = 1;
/// An argument was not valid UTF-8 or named an unknown language.
pub const MT_ERR_INVALID_ARGUMENT: i32 = 2;
/// The operation itself failed; see `mt_last_error`.
pub const MT_ERR_RUNTIME: i32 = 3;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// An opaque trained-model handle.
pub struct MtBundle {
    inner: ModelBundle,
}

unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, i32> {
    if ptr.is_null() {
        set_error(&format!("{name} is null"));
        return Err(MT_ERR_NULL_POINTER);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{name} is not valid UTF-8"));
        MT_ERR_INVALID_ARGUMENT
    })
}

fn give_string(out: *mut *mut c_char, s: String) -> i32 {
    match CString::new(s.replace('\0', " ")) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            MT_OK
        }
        Err(_) => {
            set_error("result contained an interior NUL");
            MT_ERR_RUNTIME
        }
    }
}

/// Returns the last error message recorded on this thread. Borrowed;
/// never null; empty when no error has occurred.
#[no_mangle]
pub extern "C" fn mt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned by this library. Null is a no-op.
#[no_mangle]
pub extern "C" fn mt_string_free(s: *mut c_char) {
    if !s.is_null() {
        unsafe { drop(CString::from_raw(s)) };
    }
}

/// Tokenizes `text` in the given language ("latex", "semantic", or
/// "mathematica") and writes a space-joined token string to `out`.
///
/// # Safety
/// `lang` and `text` must be valid NUL-terminated strings; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mt_tokenize(
    lang: *const c_char,
    text: *const c_char,
    out: *mut *mut c_char,
) -> i32 {
    if out.is_null() {
        set_error("out is null");
        return MT_ERR_NULL_POINTER;
    }
    let lang = match read_str(lang, "lang") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let text = match read_str(text, "text") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let language: Language = match lang.parse() {
        Ok(l) => l,
        Err(e) => {
            set_error(&format!("{e}"));
            return MT_ERR_INVALID_ARGUMENT;
        }
    };
    match tokenize(text, language) {
        Ok(stream) => give_string(out, stream.texts().join(" ")),
        Err(e) => {
            set_error(&e.to_string());
            MT_ERR_RUNTIME
        }
    }
}

/// Loads a trained bundle directory (as written by the `train`
/// command) into an opaque handle.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mt_bundle_load(dir: *const c_char, out: *mut *mut MtBundle) -> i32 {
    if out.is_null() {
        set_error("out is null");
        return MT_ERR_NULL_POINTER;
    }
    let dir = match read_str(dir, "dir") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match ModelBundle::load(Path::new(dir)) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(MtBundle { inner }));
            MT_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            MT_ERR_RUNTIME
        }
    }
}

/// Frees a bundle handle. Null is a no-op.
///
/// # Safety
/// `bundle` must be a pointer previously returned by `mt_bundle_load`.
#[no_mangle]
pub unsafe extern "C" fn mt_bundle_free(bundle: *mut MtBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Translates one source formula with beam search and writes the
/// UTF-8 result to `out`.
///
/// # Safety
/// `bundle` must be a live handle from `mt_bundle_load`; `text` a
/// valid NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mt_translate(
    bundle: *const MtBundle,
    text: *const c_char,
    beam_size: u32,
    out: *mut *mut c_char,
) -> i32 {
    if out.is_null() {
        set_error("out is null");
        return MT_ERR_NULL_POINTER;
    }
    if bundle.is_null() {
        set_error("bundle is null");
        return MT_ERR_NULL_POINTER;
    }
    let text = match read_str(text, "text") {
        Ok(s) => s,
        Err(code) => return code,
    };
    if beam_size == 0 {
        set_error("beam_size must be positive");
        return MT_ERR_INVALID_ARGUMENT;
    }
    let bundle = &(*bundle).inner;
    match translate(text, bundle, beam_size as usize, 0) {
        Ok((prediction, _, _)) => give_string(out, prediction),
        Err(e) => {
            set_error(&e.to_string());
            MT_ERR_RUNTIME
        }
    }
}
