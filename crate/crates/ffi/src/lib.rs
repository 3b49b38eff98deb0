//! C ABI over a trained checkpoint: load it, encode item text embeddings
//! and sequences, score candidates.
//!
//! Every fallible call returns one of the `UNISREC_*` codes. On failure the
//! message is kept per thread and read with [`unisrec_last_error`]. Models
//! are opaque handles released with [`unisrec_model_free`]. All embeddings
//! are row-major `float` arrays of width `unisrec_model_input_dim`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use unisrec::checkpoint::Checkpoint;
use unisrec::finetune::{record_scoring_inputs, FinetuneMode};
use unisrec::model::Model;
use unisrec::numeric::Graph;
use unisrec::scope::ParamScope;
use unisrec::Error;

pub const UNISREC_OK: i32 = 0;
/// A numeric check failed (degenerate vector, non-finite value).
pub const UNISREC_ERR_NUMERIC: i32 = 1;
/// Unreadable or malformed input file.
pub const UNISREC_ERR_INPUT: i32 = 2;
/// Shape or configuration mismatch.
pub const UNISREC_ERR_CONFIG: i32 = 3;
/// Empty input where data is required.
pub const UNISREC_ERR_EMPTY: i32 = 4;
/// A required pointer argument was null.
pub const UNISREC_ERR_NULL: i32 = 5;
/// Internal panic caught at the boundary.
pub const UNISREC_ERR_PANIC: i32 = 6;

/// Opaque handle to a loaded model.
pub struct UnisrecModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(unisrec::cli::exit_code(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(UNISREC_ERR_NULL, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            UNISREC_OK
        }
        Ok(Err(Failure(code, message))) => {
            set_error(&message);
            code
        }
        Err(_) => {
            set_error("internal panic");
            UNISREC_ERR_PANIC
        }
    }
}

unsafe fn slice<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f32, len: usize, what: &str) -> Result<&'a mut [f32], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a>(m: *const UnisrecModel) -> Result<&'a Model, Failure> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

/// Sequence representation of `history` and the scores of its rows
/// followed by the candidate rows, with noise and dropout off.
fn forward(model: &Model, history: &[f32], candidates: &[f32]) -> Result<(Vec<f32>, Vec<f32>), Failure> {
    let d_w = model.config.d_w;
    let h = history.len() / d_w;
    if h == 0 {
        return Err(Failure(UNISREC_ERR_EMPTY, "history is empty".into()));
    }
    let mut rows = Vec::with_capacity(history.len() + candidates.len());
    rows.extend_from_slice(history);
    rows.extend_from_slice(candidates);
    let scope = ParamScope::inference(&model.params);
    let mut g = Graph::new();
    let (s, items) = record_scoring_inputs(
        &mut g,
        &scope,
        model,
        &rows,
        &[(0..h).collect()],
        FinetuneMode::Inductive,
        None,
    )?;
    let scores = g.matmul_bt(s, items);
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    Ok((to32(g.value(s)), to32(&g.value(scores)[h..])))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn unisrec_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn unisrec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by `unisrec pretrain` or `unisrec finetune`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn unisrec_model_load(path: *const c_char, out: *mut *mut UnisrecModel) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(UNISREC_ERR_INPUT, "path is not UTF-8".into()))?;
        let (model, _, _) = Checkpoint::load(Path::new(path))?.restore()?;
        *out = Box::into_raw(Box::new(UnisrecModel { model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`unisrec_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn unisrec_model_free(model: *mut UnisrecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the text embeddings the model consumes; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unisrec_model_input_dim(model: *const UnisrecModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.d_w)
}

/// Width of item and sequence representations; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unisrec_model_output_dim(model: *const UnisrecModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.d_v)
}

/// Item representations of `n` text embeddings into `out` (`n × output_dim`).
///
/// # Safety
/// `rows` must hold `n × input_dim` floats and `out` room for `n × output_dim`.
#[no_mangle]
pub unsafe extern "C" fn unisrec_encode_items(
    model: *const UnisrecModel,
    rows: *const f32,
    n: usize,
    out: *mut f32,
) -> i32 {
    guard(|| {
        let model = handle(model)?;
        let rows = slice(rows, n * model.config.d_w, "rows")?;
        let out = slice_mut(out, n * model.config.d_v, "out")?;
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Failure(UNISREC_ERR_NUMERIC, "non-finite embedding value".into()));
        }
        for (o, v) in out.iter_mut().zip(model.adaptor.encode_rows(&model.params, rows)) {
            *o = v as f32;
        }
        Ok(())
    })
}

/// Unit-norm representation of a history of `len` items, oldest first,
/// into `out` (`output_dim` floats). Only the last `n_max` items are used.
///
/// # Safety
/// `history` must hold `len × input_dim` floats and `out` room for `output_dim`.
#[no_mangle]
pub unsafe extern "C" fn unisrec_encode_sequence(
    model: *const UnisrecModel,
    history: *const f32,
    len: usize,
    out: *mut f32,
) -> i32 {
    guard(|| {
        let model = handle(model)?;
        let history = slice(history, len * model.config.d_w, "history")?;
        let out = slice_mut(out, model.config.d_v, "out")?;
        let (s, _) = forward(model, history, &[])?;
        out.copy_from_slice(&s);
        Ok(())
    })
}

/// Inductive next-item scores `s · v` of `n_candidates` candidate text
/// embeddings given a history of `len` items. Any ID table in the
/// checkpoint is ignored.
///
/// # Safety
/// `history` must hold `len × input_dim` floats, `candidates`
/// `n_candidates × input_dim` floats and `out` room for `n_candidates`.
#[no_mangle]
pub unsafe extern "C" fn unisrec_score(
    model: *const UnisrecModel,
    history: *const f32,
    len: usize,
    candidates: *const f32,
    n_candidates: usize,
    out: *mut f32,
) -> i32 {
    guard(|| {
        let model = handle(model)?;
        let d_w = model.config.d_w;
        let history = slice(history, len * d_w, "history")?;
        let candidates = slice(candidates, n_candidates * d_w, "candidates")?;
        let out = slice_mut(out, n_candidates, "out")?;
        let (_, scores) = forward(model, history, candidates)?;
        out.copy_from_slice(&scores);
        Ok(())
    })
}
