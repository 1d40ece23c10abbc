//! C ABI over the core crate: load a trained checkpoint, rebuild operators
//! from their JSON descriptors, and run reconstructions into caller-owned
//! buffers.
//!
//! Conventions:
//! - Handles are opaque; every `*_new`/`*_load` has a matching `*_free`, and
//!   freeing a null pointer is a no-op.
//! - Functions return [`utopy_status`]; on anything but `UTOPY_OK` the
//!   thread-local message behind [`utopy_last_error`] describes the failure.
//! - Buffers are plain `double` arrays with explicit lengths that must match
//!   the handle's dimensions exactly; nothing is allocated on the caller's
//!   behalf.
//! - Panics never cross the boundary; they map to `UTOPY_PANIC`.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use utopy::metrics;
use utopy::operators::{LinearOperator, OperatorDescriptor};
use utopy::tensor::Tensor;
use utopy::unroll::UnrollModel;
use utopy::Error;

/// Result class of an FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum utopy_status {
    UTOPY_OK = 0,
    /// A documented precondition was violated (shape, range, state).
    UTOPY_CONTRACT = 1,
    /// Invalid configuration or descriptor contents.
    UTOPY_CONFIG = 2,
    /// A computation produced NaN/Inf or diverged.
    UTOPY_NUMERIC = 3,
    /// An iterative routine hit its iteration budget.
    UTOPY_NON_CONVERGENCE = 4,
    /// A certified-contraction precondition does not hold.
    UTOPY_PRECONDITION = 5,
    /// A required artifact is not staged on disk.
    UTOPY_MISSING_PREREQUISITE = 6,
    UTOPY_IO = 7,
    UTOPY_JSON = 8,
    /// A required pointer argument was null.
    UTOPY_NULL_ARGUMENT = 9,
    /// A buffer length disagrees with the handle's dimensions.
    UTOPY_BAD_LENGTH = 10,
    /// A string argument was not valid UTF-8.
    UTOPY_UTF8 = 11,
    /// A panic was caught at the boundary.
    UTOPY_PANIC = 12,
}

/// Trained unrolled solver loaded from a checkpoint directory.
pub struct UtopyModel {
    inner: UnrollModel,
}

/// Measurement operator rebuilt from a JSON descriptor.
pub struct UtopyOperator {
    inner: Arc<dyn LinearOperator<f64>>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: utopy_status, message: &str) -> utopy_status {
    let sanitized: String = message.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    status
}

fn fail_error(e: &Error) -> utopy_status {
    let status = match e {
        Error::Contract(_) => utopy_status::UTOPY_CONTRACT,
        Error::Config(_) => utopy_status::UTOPY_CONFIG,
        Error::Numeric(_) => utopy_status::UTOPY_NUMERIC,
        Error::NonConvergence { .. } => utopy_status::UTOPY_NON_CONVERGENCE,
        Error::Precondition(_) => utopy_status::UTOPY_PRECONDITION,
        Error::MissingPrerequisite(_) => utopy_status::UTOPY_MISSING_PREREQUISITE,
        Error::Io { .. } => utopy_status::UTOPY_IO,
        Error::Json { .. } => utopy_status::UTOPY_JSON,
    };
    fail(status, &e.to_string())
}

/// Run `body` with panics converted to `UTOPY_PANIC`.
fn guarded(body: impl FnOnce() -> utopy_status) -> utopy_status {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(utopy_status::UTOPY_PANIC, "panic caught at the FFI boundary"),
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, utopy_status> {
    if ptr.is_null() {
        return Err(fail(utopy_status::UTOPY_NULL_ARGUMENT, &format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(utopy_status::UTOPY_UTF8, &format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(
    ptr: *const f64,
    len: usize,
    expected: usize,
    name: &str,
) -> Result<&'a [f64], utopy_status> {
    if ptr.is_null() {
        return Err(fail(utopy_status::UTOPY_NULL_ARGUMENT, &format!("{name} is null")));
    }
    if len != expected {
        return Err(fail(
            utopy_status::UTOPY_BAD_LENGTH,
            &format!("{name} has length {len}, expected {expected}"),
        ));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_out<'a>(
    ptr: *mut f64,
    len: usize,
    expected: usize,
    name: &str,
) -> Result<&'a mut [f64], utopy_status> {
    if ptr.is_null() {
        return Err(fail(utopy_status::UTOPY_NULL_ARGUMENT, &format!("{name} is null")));
    }
    if len != expected {
        return Err(fail(
            utopy_status::UTOPY_BAD_LENGTH,
            &format!("{name} has length {len}, expected {expected}"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn utopy_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; the string is empty
/// if nothing failed yet.
#[no_mangle]
pub extern "C" fn utopy_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a checkpoint directory (as written by the trainer) into a model
/// handle stored in `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn utopy_model_load(
    path: *const c_char,
    out: *mut *mut UtopyModel,
) -> utopy_status {
    guarded(|| {
        if out.is_null() {
            return fail(utopy_status::UTOPY_NULL_ARGUMENT, "out is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match UnrollModel::load_checkpoint(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(UtopyModel { inner }));
                utopy_status::UTOPY_OK
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer from [`utopy_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn utopy_model_free(model: *mut UtopyModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of unrolled stages, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn utopy_model_stages(model: *const UtopyModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).inner.num_stages()
}

/// Reconstruction length in doubles (side²), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn utopy_model_output_len(model: *const UtopyModel) -> usize {
    if model.is_null() {
        return 0;
    }
    let side = (*model).inner.side();
    side * side
}

/// Rebuild an operator from its JSON descriptor into a handle stored in
/// `out`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn utopy_operator_from_descriptor(
    json: *const c_char,
    out: *mut *mut UtopyOperator,
) -> utopy_status {
    guarded(|| {
        if out.is_null() {
            return fail(utopy_status::UTOPY_NULL_ARGUMENT, "out is null");
        }
        let json = match str_arg(json, "json") {
            Ok(j) => j,
            Err(status) => return status,
        };
        let descriptor: OperatorDescriptor = match serde_json::from_str(json) {
            Ok(d) => d,
            Err(e) => return fail(utopy_status::UTOPY_JSON, &format!("descriptor: {e}")),
        };
        match descriptor.build::<f64>() {
            Ok(op) => {
                *out = Box::into_raw(Box::new(UtopyOperator { inner: Arc::from(op) }));
                utopy_status::UTOPY_OK
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Release an operator handle. Null is a no-op.
///
/// # Safety
/// `op` must be null or a pointer from [`utopy_operator_from_descriptor`],
/// freed once.
#[no_mangle]
pub unsafe extern "C" fn utopy_operator_free(op: *mut UtopyOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// Signal length the operator consumes, or 0 for a null handle.
///
/// # Safety
/// `op` must be null or a live operator handle.
#[no_mangle]
pub unsafe extern "C" fn utopy_operator_input_len(op: *const UtopyOperator) -> usize {
    if op.is_null() {
        return 0;
    }
    (*op).inner.in_len()
}

/// Measurement length the operator produces, or 0 for a null handle.
///
/// # Safety
/// `op` must be null or a live operator handle.
#[no_mangle]
pub unsafe extern "C" fn utopy_operator_output_len(op: *const UtopyOperator) -> usize {
    if op.is_null() {
        return 0;
    }
    (*op).inner.out_len()
}

/// Apply the operator: `y = H x` with `x_len == input_len` and
/// `y_len == output_len`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn utopy_operator_apply(
    op: *const UtopyOperator,
    x: *const f64,
    x_len: usize,
    y: *mut f64,
    y_len: usize,
) -> utopy_status {
    guarded(|| {
        if op.is_null() {
            return fail(utopy_status::UTOPY_NULL_ARGUMENT, "op is null");
        }
        let inner = &(*op).inner;
        let x = match slice_arg(x, x_len, inner.in_len(), "x") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let y = match slice_out(y, y_len, inner.out_len(), "y") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let input = match Tensor::from_vec(&[x_len], x.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail_error(&e),
        };
        match inner.apply(&input) {
            Ok(t) => {
                y.copy_from_slice(t.data());
                utopy_status::UTOPY_OK
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Apply the adjoint: `x = Hᵀ y` with `y_len == output_len` and
/// `x_len == input_len`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn utopy_operator_adjoint(
    op: *const UtopyOperator,
    y: *const f64,
    y_len: usize,
    x: *mut f64,
    x_len: usize,
) -> utopy_status {
    guarded(|| {
        if op.is_null() {
            return fail(utopy_status::UTOPY_NULL_ARGUMENT, "op is null");
        }
        let inner = &(*op).inner;
        let y = match slice_arg(y, y_len, inner.out_len(), "y") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let x = match slice_out(x, x_len, inner.in_len(), "x") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let input = match Tensor::from_vec(&[y_len], y.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail_error(&e),
        };
        match inner.adjoint(&input) {
            Ok(t) => {
                x.copy_from_slice(t.data());
                utopy_status::UTOPY_OK
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Reconstruct one signal from its measurements using the trained model on
/// the target fidelity alone. `y_len` must equal the operator's output
/// length and `x_len` the model's output length; the operator's input length
/// must match the model, too.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn utopy_reconstruct(
    model: *const UtopyModel,
    op: *const UtopyOperator,
    y: *const f64,
    y_len: usize,
    x: *mut f64,
    x_len: usize,
) -> utopy_status {
    guarded(|| {
        if model.is_null() || op.is_null() {
            return fail(utopy_status::UTOPY_NULL_ARGUMENT, "model or op is null");
        }
        let model = &(*model).inner;
        let operator = &(*op).inner;
        let n = model.side() * model.side();
        if operator.in_len() != n {
            return fail(
                utopy_status::UTOPY_CONTRACT,
                &format!("operator works on length {}, model on {n}", operator.in_len()),
            );
        }
        let y = match slice_arg(y, y_len, operator.out_len(), "y") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let x = match slice_out(x, x_len, n, "x") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let measurements = match Tensor::from_vec(&[y_len], y.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail_error(&e),
        };
        match model.infer(Arc::clone(operator), &measurements) {
            Ok(t) => {
                x.copy_from_slice(t.data());
                utopy_status::UTOPY_OK
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Peak signal-to-noise ratio between two equal-length buffers, written to
/// `out`.
///
/// # Safety
/// `a` and `b` must be valid for `len` doubles and `out` for one double.
#[no_mangle]
pub unsafe extern "C" fn utopy_psnr(
    a: *const f64,
    b: *const f64,
    len: usize,
    peak: f64,
    out: *mut f64,
) -> utopy_status {
    guarded(|| {
        if out.is_null() {
            return fail(utopy_status::UTOPY_NULL_ARGUMENT, "out is null");
        }
        if len == 0 {
            return fail(utopy_status::UTOPY_BAD_LENGTH, "len must be positive");
        }
        let a = match slice_arg(a, len, len, "a") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let b = match slice_arg(b, len, len, "b") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let ta = match Tensor::from_vec(&[len], a.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail_error(&e),
        };
        let tb = match Tensor::from_vec(&[len], b.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail_error(&e),
        };
        match metrics::psnr(&ta, &tb, peak) {
            Ok(v) => {
                *out = v;
                utopy_status::UTOPY_OK
            }
            Err(e) => fail_error(&e),
        }
    })
}
