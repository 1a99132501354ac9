//! C ABI over `quanta-core` plans.
//!
//! Every function returns a [`QuantaStatus`] or a plain value and never
//! unwinds across the boundary. On failure the message is available from
//! [`quanta_last_error_message`] on the same thread. Plans are opaque
//! handles owned by the caller and released with [`quanta_plan_free`].
//! Strings returned by the library are released with [`quanta_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use quanta_core::analysis::numerical_rank;
use quanta_core::qtf::{QtfFile, QtfRecord};
use quanta_core::{build_plan, gen_apply_expr, gen_operator_expr, AxisShape, Error, Matrix, PlanScheme};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    PlanValidation = 4,
    Contraction = 5,
    NonFinite = 6,
    Format = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for QuantaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::DimensionMismatch(_) => QuantaStatus::DimensionMismatch,
            Error::PlanValidation(_) => QuantaStatus::PlanValidation,
            Error::InvalidArgument(_) | Error::Config(_) => QuantaStatus::InvalidArgument,
            Error::Contraction(_) => QuantaStatus::Contraction,
            Error::NonFinite(_) | Error::Diverged { .. } => QuantaStatus::NonFinite,
            Error::Format(_) => QuantaStatus::Format,
            Error::Io(_) => QuantaStatus::Io,
        }
    }
}

/// Opaque plan handle.
pub struct QuantaPlan {
    inner: quanta_core::QuantaPlan,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Failure(QuantaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(QuantaStatus::from(&e), e.to_string())
    }
}

fn fail<T>(status: QuantaStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QuantaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QuantaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_owned());
            set_last_error(format!("internal panic: {msg}"));
            QuantaStatus::Panic
        }
    }
}

unsafe fn plan_ref<'a>(plan: *const QuantaPlan) -> Result<&'a quanta_core::QuantaPlan, Failure> {
    if plan.is_null() {
        return fail(QuantaStatus::NullPointer, "plan handle is null");
    }
    Ok(&(*plan).inner)
}

unsafe fn path_arg(path: *const c_char) -> Result<String, Failure> {
    if path.is_null() {
        return fail(QuantaStatus::NullPointer, "path is null");
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(s.to_owned()),
        Err(_) => fail(QuantaStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

unsafe fn slice_arg<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return fail(QuantaStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn out_slice<'a>(out: *mut f64, len: usize, needed: usize) -> Result<&'a mut [f64], Failure> {
    if out.is_null() {
        return fail(QuantaStatus::NullPointer, "output buffer is null");
    }
    if len < needed {
        return fail(QuantaStatus::BufferTooSmall, format!("output buffer holds {len} values, need {needed}"));
    }
    Ok(std::slice::from_raw_parts_mut(out, needed))
}

fn into_handle(plan: quanta_core::QuantaPlan) -> *mut QuantaPlan {
    Box::into_raw(Box::new(QuantaPlan { inner: plan }))
}

/// Message for the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn quanta_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a square plan over `dims[0..n_dims]` with the all-pairs layout
/// repeated `rounds` times and Gaussian gates.
///
/// # Safety
/// `dims` must point to `n_dims` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quanta_plan_build_all_pairs(
    dims: *const usize,
    n_dims: usize,
    rounds: usize,
    seed: u64,
    init_scale: f64,
    out: *mut *mut QuantaPlan,
) -> QuantaStatus {
    guard(|| {
        if out.is_null() {
            return fail(QuantaStatus::NullPointer, "out is null");
        }
        let dims = slice_arg(dims, n_dims, "dims")?;
        if rounds == 0 {
            return fail(QuantaStatus::InvalidArgument, "rounds must be at least 1");
        }
        let shape = AxisShape::new(dims.to_vec())?;
        let scheme = if rounds == 1 { PlanScheme::AllPairs } else { PlanScheme::Stacked { rounds } };
        let plan = build_plan(&shape, &scheme, seed, init_scale)?;
        *out = into_handle(plan);
        Ok(())
    })
}

/// Loads the first plan record of a QTF file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quanta_plan_load(path: *const c_char, out: *mut *mut QuantaPlan) -> QuantaStatus {
    guard(|| {
        if out.is_null() {
            return fail(QuantaStatus::NullPointer, "out is null");
        }
        let path = path_arg(path)?;
        let plan = QtfFile::read(&path)?.plan()?.clone();
        *out = into_handle(plan);
        Ok(())
    })
}

/// Writes the plan as a single-record QTF file.
///
/// # Safety
/// `plan` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn quanta_plan_save(plan: *const QuantaPlan, path: *const c_char) -> QuantaStatus {
    guard(|| {
        let plan = plan_ref(plan)?;
        let path = path_arg(path)?;
        QtfFile::new(vec![QtfRecord::Plan(plan.clone())]).write(&path)?;
        Ok(())
    })
}

/// Releases a plan. NULL is ignored.
///
/// # Safety
/// `plan` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn quanta_plan_free(plan: *mut QuantaPlan) {
    if !plan.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(plan))));
    }
}

/// Zero for a NULL handle.
///
/// # Safety
/// `plan` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn quanta_plan_input_len(plan: *const QuantaPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.inner.input_len())
}

/// Zero for a NULL handle.
///
/// # Safety
/// `plan` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn quanta_plan_output_len(plan: *const QuantaPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.inner.output_len())
}

/// Zero for a NULL handle.
///
/// # Safety
/// `plan` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn quanta_plan_gate_count(plan: *const QuantaPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.inner.gate_count())
}

/// Trainable parameters. Zero for a NULL handle.
///
/// # Safety
/// `plan` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn quanta_plan_param_count(plan: *const QuantaPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.inner.param_count())
}

/// Applies the plan to `batch` row-major vectors of length `input_len`,
/// writing `batch * output_len` values to `out`.
///
/// # Safety
/// `xs` must hold `batch * input_len` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn quanta_plan_apply(
    plan: *const QuantaPlan,
    xs: *const f64,
    batch: usize,
    out: *mut f64,
    out_len: usize,
) -> QuantaStatus {
    guard(|| {
        let plan = plan_ref(plan)?;
        let xs = slice_arg(xs, batch * plan.input_len(), "xs")?;
        let out = out_slice(out, out_len, batch * plan.output_len())?;
        out.copy_from_slice(&plan.apply(xs)?);
        Ok(())
    })
}

/// Writes the dense `output_len x input_len` operator, row-major.
///
/// # Safety
/// `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn quanta_plan_materialize(plan: *const QuantaPlan, out: *mut f64, out_len: usize) -> QuantaStatus {
    guard(|| {
        let plan = plan_ref(plan)?;
        let out = out_slice(out, out_len, plan.input_len() * plan.output_len())?;
        out.copy_from_slice(plan.materialize().as_slice());
        Ok(())
    })
}

unsafe fn string_out(text: &str, out: *mut *mut c_char) -> Result<(), Failure> {
    if out.is_null() {
        return fail(QuantaStatus::NullPointer, "out is null");
    }
    match CString::new(text) {
        Ok(c) => {
            *out = c.into_raw();
            Ok(())
        }
        Err(_) => fail(QuantaStatus::InvalidArgument, "string contains NUL"),
    }
}

/// Einsum expression applying an all-pairs plan over `n_axes` axes to a
/// batched input. Free the result with [`quanta_string_free`].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quanta_gen_apply_expr(n_axes: usize, out: *mut *mut c_char) -> QuantaStatus {
    guard(|| string_out(gen_apply_expr(n_axes)?.text(), out))
}

/// Einsum expression for the full operator of an all-pairs plan.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quanta_gen_operator_expr(n_axes: usize, out: *mut *mut c_char) -> QuantaStatus {
    guard(|| string_out(gen_operator_expr(n_axes)?.text(), out))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn quanta_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Numerical rank of a row-major `rows x cols` matrix. Singular values
/// at or below `tolerance * max(rows, cols) * sigma_max` are dropped.
///
/// # Safety
/// `data` must hold `rows * cols` values and `rank` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quanta_numerical_rank(
    data: *const f64,
    rows: usize,
    cols: usize,
    tolerance: f64,
    rank: *mut usize,
) -> QuantaStatus {
    guard(|| {
        if rank.is_null() {
            return fail(QuantaStatus::NullPointer, "rank is null");
        }
        let data = slice_arg(data, rows * cols, "data")?;
        let m = Matrix::from_vec(rows, cols, data.to_vec())?;
        *rank = numerical_rank(&m, tolerance)?.rank;
        Ok(())
    })
}
