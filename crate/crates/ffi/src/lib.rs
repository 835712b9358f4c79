//! C interface for loading a trained checkpoint and running forecasts.
//!
//! Every function returns a [`TmStatus`]; on failure a description is kept
//! per thread and can be copied out with [`tm_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use timemachine::model::TimeMachine;
use timemachine::numerics::Tensor;
use timemachine::train::Checkpoint;
use timemachine::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Checkpoint = 3,
    Shape = 4,
    Numerical = 5,
    Panic = 6,
}

/// Opaque handle to a loaded model.
pub struct TmModel {
    inner: TimeMachine,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    LAST_ERROR.with(|e| *e.borrow_mut() = bytes);
}

fn fail(status: TmStatus, msg: impl Into<String>) -> TmStatus {
    set_error(msg);
    status
}

fn status_of(err: &Error) -> TmStatus {
    match err {
        Error::Shape { .. } => TmStatus::Shape,
        Error::NonFinite(_) | Error::Diverged(_) => TmStatus::Numerical,
        Error::Checkpoint(_) | Error::Io(_) => TmStatus::Checkpoint,
        Error::Config(_) | Error::Contract(_) | Error::Data(_) => TmStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> TmStatus) -> TmStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(TmStatus::Panic, "internal panic"))
}

/// Loads a checkpoint file and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
/// The handle must be released with [`tm_model_free`].
#[no_mangle]
pub unsafe extern "C" fn tm_model_load(path: *const c_char, out: *mut *mut TmModel) -> TmStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(TmStatus::NullPointer, "path and out must not be null");
        }
        *out = ptr::null_mut();
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(TmStatus::InvalidArgument, "path is not valid UTF-8");
        };
        match Checkpoint::load(Path::new(path)).and_then(Checkpoint::into_model) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(TmModel { inner }));
                TmStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Releases a handle from [`tm_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tm_model_free(model: *mut TmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the channel count, look-back length and horizon of the model.
///
/// # Safety
/// `model` must be a live handle; the output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tm_model_dims(
    model: *const TmModel,
    channels: *mut usize,
    lookback: *mut usize,
    horizon: *mut usize,
) -> TmStatus {
    guard(|| {
        if model.is_null() || channels.is_null() || lookback.is_null() || horizon.is_null() {
            return fail(TmStatus::NullPointer, "null argument to tm_model_dims");
        }
        let c = (*model).inner.config();
        *channels = c.channels;
        *lookback = c.lookback;
        *horizon = c.horizon;
        TmStatus::Ok
    })
}

/// Number of trainable scalars in the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tm_model_num_params(model: *const TmModel, out: *mut usize) -> TmStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(
                TmStatus::NullPointer,
                "null argument to tm_model_num_params",
            );
        }
        *out = (*model).inner.num_params();
        TmStatus::Ok
    })
}

/// Forecasts `batch` windows.
///
/// `input` holds `batch * channels * lookback` values laid out as
/// `[batch][channel][time]`; `output` receives `batch * channels * horizon`
/// values in the same layout and `output_len` must equal that count.
///
/// # Safety
/// `input` and `output` must point to buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tm_model_predict(
    model: *const TmModel,
    input: *const f64,
    batch: usize,
    output: *mut f64,
    output_len: usize,
) -> TmStatus {
    guard(|| {
        if model.is_null() || input.is_null() || output.is_null() {
            return fail(TmStatus::NullPointer, "null argument to tm_model_predict");
        }
        let m = &(*model).inner;
        let c = m.config();
        if batch == 0 {
            return fail(TmStatus::InvalidArgument, "batch must be >= 1");
        }
        let want = batch * c.channels * c.horizon;
        if output_len != want {
            return fail(
                TmStatus::Shape,
                format!("output_len is {output_len}, expected {want}"),
            );
        }
        let n_in = batch * c.channels * c.lookback;
        let data = std::slice::from_raw_parts(input, n_in).to_vec();
        let result =
            Tensor::new(&[batch, c.channels, c.lookback], data).and_then(|x| m.predict(&x));
        match result {
            Ok(y) => {
                ptr::copy_nonoverlapping(y.data().as_ptr(), output, want);
                TmStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`) and returns the length the full message needs,
/// including the terminator. Pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tm_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
