//! C interface to the depthpolyp model.
//!
//! Every function returns a [`DpStatus`]. On failure the message is kept per
//! thread and can be copied out with [`dp_last_error_message`]. Handles are
//! opaque; free them with [`dp_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use depthpolyp::harness::score;
use depthpolyp::network::{load_checkpoint, save_checkpoint, Model, NetworkConfig};
use depthpolyp::params::ParamStore;
use depthpolyp::tensor::Tensor;
use depthpolyp::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Io = 5,
    Format = 6,
    Training = 7,
    Internal = 8,
    Panic = 9,
}

/// A model and its weights.
pub struct DpModel {
    model: Model,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> DpStatus {
    match e {
        Error::Config(_) => DpStatus::Config,
        Error::Data(_) | Error::Dimension { .. } => DpStatus::Data,
        Error::Io { .. } | Error::Image { .. } => DpStatus::Io,
        Error::Format(_) => DpStatus::Format,
        Error::Training { .. } => DpStatus::Training,
        Error::Usage(_) => DpStatus::Internal,
    }
}

struct Fail(DpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DpStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any failure and converts panics into [`DpStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DpStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DpStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DpStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const DpModel) -> Result<&'a DpModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn boxed(model: Model, store: ParamStore<f32>, out: *mut *mut DpModel) {
    // SAFETY: callers check `out` first.
    unsafe { *out = Box::into_raw(Box::new(DpModel { model, store })) };
}

/// Creates a freshly initialized model with the default configuration.
///
/// # Safety
/// `out` must be a valid pointer to a `DpModel *`.
#[no_mangle]
pub unsafe extern "C" fn dp_model_new_default(seed: u64, out: *mut *mut DpModel) -> DpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Model::new(NetworkConfig::default())?;
        let store = model.init(seed);
        boxed(model, store, out);
        Ok(())
    })
}

/// Loads a checkpoint written by the library or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dp_model_load(path: *const c_char, out: *mut *mut DpModel) -> DpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (cfg, store) = load_checkpoint(path_arg(path)?)?;
        boxed(Model::new(cfg)?, store, out);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dp_model_save(model: *const DpModel, path: *const c_char) -> DpStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_checkpoint(path_arg(path)?, m.model.config(), &m.store)?;
        Ok(())
    })
}

/// Frees a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dp_model_free(model: *mut DpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Configured input height and width.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dp_model_input_size(model: *const DpModel, height: *mut usize, width: *mut usize) -> DpStatus {
    guard(|| {
        let m = model_ref(model)?;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        *height = m.model.config().input_height;
        *width = m.model.config().input_width;
        Ok(())
    })
}

/// Learnable scalar count and multiply-adds for one `height × width` image.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dp_model_costs(
    model: *const DpModel,
    height: usize,
    width: usize,
    params: *mut u64,
    macs: *mut u64,
) -> DpStatus {
    guard(|| {
        let m = model_ref(model)?;
        if params.is_null() || macs.is_null() {
            return Err(null("params/macs"));
        }
        let t = m.model.cost_table(height, width)?;
        *params = t.total_params();
        *macs = t.total_macs();
        Ok(())
    })
}

/// Runs one image. `image` holds `3·height·width` floats in `[0, 1]`,
/// channel-major (all red, then green, then blue). `prob` and `depth` receive
/// `height·width` floats each; either may be null. Both sides must be
/// multiples of 32.
///
/// # Safety
/// Buffers must hold the stated number of floats.
#[no_mangle]
pub unsafe extern "C" fn dp_model_predict(
    model: *const DpModel,
    image: *const f32,
    height: usize,
    width: usize,
    prob: *mut f32,
    depth: *mut f32,
) -> DpStatus {
    guard(|| {
        let m = model_ref(model)?;
        if image.is_null() {
            return Err(null("image"));
        }
        let n = height
            .checked_mul(width)
            .filter(|&n| n > 0)
            .ok_or_else(|| Fail(DpStatus::InvalidArgument, "empty or oversized image".into()))?;
        let data = std::slice::from_raw_parts(image, 3 * n).to_vec();
        let x = Tensor::from_vec([1, 3, height, width], data)?;
        let (p, d) = depthpolyp::harness::predict(&m.model, &m.store, &x)?;
        if !prob.is_null() {
            ptr::copy_nonoverlapping(p.data().as_ptr(), prob, n);
        }
        if !depth.is_null() {
            ptr::copy_nonoverlapping(d.data().as_ptr(), depth, n);
        }
        Ok(())
    })
}

/// Dice, IoU and Recall of `pred` (probabilities) against a `{0, 1}` mask.
///
/// # Safety
/// `pred` and `mask` must hold `n` floats; `out` must hold 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn dp_score(
    pred: *const f32,
    mask: *const f32,
    n: usize,
    threshold: f64,
    out: *mut f64,
) -> DpStatus {
    guard(|| {
        if pred.is_null() || mask.is_null() || out.is_null() {
            return Err(null("pred/mask/out"));
        }
        let m = score(
            std::slice::from_raw_parts(pred, n),
            std::slice::from_raw_parts(mask, n),
            threshold,
        )?;
        *out = m.dice;
        *out.add(1) = m.iou;
        *out.add(2) = m.recall;
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must hold `len` bytes, or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn dp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
