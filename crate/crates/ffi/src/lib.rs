//! C interface to generator inference, evaluation metrics and the
//! discriminator receptive-field table.
//!
//! Every function returns an [`AdvdStatus`]. On failure a description is
//! kept per thread and can be read with [`advd_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use advdepth::error::ErrorCategory;
use advdepth::metrics::compute_metrics;
use advdepth::models::checkpoint::load_network;
use advdepth::models::{receptive_fields, DiscriminatorSpec, Network, NetworkSpec};
use advdepth::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvdStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Runtime = 4,
    /// A buffer length or image size does not match.
    Shape = 5,
    Panic = 6,
}

/// Metrics over the valid pixels of one prediction.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdvdMetrics {
    pub rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: u64,
}

/// A loaded generator.
pub struct AdvdGenerator {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: AdvdStatus, msg: impl Into<String>) -> AdvdStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> AdvdStatus {
    let status = match &e {
        Error::Shape(_) => AdvdStatus::Shape,
        _ => match e.category() {
            ErrorCategory::Config => AdvdStatus::Config,
            ErrorCategory::Data => AdvdStatus::Data,
            ErrorCategory::Runtime => AdvdStatus::Runtime,
        },
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> AdvdStatus) -> AdvdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(AdvdStatus::Panic, "internal panic"))
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn advd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a generator from a network or training-state checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advd_generator_load(path: *const c_char, out: *mut *mut AdvdGenerator) -> AdvdStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(AdvdStatus::NullPointer, "null argument");
        }
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(AdvdStatus::Config, "path is not UTF-8");
        };
        match load_network(Path::new(p)) {
            Ok(net) if matches!(net.spec(), NetworkSpec::Generator(_)) => {
                *out = Box::into_raw(Box::new(AdvdGenerator { net }));
                AdvdStatus::Ok
            }
            Ok(net) => fail(AdvdStatus::Config, format!("checkpoint holds a {}", net.spec().role())),
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `g` must come from [`advd_generator_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn advd_generator_free(g: *mut AdvdGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Predicts depth in meters for `n` images of `height`×`width`.
///
/// `images` holds `n*3*height*width` values, planar per image (all red, then
/// green, then blue), preprocessed the way the model was trained.
/// `depth` receives `n*height*width` values.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn advd_generator_predict(
    g: *const AdvdGenerator,
    images: *const f64,
    n: usize,
    height: usize,
    width: usize,
    depth: *mut f64,
    depth_len: usize,
) -> AdvdStatus {
    guard(|| {
        if g.is_null() || images.is_null() || depth.is_null() {
            return fail(AdvdStatus::NullPointer, "null argument");
        }
        let plane = height * width;
        if n == 0 || plane == 0 || depth_len != n * plane {
            return fail(AdvdStatus::Shape, format!("depth buffer needs {} values", n * plane));
        }
        let input = std::slice::from_raw_parts(images, n * 3 * plane).to_vec();
        let result = Tensor::new(vec![n, 3, height, width], input).and_then(|x| (*g).net.infer(&[&x]));
        match result {
            Ok(y) => {
                std::slice::from_raw_parts_mut(depth, depth_len).copy_from_slice(y.data());
                AdvdStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Depth metrics over pixels where `mask` is nonzero.
///
/// # Safety
/// `pred`, `gt` and `mask` must each hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn advd_metrics(
    pred: *const f64,
    gt: *const f64,
    mask: *const u8,
    len: usize,
    out: *mut AdvdMetrics,
) -> AdvdStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || mask.is_null() || out.is_null() {
            return fail(AdvdStatus::NullPointer, "null argument");
        }
        let p = std::slice::from_raw_parts(pred, len);
        let t = std::slice::from_raw_parts(gt, len);
        let m: Vec<bool> = std::slice::from_raw_parts(mask, len).iter().map(|&v| v != 0).collect();
        match compute_metrics(p, t, &m) {
            Ok(r) => {
                *out = AdvdMetrics {
                    rel: r.rel,
                    rmse: r.rmse,
                    rmse_log: r.rmse_log,
                    log10: r.log10,
                    delta1: r.delta1,
                    delta2: r.delta2,
                    delta3: r.delta3,
                    n_pixels: r.n_pixels as u64,
                };
                AdvdStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Receptive field of each layer of the default patch discriminator.
/// Writes at most `cap` values and stores the layer count in `count`.
///
/// # Safety
/// `out` must hold `cap` values; `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn advd_receptive_fields(out: *mut usize, cap: usize, count: *mut usize) -> AdvdStatus {
    guard(|| {
        if count.is_null() || (out.is_null() && cap > 0) {
            return fail(AdvdStatus::NullPointer, "null argument");
        }
        let sizes = receptive_fields(&DiscriminatorSpec::pair()).sizes();
        *count = sizes.len();
        if cap < sizes.len() {
            return fail(AdvdStatus::Shape, format!("need room for {} values", sizes.len()));
        }
        std::slice::from_raw_parts_mut(out, sizes.len()).copy_from_slice(&sizes);
        AdvdStatus::Ok
    })
}
