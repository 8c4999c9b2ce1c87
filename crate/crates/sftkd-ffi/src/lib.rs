//! C ABI for the reconstruction library.
//!
//! Conventions:
//! - Handles (`SftkdModel`, `SftkdMask`) are opaque; create them with the
//!   `*_build` / `*_generate` / `*_load` functions and release them with the
//!   matching `*_free`. Freeing null is a no-op.
//! - Every fallible function returns an [`SftkdStatus`] and reports details
//!   through `sftkd_last_error()`, a thread-local message that stays valid
//!   until the same thread's next library call.
//! - Images are row-major `f64` buffers of `h * w` samples; k-space buffers
//!   interleave real and imaginary parts (`2 * h * w` doubles). Grid sizes
//!   always come from the mask handle.
//!
//! The generated header lives at `include/sftkd.h`; regenerate it with
//! `cbindgen --crate sftkd-ffi --output include/sftkd.h` from the workspace
//! root after changing this file.

use sftkd::kspace::{forward_operator, zero_filled, CartesianMask, ComplexGrid};
use sftkd::model::{
    build_dccnn, checkpoint_precision, load_cascade, reconstruct, save_cascade, CascadeModel,
};
use sftkd::tensor::Scalar;
use sftkd::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result codes for every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SftkdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument value is out of range or otherwise unusable.
    InvalidArgument = 2,
    /// Buffer or grid dimensions do not line up.
    ShapeMismatch = 3,
    /// The filesystem refused an operation.
    IoError = 4,
    /// A file exists but its contents are not in the expected format.
    FormatError = 5,
    /// A non-finite value appeared, or a metric is undefined for the input.
    NumericError = 6,
    /// An unexpected internal failure; details in `sftkd_last_error`.
    InternalError = 7,
}

/// A sampling mask handle.
pub struct SftkdMask(CartesianMask);

enum ModelImpl {
    F32(CascadeModel<f32>),
    F64(CascadeModel<f64>),
}

/// A cascade model handle (single or double precision, set at load time).
pub struct SftkdModel(ModelImpl);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::default());
}

fn status_of(e: &Error) -> SftkdStatus {
    match e {
        Error::Shape(_) => SftkdStatus::ShapeMismatch,
        Error::Config(_) => SftkdStatus::InvalidArgument,
        Error::Io { .. } => SftkdStatus::IoError,
        Error::Format { .. } => SftkdStatus::FormatError,
        Error::NonFinite(_) | Error::Metric(_) => SftkdStatus::NumericError,
        Error::Stage { .. } => SftkdStatus::InternalError,
    }
}

/// Run `f` with panics caught; success clears the error slot.
fn guarded(f: impl FnOnce() -> Result<(), (SftkdStatus, String)>) -> SftkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            SftkdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SftkdStatus::InternalError
        }
    }
}

fn lib_err(e: Error) -> (SftkdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null_arg(name: &str) -> (SftkdStatus, String) {
    (SftkdStatus::NullArgument, format!("argument {name} is null"))
}

/// # Safety
/// `ptr` must be null or a valid nul-terminated string.
unsafe fn path_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a Path, (SftkdStatus, String)> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| (SftkdStatus::InvalidArgument, format!("argument {name} is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn out_arg<'a, T>(
    ptr: *mut T,
    name: &str,
) -> Result<&'a mut T, (SftkdStatus, String)> {
    ptr.as_mut().ok_or_else(|| null_arg(name))
}

// ---------------------------------------------------------------------------
// library info
// ---------------------------------------------------------------------------

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sftkd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the calling thread's most recent failure ("" after success).
/// Valid until the same thread's next call into the library.
#[no_mangle]
pub extern "C" fn sftkd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Static name of a status code ("ok", "null_argument", ...).
#[no_mangle]
pub extern "C" fn sftkd_status_name(status: SftkdStatus) -> *const c_char {
    let name: &'static str = match status {
        SftkdStatus::Ok => "ok\0",
        SftkdStatus::NullArgument => "null_argument\0",
        SftkdStatus::InvalidArgument => "invalid_argument\0",
        SftkdStatus::ShapeMismatch => "shape_mismatch\0",
        SftkdStatus::IoError => "io_error\0",
        SftkdStatus::FormatError => "format_error\0",
        SftkdStatus::NumericError => "numeric_error\0",
        SftkdStatus::InternalError => "internal_error\0",
    };
    name.as_ptr() as *const c_char
}

// ---------------------------------------------------------------------------
// masks
// ---------------------------------------------------------------------------

/// Generate a Cartesian row mask: a fully sampled center band plus random
/// outer rows, about `h / accel` rows in total. On success `*out` owns the
/// new handle.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sftkd_mask_generate(
    h: usize,
    w: usize,
    accel: u32,
    center_fraction: f64,
    seed: u64,
    out: *mut *mut SftkdMask,
) -> SftkdStatus {
    guarded(|| {
        let out = out_arg(out, "out")?;
        let mask = CartesianMask::generate(h, w, accel, center_fraction, seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SftkdMask(mask)));
        Ok(())
    })
}

/// Load a mask from the text format written by `sftkd_mask_save`.
///
/// # Safety
/// `path` must be a valid nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sftkd_mask_load(
    path: *const c_char,
    out: *mut *mut SftkdMask,
) -> SftkdStatus {
    guarded(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let mask = CartesianMask::load(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SftkdMask(mask)));
        Ok(())
    })
}

/// Save a mask to its text format.
///
/// # Safety
/// `mask` must be a live handle; `path` a valid nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sftkd_mask_save(
    mask: *const SftkdMask,
    path: *const c_char,
) -> SftkdStatus {
    guarded(|| {
        let mask = mask.as_ref().ok_or_else(|| null_arg("mask"))?;
        let path = path_arg(path, "path")?;
        mask.0.save(path).map_err(lib_err)
    })
}

/// Mask height, or 0 for a null handle.
///
/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sftkd_mask_h(mask: *const SftkdMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.h())
}

/// Mask width, or 0 for a null handle.
///
/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sftkd_mask_w(mask: *const SftkdMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.w())
}

/// Fraction of sampled rows, or -1.0 for a null handle.
///
/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sftkd_mask_sampled_fraction(mask: *const SftkdMask) -> f64 {
    mask.as_ref().map_or(-1.0, |m| m.0.sampled_fraction())
}

/// Release a mask handle (null is a no-op).
///
/// # Safety
/// `mask` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn sftkd_mask_free(mask: *mut SftkdMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

// ---------------------------------------------------------------------------
// models
// ---------------------------------------------------------------------------

/// Build a freshly initialized single-precision cascade model: `c` blocks of
/// `d` conv layers at the given hidden width, He-normal init derived from
/// `seed`, exact data-fidelity units.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sftkd_model_build(
    d: usize,
    c: usize,
    channels: usize,
    seed: u64,
    out: *mut *mut SftkdModel,
) -> SftkdStatus {
    guarded(|| {
        let out = out_arg(out, "out")?;
        let model = build_dccnn::<f32>(d, c, channels, seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SftkdModel(ModelImpl::F32(model))));
        Ok(())
    })
}

/// Load a cascade checkpoint (`<name>.toml` + `<name>.bin`); the stored
/// precision is preserved.
///
/// # Safety
/// `path` must be a valid nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sftkd_model_load(
    path: *const c_char,
    out: *mut *mut SftkdModel,
) -> SftkdStatus {
    guarded(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = match checkpoint_precision(path).map_err(lib_err)?.as_str() {
            "f32" => ModelImpl::F32(load_cascade::<f32>(path).map_err(lib_err)?.0),
            "f64" => ModelImpl::F64(load_cascade::<f64>(path).map_err(lib_err)?.0),
            other => {
                return Err((
                    SftkdStatus::FormatError,
                    format!("unsupported checkpoint precision {other:?}"),
                ))
            }
        };
        *out = Box::into_raw(Box::new(SftkdModel(inner)));
        Ok(())
    })
}

/// Save a model as a checkpoint; `stage` is a free-form label recorded in
/// the manifest.
///
/// # Safety
/// `model` must be a live handle; `path` and `stage` valid strings.
#[no_mangle]
pub unsafe extern "C" fn sftkd_model_save(
    model: *const SftkdModel,
    path: *const c_char,
    stage: *const c_char,
) -> SftkdStatus {
    guarded(|| {
        let model = model.as_ref().ok_or_else(|| null_arg("model"))?;
        let path = path_arg(path, "path")?;
        let stage = if stage.is_null() {
            "ffi"
        } else {
            CStr::from_ptr(stage).to_str().map_err(|_| {
                (SftkdStatus::InvalidArgument, "argument stage is not UTF-8".to_string())
            })?
        };
        match &model.0 {
            ModelImpl::F32(m) => save_cascade(m, path, stage).map_err(lib_err),
            ModelImpl::F64(m) => save_cascade(m, path, stage).map_err(lib_err),
        }
    })
}

/// Total parameter count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sftkd_model_param_count(model: *const SftkdModel) -> usize {
    model.as_ref().map_or(0, |m| match &m.0 {
        ModelImpl::F32(m) => m.param_count(),
        ModelImpl::F64(m) => m.param_count(),
    })
}

/// Conv layers per block, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sftkd_model_depth(model: *const SftkdModel) -> usize {
    model.as_ref().map_or(0, |m| match &m.0 {
        ModelImpl::F32(m) => m.depth(),
        ModelImpl::F64(m) => m.depth(),
    })
}

/// Cascade block count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sftkd_model_cascades(model: *const SftkdModel) -> usize {
    model.as_ref().map_or(0, |m| match &m.0 {
        ModelImpl::F32(m) => m.cascades(),
        ModelImpl::F64(m) => m.cascades(),
    })
}

/// Release a model handle (null is a no-op).
///
/// # Safety
/// `model` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn sftkd_model_free(model: *mut SftkdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---------------------------------------------------------------------------
// reconstruction
// ---------------------------------------------------------------------------

unsafe fn grid_from_interleaved<T: Scalar>(
    kspace: *const f64,
    h: usize,
    w: usize,
) -> ComplexGrid<T> {
    let raw = std::slice::from_raw_parts(kspace, 2 * h * w);
    let mut grid = ComplexGrid::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let i = 2 * (r * w + c);
            grid.set(r, c, num_complex::Complex::new(T::of_f64(raw[i]), T::of_f64(raw[i + 1])));
        }
    }
    grid
}

fn run_reconstruct<T: Scalar>(
    model: &CascadeModel<T>,
    mask: &CartesianMask,
    y: ComplexGrid<T>,
    out: &mut [f64],
) -> Result<(), (SftkdStatus, String)> {
    let image = reconstruct(model, &[y], mask).map_err(lib_err)?;
    for (slot, v) in out.iter_mut().zip(image.plane(0, 0)) {
        *slot = v.as_f64();
    }
    Ok(())
}

/// Reconstruct an image from undersampled k-space. `kspace` holds
/// `2 * h * w` doubles (re/im interleaved, row-major) for the mask's grid;
/// `out_image` receives `h * w` doubles.
///
/// # Safety
/// All pointers must be valid for the sizes implied by the mask.
#[no_mangle]
pub unsafe extern "C" fn sftkd_reconstruct(
    model: *const SftkdModel,
    mask: *const SftkdMask,
    kspace: *const f64,
    out_image: *mut f64,
) -> SftkdStatus {
    guarded(|| {
        let model = model.as_ref().ok_or_else(|| null_arg("model"))?;
        let mask = mask.as_ref().ok_or_else(|| null_arg("mask"))?;
        if kspace.is_null() {
            return Err(null_arg("kspace"));
        }
        if out_image.is_null() {
            return Err(null_arg("out_image"));
        }
        let (h, w) = (mask.0.h(), mask.0.w());
        let out = std::slice::from_raw_parts_mut(out_image, h * w);
        match &model.0 {
            ModelImpl::F32(m) => {
                run_reconstruct(m, &mask.0, grid_from_interleaved::<f32>(kspace, h, w), out)
            }
            ModelImpl::F64(m) => {
                run_reconstruct(m, &mask.0, grid_from_interleaved::<f64>(kspace, h, w), out)
            }
        }
    })
}

/// Apply the forward operator: FFT an image and keep the sampled rows.
/// `image` holds `h * w` doubles; `out_kspace` receives `2 * h * w` doubles
/// (re/im interleaved).
///
/// # Safety
/// All pointers must be valid for the sizes implied by the mask.
#[no_mangle]
pub unsafe extern "C" fn sftkd_simulate(
    mask: *const SftkdMask,
    image: *const f64,
    out_kspace: *mut f64,
) -> SftkdStatus {
    guarded(|| {
        let mask = mask.as_ref().ok_or_else(|| null_arg("mask"))?;
        if image.is_null() {
            return Err(null_arg("image"));
        }
        if out_kspace.is_null() {
            return Err(null_arg("out_kspace"));
        }
        let (h, w) = (mask.0.h(), mask.0.w());
        let image = std::slice::from_raw_parts(image, h * w);
        let y = forward_operator(image, &mask.0).map_err(lib_err)?;
        let out = std::slice::from_raw_parts_mut(out_kspace, 2 * h * w);
        for (i, z) in y.as_slice().iter().enumerate() {
            out[2 * i] = z.re;
            out[2 * i + 1] = z.im;
        }
        Ok(())
    })
}

/// Zero-filled baseline: inverse FFT of the measurements, real part.
/// `kspace` holds `2 * h * w` interleaved doubles; `out_image` receives
/// `h * w` doubles.
///
/// # Safety
/// All pointers must be valid for the sizes implied by the mask.
#[no_mangle]
pub unsafe extern "C" fn sftkd_zero_filled(
    mask: *const SftkdMask,
    kspace: *const f64,
    out_image: *mut f64,
) -> SftkdStatus {
    guarded(|| {
        let mask = mask.as_ref().ok_or_else(|| null_arg("mask"))?;
        if kspace.is_null() {
            return Err(null_arg("kspace"));
        }
        if out_image.is_null() {
            return Err(null_arg("out_image"));
        }
        let (h, w) = (mask.0.h(), mask.0.w());
        let y = grid_from_interleaved::<f64>(kspace, h, w);
        let image = zero_filled(&y);
        std::slice::from_raw_parts_mut(out_image, h * w).copy_from_slice(&image);
        Ok(())
    })
}

/// Peak signal-to-noise ratio of `pred` against `reference` (both `len`
/// doubles; peak is the reference maximum, result capped at 100 dB).
///
/// # Safety
/// `pred` and `reference` must hold `len` doubles; `out_db` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sftkd_psnr(
    pred: *const f64,
    reference: *const f64,
    len: usize,
    out_db: *mut f64,
) -> SftkdStatus {
    guarded(|| {
        if pred.is_null() {
            return Err(null_arg("pred"));
        }
        if reference.is_null() {
            return Err(null_arg("reference"));
        }
        let out = out_arg(out_db, "out_db")?;
        let pred = std::slice::from_raw_parts(pred, len);
        let reference = std::slice::from_raw_parts(reference, len);
        *out = sftkd::metrics::psnr(pred, reference).map_err(lib_err)?;
        Ok(())
    })
}
