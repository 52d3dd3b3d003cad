//! C ABI over the core library.
//!
//! Objects cross the boundary as opaque handles created by `ebd_*_new` /
//! `ebd_*_load` style functions and released with the matching `_free`.
//! Every fallible call returns an [`EbdStatus`]; on failure a description is
//! available from [`ebd_last_error`] on the same thread until the next call.
//! Panics are caught and reported as `EBD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ebdeconv::error::Error;
use ebdeconv::experiment::{self, GradcheckOptions};
use ebdeconv::image::{Decibels, ImageGrid};
use ebdeconv::kernels::{BlurModel, KernelFamily, DEFAULT_SUPPORT};
use ebdeconv::map::{map_estimate, MapConfig};
use ebdeconv::params::HyperParams;
use ebdeconv::prior::PriorSpec;
use ebdeconv::sapg::{default_domain, sapg_calibrate, Calibration, SapgConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EbdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EbdFamily {
    Gaussian = 0,
    Laplace = 1,
    Moffat = 2,
}

impl From<EbdFamily> for KernelFamily {
    fn from(f: EbdFamily) -> Self {
        match f {
            EbdFamily::Gaussian => KernelFamily::Gaussian,
            EbdFamily::Laplace => KernelFamily::Laplace,
            EbdFamily::Moffat => KernelFamily::Moffat,
        }
    }
}

/// Grayscale image, row-major `f64`.
pub struct EbdImage(ImageGrid);

/// Result of a calibration run.
pub struct EbdCalibration {
    inner: Calibration,
    config: SapgConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EbdStatus {
    match e {
        Error::Config(_) => EbdStatus::Config,
        Error::NonFinite { .. } | Error::UnstableStep { .. } => EbdStatus::Numerical,
        Error::Io(_) | Error::Decode(_) | Error::Json(_) | Error::Csv(_) => EbdStatus::Io,
        Error::InvalidParameter(_) | Error::DimensionMismatch { .. } | Error::ZeroEnergy(_) => EbdStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EbdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EbdStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            EbdStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            EbdStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn c_path<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidParameter("path is not valid UTF-8".into())))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Last error message on this thread, or NULL. Valid until the next call
/// into the library from the same thread.
#[no_mangle]
pub extern "C" fn ebd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copies `rows * cols` values from `data` into a new image.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ebd_image_new(rows: usize, cols: usize, data: *const f64, out: *mut *mut EbdImage) -> EbdStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidParameter("image size overflows".into()))?;
        let pixels = slice(data, n, "data")?.to_vec();
        store(out, EbdImage(ImageGrid::new(rows, cols, pixels)?))
    })
}

/// Reads a PNG, PGM or `.npy` file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ebd_image_load(path: *const c_char, out: *mut *mut EbdImage) -> EbdStatus {
    guard(|| store(out, EbdImage(ebdeconv::io::load_image(c_path(path)?)?)))
}

/// Writes the image; the format follows the extension.
///
/// # Safety
/// `image` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ebd_image_save(image: *const EbdImage, path: *const c_char) -> EbdStatus {
    guard(|| {
        let img = non_null(image, "image")?;
        Ok(ebdeconv::io::save_image(&img.0, c_path(path)?)?)
    })
}

/// # Safety
/// `image` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn ebd_image_rows(image: *const EbdImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.rows())
}

/// # Safety
/// `image` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn ebd_image_cols(image: *const EbdImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.cols())
}

/// Copies the pixels into `out`, which must hold `len >= rows * cols` values.
///
/// # Safety
/// `image` must be a live handle and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ebd_image_copy_data(image: *const EbdImage, out: *mut f64, len: usize) -> EbdStatus {
    guard(|| {
        let img = non_null(image, "image")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if len < img.0.len() {
            return Err(Error::InvalidParameter(format!("buffer holds {len} values, image has {}", img.0.len())).into());
        }
        std::slice::from_raw_parts_mut(out, img.0.len()).copy_from_slice(img.0.as_slice());
        Ok(())
    })
}

/// # Safety
/// `image` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ebd_image_free(image: *mut EbdImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Blurs `x` with the given kernel and adds Gaussian noise at `bsnr_db`
/// (pass `INFINITY` for no noise). `sigma2_out` may be NULL.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `y_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ebd_degrade(
    x: *const EbdImage,
    family: EbdFamily,
    alpha: *const f64,
    n_alpha: usize,
    bsnr_db: f64,
    seed: u64,
    y_out: *mut *mut EbdImage,
    sigma2_out: *mut f64,
) -> EbdStatus {
    guard(|| {
        let x = non_null(x, "x")?;
        let alpha = slice(alpha, n_alpha, "alpha")?;
        let db = if bsnr_db == f64::INFINITY {
            Decibels::Unbounded
        } else {
            Decibels::Finite(bsnr_db)
        };
        let d = experiment::degrade(&x.0, family.into(), alpha, db, seed)?;
        if !sigma2_out.is_null() {
            *sigma2_out = d.sigma2;
        }
        store(y_out, EbdImage(d.y))
    })
}

/// Calibrates `(theta, alpha, sigma2)` from `y` with a TV prior.
/// `config_json` is a serialized SAPG configuration, or NULL for the desk
/// preset of `family`; `seed` overrides the configured seed.
///
/// # Safety
/// `y` must be a live handle, `config_json` NULL or NUL-terminated, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ebd_calibrate(
    y: *const EbdImage,
    family: EbdFamily,
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut EbdCalibration,
) -> EbdStatus {
    guard(|| {
        let y = non_null(y, "y")?;
        let family: KernelFamily = family.into();
        let mut config = if config_json.is_null() {
            SapgConfig::desk(family)
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Error::Config("config is not valid UTF-8".into()))?;
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        config.seed = seed;
        config.validate()?;
        let domain = default_domain(family, &y.0, experiment::DEFAULT_BSNR_RANGE[0], experiment::DEFAULT_BSNR_RANGE[1])?;
        let inner = sapg_calibrate(&y.0, family, &domain, &PriorSpec::tv(config.theta0, 1.0), &config).map_err(|f| f.error)?;
        store(out, EbdCalibration { inner, config })
    })
}

/// Writes the averaged estimates. `alpha` must hold `alpha_cap` values;
/// `n_alpha` receives the family's parameter count.
///
/// # Safety
/// `cal` must be a live handle and every output pointer writable.
#[no_mangle]
pub unsafe extern "C" fn ebd_calibration_estimate(
    cal: *const EbdCalibration,
    theta: *mut f64,
    alpha: *mut f64,
    alpha_cap: usize,
    n_alpha: *mut usize,
    sigma2: *mut f64,
) -> EbdStatus {
    guard(|| {
        let cal = non_null(cal, "calibration")?;
        if theta.is_null() || sigma2.is_null() || n_alpha.is_null() || (alpha.is_null() && alpha_cap > 0) {
            return Err(Failure::Null("output"));
        }
        let est = &cal.inner.estimate;
        *n_alpha = est.alpha.len();
        if alpha_cap < est.alpha.len() {
            return Err(Error::InvalidParameter(format!("alpha buffer holds {alpha_cap}, need {}", est.alpha.len())).into());
        }
        std::slice::from_raw_parts_mut(alpha, est.alpha.len()).copy_from_slice(&est.alpha);
        *theta = est.theta;
        *sigma2 = est.sigma2;
        Ok(())
    })
}

/// JSON summary of the run; release with [`ebd_string_free`].
///
/// # Safety
/// `cal` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ebd_calibration_summary_json(cal: *const EbdCalibration, out: *mut *mut c_char) -> EbdStatus {
    guard(|| {
        let cal = non_null(cal, "calibration")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let text = serde_json::to_string(&cal.inner.summary(&cal.config)).map_err(Error::from)?;
        *out = CString::new(text).expect("JSON has no NULs").into_raw();
        Ok(())
    })
}

/// Number of SAPG iterations recorded in the trace.
///
/// # Safety
/// `cal` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn ebd_calibration_iterations(cal: *const EbdCalibration) -> usize {
    cal.as_ref().map_or(0, |c| c.inner.trace.len())
}

/// # Safety
/// `cal` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ebd_calibration_free(cal: *mut EbdCalibration) {
    if !cal.is_null() {
        drop(Box::from_raw(cal));
    }
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ebd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// TV-regularized MAP estimate for fixed parameters.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ebd_deconvolve(
    y: *const EbdImage,
    family: EbdFamily,
    theta: f64,
    alpha: *const f64,
    n_alpha: usize,
    sigma2: f64,
    out: *mut *mut EbdImage,
) -> EbdStatus {
    guard(|| {
        let y = non_null(y, "y")?;
        let alpha = slice(alpha, n_alpha, "alpha")?.to_vec();
        let model = BlurModel::new(family.into(), alpha.clone(), DEFAULT_SUPPORT, y.0.dims())?;
        let params = HyperParams::new(theta, alpha, sigma2);
        let r = map_estimate(&y.0, &params, &model, &PriorSpec::tv(theta, 1.0), &MapConfig::default())?;
        store(out, EbdImage(r.image))
    })
}

/// Finite-difference check of the analytic gradients on a `size x size`
/// random instance. `pass` receives 1 or 0.
///
/// # Safety
/// `alpha` must hold `n_alpha` values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ebd_gradcheck(
    family: EbdFamily,
    alpha: *const f64,
    n_alpha: usize,
    size: usize,
    seed: u64,
    max_rel_error: *mut f64,
    pass: *mut c_int,
) -> EbdStatus {
    guard(|| {
        let alpha = slice(alpha, n_alpha, "alpha")?;
        if max_rel_error.is_null() || pass.is_null() {
            return Err(Failure::Null("output"));
        }
        let opts = GradcheckOptions {
            size,
            seed,
            ..GradcheckOptions::default()
        };
        let r = experiment::gradcheck(family.into(), alpha, &opts)?;
        *max_rel_error = r.max_rel_error;
        *pass = c_int::from(r.pass);
        Ok(())
    })
}
