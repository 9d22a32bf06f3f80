//! C ABI for the `ddic` library.
//!
//! Every fallible function returns a [`DdicStatus`]. On failure the message is
//! kept per thread and can be read with [`ddic_last_error_message`]. Models are
//! opaque [`DdicDenoiser`] handles created by [`ddic_denoiser_load`] and
//! released with [`ddic_denoiser_free`]. Images are row-major `double`
//! buffers of `height * width` values in the model's intensity range.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ddic::denoiser::{Checkpoint, Denoiser, NetworkDenoiser};
use ddic::metrics::{mutual_information, psnr, HistogramSpec};
use ddic::translate::{translate_ddib, translate_ddic, DdicConfig};
use ddic::{Error, ImageGrid, IntensityRange};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdicStatus {
    Ok = 0,
    /// Null pointer, zero size or a non-UTF-8 path.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Io = 4,
    Numeric = 5,
    Checkpoint = 6,
    NotDifferentiable = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// A trained noise predictor.
pub struct DdicDenoiser {
    inner: NetworkDenoiser,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> DdicStatus {
    match err {
        Error::Config(_) | Error::Index { .. } => DdicStatus::Config,
        Error::Shape { .. } | Error::Data(_) | Error::Histogram(_) | Error::ZeroDenominator(_) => DdicStatus::Data,
        Error::Io { .. } | Error::Format { .. } => DdicStatus::Io,
        Error::Checkpoint(_) => DdicStatus::Checkpoint,
        Error::NotDifferentiable => DdicStatus::NotDifferentiable,
        _ => DdicStatus::Numeric,
    }
}

struct Failure(DdicStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(DdicStatus::InvalidArgument, msg.to_string())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DdicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdicStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal error (panic)".into());
            DdicStatus::Internal
        }
    }
}

unsafe fn image_from(
    data: *const f64,
    height: usize,
    width: usize,
    range: IntensityRange,
) -> Result<ImageGrid, Failure> {
    if data.is_null() || height == 0 || width == 0 {
        return Err(invalid("image buffer is null or empty"));
    }
    let n = height
        .checked_mul(width)
        .ok_or_else(|| invalid("image size overflows"))?;
    let values = std::slice::from_raw_parts(data, n).to_vec();
    Ok(ImageGrid::new(height, width, values, range)?)
}

unsafe fn write_image(img: &ImageGrid, out: *mut f64) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("output buffer is null"));
    }
    std::slice::from_raw_parts_mut(out, img.len()).copy_from_slice(img.data());
    Ok(())
}

unsafe fn handle<'a>(p: *const DdicDenoiser) -> Result<&'a NetworkDenoiser, Failure> {
    p.as_ref()
        .map(|d| &d.inner)
        .ok_or_else(|| invalid("denoiser handle is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ddic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ddic_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model checkpoint (JSON) from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddic_denoiser_load(path: *const c_char, out: *mut *mut DdicDenoiser) -> DdicStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(invalid("null argument"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let inner = Checkpoint::load(path)?.denoiser()?;
        *out = Box::into_raw(Box::new(DdicDenoiser { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `den` must come from [`ddic_denoiser_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ddic_denoiser_free(den: *mut DdicDenoiser) {
    if !den.is_null() {
        drop(Box::from_raw(den));
    }
}

/// Input shape, diffusion step count and intensity range of a model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ddic_denoiser_info(
    den: *const DdicDenoiser,
    height: *mut usize,
    width: *mut usize,
    steps: *mut usize,
    range_lo: *mut f64,
    range_hi: *mut f64,
) -> DdicStatus {
    guard(|| {
        let d = handle(den)?;
        if height.is_null() || width.is_null() || steps.is_null() || range_lo.is_null() || range_hi.is_null() {
            return Err(invalid("null output pointer"));
        }
        let (h, w) = d.image_shape().expect("network models have a fixed shape");
        let r = d.normalization();
        *height = h;
        *width = w;
        *steps = d.schedule().steps();
        *range_lo = r.lo;
        *range_hi = r.hi;
        Ok(())
    })
}

/// Plain bridge translation: encode with `src`, decode with `dst`.
///
/// # Safety
/// `input` and `output` must each hold `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn ddic_translate_ddib(
    src: *const DdicDenoiser,
    dst: *const DdicDenoiser,
    height: usize,
    width: usize,
    input: *const f64,
    output: *mut f64,
) -> DdicStatus {
    guard(|| {
        let (s, d) = (handle(src)?, handle(dst)?);
        let x = image_from(input, height, width, d.normalization())?;
        write_image(&translate_ddib(&x, s, d)?, output)
    })
}

/// Correlation-guided translation with step size `lr` and an odd median
/// window `median_kernel`. `lr = 0` reproduces [`ddic_translate_ddib`].
///
/// # Safety
/// `input` and `output` must each hold `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn ddic_translate_ddic(
    src: *const DdicDenoiser,
    dst: *const DdicDenoiser,
    height: usize,
    width: usize,
    input: *const f64,
    lr: f64,
    median_kernel: usize,
    output: *mut f64,
) -> DdicStatus {
    guard(|| {
        let (s, d) = (handle(src)?, handle(dst)?);
        let x = image_from(input, height, width, d.normalization())?;
        let cfg = DdicConfig {
            lr,
            median_kernel,
            trace: false,
            ..DdicConfig::default()
        };
        write_image(&translate_ddic(&x, s, d, &cfg)?.image, output)
    })
}

/// Mutual information in bits with `bins` bins over each image's own range.
///
/// # Safety
/// `x` and `y` must each hold `height * width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ddic_mutual_information(
    x: *const f64,
    y: *const f64,
    height: usize,
    width: usize,
    bins: usize,
    out: *mut f64,
) -> DdicStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        let a = image_from(x, height, width, IntensityRange::UNIT)?;
        let b = image_from(y, height, width, IntensityRange::UNIT)?;
        let spec = HistogramSpec {
            bins,
            ..HistogramSpec::default()
        };
        *out = mutual_information(&a, &b, &spec)?;
        Ok(())
    })
}

/// PSNR in dB of the 8-bit quantizations; identical images give infinity.
/// Each image is quantized over `[range_lo, range_hi]`.
///
/// # Safety
/// `x` and `y` must each hold `height * width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ddic_psnr(
    x: *const f64,
    y: *const f64,
    height: usize,
    width: usize,
    range_lo: f64,
    range_hi: f64,
    out: *mut f64,
) -> DdicStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        let range = IntensityRange::new(range_lo, range_hi)?;
        let a = image_from(x, height, width, range)?;
        let b = image_from(y, height, width, range)?;
        *out = psnr(&a, &b)?;
        Ok(())
    })
}
