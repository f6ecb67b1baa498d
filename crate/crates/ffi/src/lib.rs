//! C ABI over the `sada` library.
//!
//! Conventions:
//! - every fallible function returns a [`SadaStatus`]; on failure a message
//!   is available from [`sada_last_error_message`] on the same thread;
//! - objects are opaque handles created by `*_load` / `sada_decompose` and
//!   released by the matching `*_free` (null is accepted and ignored);
//! - images are `channels x height x width` doubles, channel-major, values
//!   nominally in `[0, 1]`; output buffers are caller-allocated and their
//!   length is passed explicitly and checked;
//! - panics never cross the boundary; they surface as `SADA_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sada::augment::{augment, AugmentationConfig};
use sada::consistency::js_divergence;
use sada::model::{load_checkpoint, ConvNet, ModelOracle};
use sada::sensitivity::{map_l1_summary, SensitivityMap};
use sada::spectral::{basis_image, decompose, reconstruct, Image, Shape, SpectrumPair};
use sada::SadaError;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SadaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    ShapeMismatch = 3,
    /// Missing file, bad configuration or missing sensitivity map.
    Config = 4,
    Io = 5,
    Parse = 6,
    /// Output buffer length differs from the required length.
    BufferSize = 7,
    Runtime = 8,
    Panic = 9,
}

/// Amplitude and phase spectra of one image.
pub struct SadaSpectrum(SpectrumPair);

/// A loaded ConvNet checkpoint.
pub struct SadaModel(ConvNet);

/// A loaded sensitivity map.
pub struct SadaMap(SensitivityMap);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Status(SadaStatus, String),
    Sada(SadaError),
}

impl From<SadaError> for Failure {
    fn from(e: SadaError) -> Self {
        Failure::Sada(e)
    }
}

fn status_of(e: &SadaError) -> SadaStatus {
    match e {
        _ if e.is_config() => SadaStatus::Config,
        SadaError::InvalidInput(_) | SadaError::FrequencyOutOfRange { .. } | SadaError::EmptyDataset => {
            SadaStatus::InvalidInput
        }
        SadaError::ShapeMismatch { .. } => SadaStatus::ShapeMismatch,
        SadaError::Io { .. } => SadaStatus::Io,
        SadaError::Parse { .. } | SadaError::Json(_) | SadaError::Csv(_) => SadaStatus::Parse,
        _ => SadaStatus::Runtime,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SadaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SadaStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Sada(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            SadaStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(SadaStatus::NullPointer, format!("{what} is null"))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), Failure> {
    if got != want {
        return Err(Failure::Status(SadaStatus::BufferSize, format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

/// # Safety
/// `ptr` must be null or point to `len` readable doubles.
unsafe fn input<'a>(what: &str, ptr: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or point to `len` writable doubles.
unsafe fn output<'a>(what: &str, ptr: *mut f64, len: usize) -> Result<&'a mut [f64], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// `ptr` must be null or a valid handle pointer.
unsafe fn handle<'a, T>(what: &str, ptr: *const T) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `ptr` must be null or a nul-terminated string.
unsafe fn path_arg<'a>(what: &str, ptr: *const c_char) -> Result<&'a Path, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::Status(SadaStatus::InvalidInput, format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

fn shape(channels: usize, height: usize, width: usize) -> Result<Shape, Failure> {
    let s = Shape::new(channels, height, width);
    s.validate()?;
    Ok(s)
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn sada_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Amplitude/phase decomposition of an image of `channels*height*width`
/// pixels. The handle in `*out` must be released with [`sada_spectrum_free`].
///
/// # Safety
/// `pixels` must point to `channels*height*width` doubles; `out` must be a
/// writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sada_decompose(
    pixels: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut *mut SadaSpectrum,
) -> SadaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = shape(channels, height, width)?;
        let data = input("pixels", pixels, shape.len())?;
        let spec = decompose(&Image::new(shape, data.to_vec())?)?;
        *out = Box::into_raw(Box::new(SadaSpectrum(spec)));
        Ok(())
    })
}

/// # Safety
/// `spectrum` must be null or a handle from [`sada_decompose`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sada_spectrum_free(spectrum: *mut SadaSpectrum) {
    if !spectrum.is_null() {
        drop(Box::from_raw(spectrum));
    }
}

/// Writes `channels*height*width` amplitudes (centered layout) to `out`.
///
/// # Safety
/// `spectrum` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sada_spectrum_amplitude(
    spectrum: *const SadaSpectrum,
    out: *mut f64,
    len: usize,
) -> SadaStatus {
    guard(|| {
        let s = &handle("spectrum", spectrum)?.0;
        check_len("out", len, s.amplitude.len())?;
        output("out", out, len)?.copy_from_slice(&s.amplitude);
        Ok(())
    })
}

/// Writes the phases (radians) to `out`.
///
/// # Safety
/// `spectrum` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sada_spectrum_phase(spectrum: *const SadaSpectrum, out: *mut f64, len: usize) -> SadaStatus {
    guard(|| {
        let s = &handle("spectrum", spectrum)?.0;
        check_len("out", len, s.phase.len())?;
        output("out", out, len)?.copy_from_slice(&s.phase);
        Ok(())
    })
}

/// Replaces the amplitudes. Values must be finite and nonnegative, and
/// conjugate bins must stay equal for the reconstruction to be exact.
///
/// # Safety
/// `spectrum` must be a live handle; `amplitude` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sada_spectrum_set_amplitude(
    spectrum: *mut SadaSpectrum,
    amplitude: *const f64,
    len: usize,
) -> SadaStatus {
    guard(|| {
        let s = &mut spectrum.as_mut().ok_or_else(|| null("spectrum"))?.0;
        check_len("amplitude", len, s.amplitude.len())?;
        let a = input("amplitude", amplitude, len)?;
        if let Some(v) = a.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Failure::Status(SadaStatus::InvalidInput, format!("amplitude {v} is not finite and >= 0")));
        }
        s.amplitude.copy_from_slice(a);
        Ok(())
    })
}

/// Inverse transform of the spectrum into `out` (`channels*height*width`
/// doubles, not clamped).
///
/// # Safety
/// `spectrum` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sada_reconstruct(spectrum: *const SadaSpectrum, out: *mut f64, len: usize) -> SadaStatus {
    guard(|| {
        let s = &handle("spectrum", spectrum)?.0;
        check_len("out", len, s.shape.len())?;
        let img = reconstruct(s)?;
        output("out", out, len)?.copy_from_slice(img.data());
        Ok(())
    })
}

/// Unit-norm Fourier basis image of centered frequency `(i, j)` on a
/// `height x width` grid, written to `out` (`height*width` doubles).
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sada_basis_image(
    i: i64,
    j: i64,
    height: usize,
    width: usize,
    out: *mut f64,
    len: usize,
) -> SadaStatus {
    guard(|| {
        shape(1, height, width)?;
        check_len("out", len, height * width)?;
        let b = basis_image(i, j, height, width)?;
        output("out", out, len)?.copy_from_slice(&b.pixels);
        Ok(())
    })
}

/// Jensen-Shannon divergence (natural log) of `n_dists` probability vectors
/// of `n_classes` entries each, stored row-major in `probs`.
///
/// # Safety
/// `probs` must hold `n_dists*n_classes` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sada_js_divergence(
    probs: *const f64,
    n_dists: usize,
    n_classes: usize,
    out: *mut f64,
) -> SadaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n_classes == 0 {
            return Err(Failure::Status(SadaStatus::InvalidInput, "n_classes must be positive".into()));
        }
        let p = input("probs", probs, n_dists * n_classes)?;
        let rows: Vec<&[f64]> = p.chunks(n_classes).collect();
        *out = js_divergence(&rows)?;
        Ok(())
    })
}

/// Loads a checkpoint written by `sada train`.
///
/// # Safety
/// `path` must be a nul-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sada_model_load(path: *const c_char, out: *mut *mut SadaModel) -> SadaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_checkpoint(path_arg("path", path)?)?;
        *out = Box::into_raw(Box::new(SadaModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`sada_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sada_model_free(model: *mut SadaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input shape and class count of a model.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sada_model_info(
    model: *const SadaModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
) -> SadaStatus {
    guard(|| {
        let m = &handle("model", model)?.0;
        if channels.is_null() || height.is_null() || width.is_null() || classes.is_null() {
            return Err(null("an output pointer"));
        }
        let s = m.input_shape();
        (*channels, *height, *width, *classes) = (s.channels, s.height, s.width, m.num_classes());
        Ok(())
    })
}

fn images_from(m: &ConvNet, data: &[f64], n: usize) -> Result<Vec<Image>, Failure> {
    let s = m.input_shape();
    data.chunks(s.len()).take(n).map(|c| Ok(Image::new(s, c.to_vec())?)).collect()
}

/// Class probabilities of `n_images` images into `out`
/// (`n_images*classes` doubles, row-major).
///
/// # Safety
/// `model` must be a live handle; `pixels` must hold `n_images` images of
/// the model's input size; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sada_model_predict_proba(
    model: *const SadaModel,
    pixels: *const f64,
    n_images: usize,
    out: *mut f64,
    len: usize,
) -> SadaStatus {
    guard(|| {
        let m = &handle("model", model)?.0;
        check_len("out", len, n_images * m.num_classes())?;
        let data = input("pixels", pixels, n_images * m.input_shape().len())?;
        let images = images_from(m, data, n_images)?;
        let refs: Vec<&Image> = images.iter().collect();
        let out = output("out", out, len)?;
        for (row, p) in out.chunks_mut(m.num_classes()).zip(m.predict_proba(&refs)?) {
            row.copy_from_slice(&p);
        }
        Ok(())
    })
}

/// Cross-entropy of one image for `label` and its gradient with respect to
/// the pixels.
///
/// # Safety
/// `model` must be a live handle; `pixels` and `grad` must hold one image
/// (`len` doubles); `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sada_model_pixel_gradient(
    model: *const SadaModel,
    pixels: *const f64,
    label: usize,
    loss: *mut f64,
    grad: *mut f64,
    len: usize,
) -> SadaStatus {
    guard(|| {
        let m = &handle("model", model)?.0;
        if loss.is_null() {
            return Err(null("loss"));
        }
        check_len("grad", len, m.input_shape().len())?;
        let images = images_from(m, input("pixels", pixels, len)?, 1)?;
        let g = m.loss_and_gradient(&[&images[0]], &[label])?.pop().expect("one result");
        *loss = g.loss;
        output("grad", grad, len)?.copy_from_slice(g.gradient.data());
        Ok(())
    })
}

/// Loads `<dir>/<stem>.csv` and its JSON sidecar.
///
/// # Safety
/// `dir` and `stem` must be nul-terminated UTF-8 strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sada_map_load(dir: *const c_char, stem: *const c_char, out: *mut *mut SadaMap) -> SadaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let stem = path_arg("stem", stem)?.to_string_lossy().into_owned();
        let map = SensitivityMap::load(path_arg("dir", dir)?, &stem)?;
        *out = Box::into_raw(Box::new(SadaMap(map)));
        Ok(())
    })
}

/// # Safety
/// `map` must be null or a handle from [`sada_map_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sada_map_free(map: *mut SadaMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Grid size, values (row-major, `height*width`) and l1 summary of a map.
/// `values` may be null to query only the size and summary.
///
/// # Safety
/// `map` must be a live handle; non-null pointers must be writable, and
/// `values` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sada_map_values(
    map: *const SadaMap,
    height: *mut usize,
    width: *mut usize,
    l1: *mut f64,
    values: *mut f64,
    len: usize,
) -> SadaStatus {
    guard(|| {
        let m = &handle("map", map)?.0;
        if height.is_null() || width.is_null() || l1.is_null() {
            return Err(null("an output pointer"));
        }
        (*height, *width, *l1) = (m.values.height, m.values.width, map_l1_summary(m));
        if !values.is_null() {
            check_len("values", len, m.values.values.len())?;
            output("values", values, len)?.copy_from_slice(&m.values.values);
        }
        Ok(())
    })
}

/// One SADA augmentation of an image with the given hyperparameters
/// (random init `epsilon`, step `delta`, at most `steps` steps), seeded by
/// `seed`. Writes the augmented image to `out` and whether the model's
/// prediction changed to `prediction_changed` (0 or 1).
///
/// # Safety
/// Handles must be live; `pixels` and `out` must hold one image (`len`
/// doubles); `prediction_changed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sada_augment(
    model: *const SadaModel,
    map: *const SadaMap,
    pixels: *const f64,
    label: usize,
    epsilon: f64,
    delta: f64,
    steps: usize,
    seed: u64,
    out: *mut f64,
    len: usize,
    prediction_changed: *mut i32,
) -> SadaStatus {
    guard(|| {
        let m = &handle("model", model)?.0;
        let s = &handle("map", map)?.0;
        if prediction_changed.is_null() {
            return Err(null("prediction_changed"));
        }
        check_len("out", len, m.input_shape().len())?;
        let images = images_from(m, input("pixels", pixels, len)?, 1)?;
        let cfg = AugmentationConfig { epsilon, delta, steps, ..AugmentationConfig::with_split(1, 0) };
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (img, trace) = augment(&images[0], label, m, &s.values, &cfg, &mut rng)?;
        output("out", out, len)?.copy_from_slice(img.data());
        *prediction_changed = trace.prediction_changed as i32;
        Ok(())
    })
}
