//! C API over the cropweed NDVI, automatic labelling and inference routines.
//!
//! Functions return `CW_OK` (0) or an error code; the message of the last
//! failure on the calling thread is available through
//! [`cw_last_error_message`]. Images are row-major `double` buffers of
//! `width * height` samples; multi-band inputs stack whole planes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cropweed::autolabel::{generate_mask, AutolabelConfig};
use cropweed::imgcore::{compute_ndvi, Band, BandImage, MultispectralFrame};
use cropweed::net::{checkpoint, infer, input_bands, Network};
use cropweed::Error;

/// Success.
pub const CW_OK: i32 = 0;
/// A required pointer argument was null.
pub const CW_ERR_NULL_POINTER: i32 = 1;
/// An argument was out of range or not valid UTF-8.
pub const CW_ERR_INVALID_ARGUMENT: i32 = 2;
/// The library panicked; the handle involved should be discarded.
pub const CW_ERR_PANIC: i32 = 3;
/// Number of classes in every probability output.
pub const CW_NUM_CLASSES: usize = 3;

/// Opaque trained network.
pub struct CwNetwork {
    inner: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(i32);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = e.code();
        set_error(format!("{}: {e}", e.kind()));
        Failure(code)
    }
}

fn fail(code: i32, msg: impl Into<String>) -> Failure {
    set_error(msg.into());
    Failure(code)
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CW_OK
        }
        Ok(Err(Failure(code))) => code,
        Err(_) => {
            set_error("internal panic".into());
            CW_ERR_PANIC
        }
    }
}

fn pixels(width: u32, height: u32) -> Result<usize, Failure> {
    if width == 0 || height == 0 {
        return Err(fail(CW_ERR_INVALID_ARGUMENT, "width and height must be positive"));
    }
    Ok(width as usize * height as usize)
}

/// # Safety
/// `ptr` must be null or valid for reads of `len` values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(fail(CW_ERR_NULL_POINTER, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for writes of `len` values.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(fail(CW_ERR_NULL_POINTER, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// NUL-terminated) and returns its full length in bytes, or 0 if the last
/// call succeeded.
///
/// # Safety
/// `buf` must be null or valid for writes of `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cw_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// NDVI of co-registered NIR and Red reflectance, each `width * height`
/// samples, written to `out` in [-1, 1].
///
/// # Safety
/// `nir`, `red` and `out` must each hold `width * height` doubles.
#[no_mangle]
pub unsafe extern "C" fn cw_ndvi(
    nir: *const f64,
    red: *const f64,
    width: u32,
    height: u32,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let n = pixels(width, height)?;
        let nir = BandImage::new(width, height, Band::Nir, slice(nir, n, "nir")?.to_vec())?;
        let red = BandImage::new(width, height, Band::Red, slice(red, n, "red")?.to_vec())?;
        let out = slice_mut(out, n, "out")?;
        out.copy_from_slice(compute_ndvi(&nir, &red)?.data());
        Ok(())
    })
}

/// Automatic label mask from an NDVI image: vegetation blobs of at least
/// `min_blob_pixels` become `vegetation_class` (1 crop, 2 weed), everything
/// else 0. Other settings use the library defaults.
///
/// # Safety
/// `ndvi` must hold `width * height` doubles and `labels` as many bytes.
#[no_mangle]
pub unsafe extern "C" fn cw_autolabel(
    ndvi: *const f64,
    width: u32,
    height: u32,
    vegetation_class: u8,
    min_blob_pixels: usize,
    labels: *mut u8,
) -> i32 {
    guard(|| {
        let n = pixels(width, height)?;
        let img = BandImage::new(width, height, Band::Ndvi, slice(ndvi, n, "ndvi")?.to_vec())?;
        let cfg = AutolabelConfig {
            vegetation_class,
            min_blob_pixels,
            ..AutolabelConfig::default()
        };
        cfg.validate()?;
        let mask = generate_mask(&img, &cfg)?;
        slice_mut(labels, n, "labels")?.copy_from_slice(mask.labels());
        Ok(())
    })
}

/// Loads a checkpoint written by the `train` command. Returns null on
/// failure; release with [`cw_network_free`].
///
/// # Safety
/// `path` must be null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cw_network_load(path: *const c_char) -> *mut CwNetwork {
    let mut handle = std::ptr::null_mut();
    guard(|| {
        if path.is_null() {
            return Err(fail(CW_ERR_NULL_POINTER, "path is null"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(CW_ERR_INVALID_ARGUMENT, "path is not UTF-8"))?;
        let inner = checkpoint::load(PathBuf::from(path))?;
        handle = Box::into_raw(Box::new(CwNetwork { inner }));
        Ok(())
    });
    handle
}

/// Releases a network. Null is ignored.
///
/// # Safety
/// `net` must be null or a handle from [`cw_network_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cw_network_free(net: *mut CwNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of input planes the network expects (1: NIR; 2: NIR, Red;
/// 3: NIR, Red, NDVI), or 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cw_network_in_channels(net: *const CwNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.inner.config().in_channels)
}

/// Per-pixel class probabilities and labels for one frame.
///
/// `bands` holds `channels` planes of `width * height` reflectance values in
/// the order reported by [`cw_network_in_channels`]. `probs` receives
/// `width * height * CW_NUM_CLASSES` values, pixel-major; `labels` (may be
/// null) receives the most probable class per pixel.
///
/// # Safety
/// `net` must be a live handle and the buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn cw_network_infer(
    net: *const CwNetwork,
    bands: *const f64,
    channels: usize,
    width: u32,
    height: u32,
    probs: *mut f64,
    labels: *mut u8,
) -> i32 {
    guard(|| {
        let net = net
            .as_ref()
            .ok_or_else(|| fail(CW_ERR_NULL_POINTER, "network is null"))?;
        let expected = net.inner.config().in_channels;
        if channels != expected {
            return Err(fail(
                CW_ERR_INVALID_ARGUMENT,
                format!("network expects {expected} channels, got {channels}"),
            ));
        }
        let n = pixels(width, height)?;
        let data = slice(bands, n * channels, "bands")?;
        let planes = input_bands(channels)?
            .into_iter()
            .zip(data.chunks_exact(n))
            .map(|(b, d)| BandImage::new(width, height, b, d.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let frame = MultispectralFrame::new("ffi", planes)?;
        let pm = infer(&frame, &net.inner)?;
        slice_mut(probs, n * CW_NUM_CLASSES, "probs")?.copy_from_slice(pm.probs());
        if !labels.is_null() {
            slice_mut(labels, n, "labels")?.copy_from_slice(pm.argmax_labels().labels());
        }
        Ok(())
    })
}
