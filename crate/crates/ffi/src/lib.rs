//! C ABI over the octforge preprocessing primitives, the alignment distance and
//! a checkpoint-backed detector.
//!
//! Every function returns an [`OctfStatus`]. On failure the message is kept
//! per thread and can be read with [`octf_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use octforge::alignment::{mmd_distance, DomainBatch};
use octforge::harness::{predict_image, TrainedModel};
use octforge::manifest::Label;
use octforge::model::Detector;
use octforge::preprocess::{cdi_hf_energy, compute_cdi, compute_si, RgbImage};
use octforge::tensor::ParamStore;
use octforge::trainer::TrainState;
use octforge::{Error, Tensor};

/// Side of the square crops accepted by the CDI/SI entry points.
pub const OCTF_CROP: usize = 128;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OctfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Data = 4,
    Io = 5,
    Format = 6,
    NonFinite = 7,
    Invariant = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for OctfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => OctfStatus::InvalidArgument,
            Error::Shape { .. } => OctfStatus::Shape,
            Error::Data(_) => OctfStatus::Data,
            Error::Io { .. } => OctfStatus::Io,
            Error::Format(_) => OctfStatus::Format,
            Error::NonFinite { .. } => OctfStatus::NonFinite,
            Error::Invariant(_) => OctfStatus::Invariant,
        }
    }
}

/// Opaque detector loaded from a training checkpoint.
pub struct OctfDetector {
    detector: Detector,
    params: ParamStore<f32>,
}

/// Per-image result of [`octf_detector_predict`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OctfVerdict {
    /// 1 when any crop is classified fake.
    pub is_fake: i32,
    pub crops: u32,
    pub max_fake_probability: f32,
    pub mean_cdi_weight: f32,
    pub mean_si_weight: f32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(OctfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(OctfStatus::from(&e), e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OctfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OctfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            OctfStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(OctfStatus::NullPointer, format!("{name} is null"))
}

unsafe fn image_from_raw(rgb: *const u8, height: usize, width: usize) -> Result<RgbImage, Failure> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    let len = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Failure(OctfStatus::InvalidArgument, "image size overflows".into()))?;
    let pixels = std::slice::from_raw_parts(rgb, len).to_vec();
    Ok(RgbImage::new(height, width, pixels)?)
}

unsafe fn copy_out(values: &Tensor<f32>, out: *mut f32, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let data = values.data();
    if out_len < data.len() {
        return Err(Failure(
            OctfStatus::BufferTooSmall,
            format!("output holds {out_len} floats, {} needed", data.len()),
        ));
    }
    ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn octf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn octf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Channel-difference image of a 128x128 interleaved RGB crop, written as
/// three planes (R-G, B-G, R-B) of `128*128` floats.
///
/// # Safety
/// `rgb` must point to `height*width*3` bytes and `out` to `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn octf_compute_cdi(
    rgb: *const u8,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> OctfStatus {
    guard(|| {
        let img = image_from_raw(rgb, height, width)?;
        copy_out(compute_cdi(&img)?.tensor(), out, out_len)
    })
}

/// Min-max scaled, centered log spectrum of a 128x128 crop (`128*128` floats).
///
/// # Safety
/// `rgb` must point to `height*width*3` bytes and `out` to `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn octf_compute_si(
    rgb: *const u8,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> OctfStatus {
    guard(|| {
        let img = image_from_raw(rgb, height, width)?;
        copy_out(compute_si(&img)?.tensor(), out, out_len)
    })
}

/// High-frequency energy fraction of the R-G difference plane of an image.
///
/// # Safety
/// `rgb` must point to `height*width*3` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn octf_cdi_hf_energy(rgb: *const u8, height: usize, width: usize, out: *mut f64) -> OctfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let img = image_from_raw(rgb, height, width)?;
        *out = cdi_hf_energy(&img)?;
        Ok(())
    })
}

/// Mean-embedding distance between domains. `features` is row-major
/// `[rows, dim]`; `domains[i]` is the domain id of row `i`.
///
/// # Safety
/// `features` must hold `rows*dim` doubles, `domains` `rows` ids.
#[no_mangle]
pub unsafe extern "C" fn octf_mmd(
    features: *const f64,
    domains: *const u32,
    rows: usize,
    dim: usize,
    out: *mut f64,
) -> OctfStatus {
    guard(|| {
        if features.is_null() {
            return Err(null("features"));
        }
        if domains.is_null() {
            return Err(null("domains"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let len = rows
            .checked_mul(dim)
            .ok_or_else(|| Failure(OctfStatus::InvalidArgument, "feature size overflows".into()))?;
        let features = std::slice::from_raw_parts(features, len);
        let ids = std::slice::from_raw_parts(domains, rows);
        let mut grouped: std::collections::BTreeMap<u32, Vec<f64>> = Default::default();
        for (row, &id) in features.chunks(dim.max(1)).zip(ids) {
            grouped.entry(id).or_default().extend_from_slice(row);
        }
        let batches = grouped
            .into_iter()
            .map(|(id, data)| {
                let n = data.len() / dim.max(1);
                Ok(DomainBatch {
                    domain: id as usize,
                    features: Tensor::new(vec![n, dim], data)?,
                    labels: vec![Label::Real; n],
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        *out = mmd_distance(&batches)?;
        Ok(())
    })
}

/// Loads a checkpoint written by `octforge train`. Release with
/// [`octf_detector_free`].
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn octf_detector_load(path: *const c_char, out: *mut *mut OctfDetector) -> OctfStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(OctfStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (detector, state) = TrainState::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(OctfDetector { detector, params: state.params }));
        Ok(())
    })
}

/// # Safety
/// `detector` must come from [`octf_detector_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn octf_detector_free(detector: *mut OctfDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Classifies an RGB image of any size >= 128x128 with the any-crop rule.
///
/// # Safety
/// `detector` must be live, `rgb` must hold `height*width*3` bytes and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn octf_detector_predict(
    detector: *const OctfDetector,
    rgb: *const u8,
    height: usize,
    width: usize,
    out: *mut OctfVerdict,
) -> OctfStatus {
    guard(|| {
        let det = detector.as_ref().ok_or_else(|| null("detector"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let img = image_from_raw(rgb, height, width)?;
        let model = TrainedModel { detector: &det.detector, params: &det.params };
        let v = predict_image(&img, &model)?;
        *out = OctfVerdict {
            is_fake: i32::from(v.label == Label::Fake),
            crops: v.crops.len() as u32,
            max_fake_probability: v.crops.iter().map(|c| c.fake_probability).fold(0.0, f32::max),
            mean_cdi_weight: v.weights.0 as f32,
            mean_si_weight: v.weights.1 as f32,
        };
        Ok(())
    })
}
