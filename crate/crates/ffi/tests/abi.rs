use std::ffi::{CStr, CString};
use std::ptr;

use octforge::model::ModelConfig;
use octforge::preprocess::{cdi_hf_energy, compute_cdi, RgbImage};
use octforge::trainer::{TrainConfig, TrainState};
use octforge_ffi::*;

fn noisy(h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(h, w, |r, c| {
        let v = (r * 131 + c * 71 + r * c) % 256;
        [v as u8, (255 - v) as u8, ((v * 3) % 256) as u8]
    })
}

fn last_error() -> String {
    let p = octf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn cdi_matches_library() {
    let img = noisy(128, 128);
    let mut out = vec![0f32; 3 * 128 * 128];
    let st = unsafe { octf_compute_cdi(img.pixels().as_ptr(), 128, 128, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, OctfStatus::Ok);
    assert_eq!(out, compute_cdi(&img).unwrap().tensor().data());

    let mut hf = 0.0;
    assert_eq!(unsafe { octf_cdi_hf_energy(img.pixels().as_ptr(), 128, 128, &mut hf) }, OctfStatus::Ok);
    assert_eq!(hf, cdi_hf_energy(&img).unwrap());

    let mut si = vec![0f32; 128 * 128];
    assert_eq!(unsafe { octf_compute_si(img.pixels().as_ptr(), 128, 128, si.as_mut_ptr(), si.len()) }, OctfStatus::Ok);
    assert!(si.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn errors_set_status_and_message() {
    let img = noisy(64, 64);
    let mut out = vec![0f32; 3 * 128 * 128];
    let st = unsafe { octf_compute_cdi(img.pixels().as_ptr(), 64, 64, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, OctfStatus::Shape);
    assert!(!last_error().is_empty());

    let big = noisy(128, 128);
    let st = unsafe { octf_compute_cdi(big.pixels().as_ptr(), 128, 128, out.as_mut_ptr(), 10) };
    assert_eq!(st, OctfStatus::BufferTooSmall);

    let st = unsafe { octf_compute_cdi(ptr::null(), 128, 128, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, OctfStatus::NullPointer);
    assert!(last_error().contains("rgb"));

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { octf_detector_load(missing.as_ptr(), &mut det) }, OctfStatus::Io);
    assert!(det.is_null());
}

#[test]
fn mmd_closed_form() {
    // Two domains with means 0 and (1, 1): squared distance 2.
    let features = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    let domains = [4u32, 4, 9, 9];
    let mut out = -1.0;
    assert_eq!(unsafe { octf_mmd(features.as_ptr(), domains.as_ptr(), 4, 2, &mut out) }, OctfStatus::Ok);
    assert!((out - 2.0).abs() < 1e-12);

    let one = [7u32; 4];
    assert_eq!(unsafe { octf_mmd(features.as_ptr(), one.as_ptr(), 4, 2, &mut out) }, OctfStatus::InvalidArgument);
}

#[test]
fn detector_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let (_, state) = TrainState::fresh(ModelConfig::default(), &TrainConfig::default()).unwrap();
    state.save(&path).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { octf_detector_load(cpath.as_ptr(), &mut det) }, OctfStatus::Ok);
    let img = noisy(200, 256);
    let mut v = OctfVerdict::default();
    let st = unsafe { octf_detector_predict(det, img.pixels().as_ptr(), 200, 256, &mut v) };
    assert_eq!(st, OctfStatus::Ok);
    assert_eq!(v.crops, 4);
    assert!((v.mean_cdi_weight + v.mean_si_weight - 1.0).abs() < 1e-5);
    assert!((0.0..=1.0).contains(&v.max_fake_probability));
    assert_eq!(v.is_fake == 1, v.max_fake_probability > 0.5);
    unsafe { octf_detector_free(det) };
    unsafe { octf_detector_free(ptr::null_mut()) };
}

#[test]
fn header_declares_exports() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/octforge.h")).unwrap();
    for name in [
        "octf_last_error",
        "octf_version",
        "octf_compute_cdi",
        "octf_compute_si",
        "octf_cdi_hf_energy",
        "octf_mmd",
        "octf_detector_load",
        "octf_detector_free",
        "octf_detector_predict",
        "OCTF_STATUS_BUFFER_TOO_SMALL",
        "typedef struct OctfDetector OctfDetector",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let version = unsafe { CStr::from_ptr(octf_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}
