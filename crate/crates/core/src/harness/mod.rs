//! Dataset ingestion, splitting, per-image inference and the
//! cross-domain protocol runner.

mod metrics;
mod protocol;
mod split;

pub use metrics::{compute_metrics, mean_std, Confusion, Metrics};
pub use protocol::{
    builtin_protocol, run_protocol, ProtocolConfig, ProtocolReport, ProtocolSpec, RunReport, BUILTIN_PROTOCOLS,
};
pub use split::{split_dataset, DatasetSplit, SplitRatio, MIN_CELL};

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::error::Result;
use crate::manifest::{Label, ManifestRecord};
use crate::model::{any_crop_verdict, CropPrediction, Detector, LabeledImage};
use crate::preprocess::{crop_inputs, crop_parts, CropInputs, RgbImage};
use crate::tensor::ParamStore;

/// Anything that labels crops; the trained detector or a test stub.
pub trait CropClassifier {
    fn classify(&self, crops: &[CropInputs]) -> Result<Vec<CropPrediction>>;
}

/// Detector architecture plus weights.
pub struct TrainedModel<'a> {
    pub detector: &'a Detector,
    pub params: &'a ParamStore<f32>,
}

impl CropClassifier for TrainedModel<'_> {
    fn classify(&self, crops: &[CropInputs]) -> Result<Vec<CropPrediction>> {
        self.detector.predict(self.params, crops)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageVerdict {
    pub label: Label,
    pub crops: Vec<CropPrediction>,
    /// Mean `(cdi, si)` fusion weights over the crops.
    pub weights: (f64, f64),
}

impl ImageVerdict {
    pub fn from_crops(crops: Vec<CropPrediction>) -> Self {
        let n = crops.len().max(1) as f64;
        let weights = crops
            .iter()
            .fold((0.0, 0.0), |(a, b), c| (a + c.weights.0 as f64 / n, b + c.weights.1 as f64 / n));
        ImageVerdict { label: any_crop_verdict(crops.iter().map(|c| c.label)), crops, weights }
    }
}

/// Classifies every crop of `img`; the image is fake if any crop is.
pub fn predict_image(img: &RgbImage, model: &impl CropClassifier) -> Result<ImageVerdict> {
    let (_, parts) = crop_parts(img)?;
    let inputs = parts.iter().map(crop_inputs).collect::<Result<Vec<_>>>()?;
    predict_crops(&inputs, model)
}

pub fn predict_crops(crops: &[CropInputs], model: &impl CropClassifier) -> Result<ImageVerdict> {
    Ok(ImageVerdict::from_crops(model.classify(crops)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Training,
    Evaluation,
}

/// Where image bytes come from.
pub trait ImageSource: Sync {
    fn load(&self, record: &ManifestRecord, phase: Phase) -> Result<RgbImage>;
}

/// PNG files relative to a manifest directory.
pub struct DiskSource {
    pub root: PathBuf,
}

impl DiskSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DiskSource { root: root.into() }
    }
}

impl ImageSource for DiskSource {
    fn load(&self, record: &ManifestRecord, _: Phase) -> Result<RgbImage> {
        RgbImage::load_png(&self.root.join(&record.path))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Access {
    pub path: PathBuf,
    pub domain: String,
    pub phase: Phase,
}

/// Records every read that passes through it.
pub struct AuditedSource<S> {
    inner: S,
    reads: Mutex<Vec<Access>>,
}

impl<S: ImageSource> AuditedSource<S> {
    pub fn new(inner: S) -> Self {
        AuditedSource { inner, reads: Mutex::new(Vec::new()) }
    }

    pub fn reads(&self) -> Vec<Access> {
        self.reads.lock().expect("audit lock").clone()
    }

    pub fn reads_of(&self, domain: &str, phase: Phase) -> usize {
        self.reads().iter().filter(|a| a.domain == domain && a.phase == phase).count()
    }
}

impl<S: ImageSource> ImageSource for AuditedSource<S> {
    fn load(&self, record: &ManifestRecord, phase: Phase) -> Result<RgbImage> {
        self.reads.lock().expect("audit lock").push(Access {
            path: record.path.clone(),
            domain: record.domain.clone(),
            phase,
        });
        self.inner.load(record, phase)
    }
}

/// Loads and preprocesses records in parallel, preserving order.
pub fn load_images(records: &[ManifestRecord], source: &dyn ImageSource, phase: Phase) -> Result<Vec<LabeledImage>> {
    records
        .par_iter()
        .map(|r| {
            let img = source.load(r, phase)?;
            LabeledImage::new(&img, r.label, r.domain.clone())
        })
        .collect()
}

/// Manifest directory, used to resolve record paths.
pub fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}
