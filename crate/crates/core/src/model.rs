//! The two-stream detector: a CDI backbone, an SI backbone and the fusion head.

use std::borrow::Borrow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionHead, FusionVars};
use crate::manifest::Label;
use crate::octnet::{Backbone, BackboneConfig, Forward, OctVar, Preset, DEFAULT_ALPHA};
use crate::preprocess::{crop_inputs, crop_parts, CropInputs, RgbImage, CROP};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

pub const CDI_CHANNELS: usize = 3;
pub const SI_CHANNELS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Preset,
    pub alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { preset: Preset::Desk10, alpha: DEFAULT_ALPHA }
    }
}

impl ModelConfig {
    pub fn backbone(&self, in_channels: usize) -> BackboneConfig {
        BackboneConfig::new(self.preset, in_channels).with_alpha(self.alpha)
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub cdi: Backbone,
    pub si: Backbone,
    pub head: FusionHead,
}

/// Graph handles of one detector pass.
#[derive(Clone, Copy, Debug)]
pub struct DetectorVars {
    pub v_cdi: Var,
    pub v_si: Var,
    pub fusion: FusionVars,
}

/// Activations entering the final residual block of each backbone.
#[derive(Clone, Copy, Debug)]
pub struct Prefix {
    pub cdi: OctVar,
    pub si: OctVar,
}

/// Inference result for one crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropPrediction {
    pub label: Label,
    pub fake_probability: f32,
    pub weights: (f32, f32),
}

impl Detector {
    /// Builds the architecture and a freshly initialized parameter store.
    pub fn build<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Detector, ParamStore<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cdi = Backbone::new(&mut store, "cdi", config.backbone(CDI_CHANNELS), &mut rng)?;
        let si = Backbone::new(&mut store, "si", config.backbone(SI_CHANNELS), &mut rng)?;
        let head = FusionHead::new(&mut store, "head", cdi.config.feature_dim(), &mut rng)?;
        Ok((Detector { config, cdi, si, head }, store))
    }

    /// Parameter-name prefixes that stay trainable during fine-tuning.
    pub fn finetune_prefixes(&self) -> [String; 3] {
        [
            format!("{}.", self.cdi.last_block_name()),
            format!("{}.", self.si.last_block_name()),
            "head.".to_string(),
        ]
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, cdi: Var, si: Var) -> Result<DetectorVars> {
        let prefix = self.forward_prefix(f, cdi, si)?;
        self.forward_from_prefix(f, prefix)
    }

    pub fn forward_prefix<T: Scalar>(&self, f: &mut Forward<'_, T>, cdi: Var, si: Var) -> Result<Prefix> {
        Ok(Prefix { cdi: self.cdi.forward_prefix(f, cdi)?, si: self.si.forward_prefix(f, si)? })
    }

    pub fn forward_from_prefix<T: Scalar>(&self, f: &mut Forward<'_, T>, p: Prefix) -> Result<DetectorVars> {
        let v_cdi = self.cdi.forward_tail(f, p.cdi)?;
        let v_si = self.si.forward_tail(f, p.si)?;
        let fusion = self.head.forward(f, v_cdi, v_si)?;
        Ok(DetectorVars { v_cdi, v_si, fusion })
    }

    /// Eval-mode classification of a batch of crops.
    pub fn predict<C: Borrow<CropInputs>>(&self, store: &ParamStore<f32>, crops: &[C]) -> Result<Vec<CropPrediction>> {
        if crops.is_empty() {
            return Ok(Vec::new());
        }
        let (cdi, si) = stack_inputs(crops)?;
        let mut g = Graph::new();
        let bound = store.bind(&mut g)?;
        let cdi = g.input(cdi)?;
        let si = g.input(si)?;
        let mut f = Forward::new(&mut g, store, &bound, false);
        let out = self.forward(&mut f, cdi, si)?;
        Ok(crop_predictions(&g, out.fusion))
    }
}

pub(crate) fn crop_predictions(g: &Graph<f32>, out: FusionVars) -> Vec<CropPrediction> {
    let logits = g.value(out.logits).data();
    let weights = g.fusion_weights(out.fused).expect("attention node");
    logits
            .chunks(2)
            .zip(weights)
            .map(|(z, w)| {
                let fake_probability = 1.0 / (1.0 + (z[0] - z[1]).exp());
                CropPrediction {
                    label: Label::from_class(if z[1] > z[0] { 1 } else { 0 }),
                    fake_probability,
                    weights: w,
                }
            })
            .collect()
}

/// Image-level verdict: fake as soon as any crop is fake.
pub fn any_crop_verdict(crops: impl IntoIterator<Item = Label>) -> Label {
    if crops.into_iter().any(|l| l == Label::Fake) {
        Label::Fake
    } else {
        Label::Real
    }
}

/// A labeled image reduced to the network inputs of its crops.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub crops: Vec<CropInputs>,
    pub label: Label,
    pub domain: String,
}

impl LabeledImage {
    pub fn new(img: &RgbImage, label: Label, domain: impl Into<String>) -> Result<Self> {
        let (_, parts) = crop_parts(img)?;
        let crops = parts.iter().map(crop_inputs).collect::<Result<Vec<_>>>()?;
        Ok(LabeledImage { crops, label, domain: domain.into() })
    }
}

/// Stacks per-crop CDI and SI tensors into `[N, 3, 128, 128]` and `[N, 1, 128, 128]`.
pub fn stack_inputs<C: Borrow<CropInputs>>(crops: &[C]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    for c in crops {
        let c = c.borrow();
        if c.cdi.dims() != [CDI_CHANNELS, CROP, CROP] || c.si.dims() != [SI_CHANNELS, CROP, CROP] {
            return Err(Error::shape("stack_inputs", format!("{:?} / {:?}", c.cdi.dims(), c.si.dims())));
        }
    }
    let cdi = Tensor::stack(&crops.iter().map(|c| &c.borrow().cdi).collect::<Vec<_>>())?;
    let si = Tensor::stack(&crops.iter().map(|c| &c.borrow().si).collect::<Vec<_>>())?;
    Ok((cdi, si))
}
