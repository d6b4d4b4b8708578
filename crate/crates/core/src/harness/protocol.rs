use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mean_std, Confusion};
use super::split::{split_dataset, SplitRatio};
use super::{load_images, predict_crops, ImageSource, ImageVerdict, Phase, TrainedModel};
use crate::error::{Error, Result};
use crate::manifest::{Label, ManifestRecord};
use crate::model::{Detector, LabeledImage, ModelConfig};
use crate::synthgen::{Family, CAMERA_DOMAIN};
use crate::trainer::{train_pipeline, LambdaChoice, Splits, Stages, TrainConfig, TrainState};

/// Train on several fake domains, test on one that never enters training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub name: String,
    pub train_domains: Vec<String>,
    pub test_domain: String,
    /// Domains whose real images are shared by training and evaluation.
    #[serde(default = "default_real_domains")]
    pub real_domains: Vec<String>,
}

fn default_real_domains() -> Vec<String> {
    vec![CAMERA_DOMAIN.to_string()]
}

pub const BUILTIN_PROTOCOLS: [&str; 3] = ["n1-synth", "n2-synth", "n3-synth"];

/// The synthetic analogues: each holds out one upsampling family.
pub fn builtin_protocol(name: &str) -> Option<ProtocolSpec> {
    let held_out = match name {
        "n1-synth" => Family::Checkerboard,
        "n2-synth" => Family::Bilinear,
        "n3-synth" => Family::Nearest,
        _ => return None,
    };
    Some(ProtocolSpec {
        name: name.to_string(),
        train_domains: Family::ALL.iter().filter(|f| **f != held_out).map(|f| f.as_str().to_string()).collect(),
        test_domain: held_out.as_str().to_string(),
        real_domains: default_real_domains(),
    })
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("protocol {}: {m}", self.name)));
        if self.train_domains.len() < 2 {
            return bad(format!("needs at least 2 train domains, got {}", self.train_domains.len()));
        }
        if self.train_domains.iter().collect::<HashSet<_>>().len() != self.train_domains.len() {
            return bad("train domains repeat".into());
        }
        if self.train_domains.contains(&self.test_domain) {
            return bad(format!("test domain {} is also a train domain", self.test_domain));
        }
        if self.real_domains.contains(&self.test_domain) {
            return bad(format!("test domain {} is also a real domain", self.test_domain));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ProtocolSpec =
            toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    fn trains_on(&self, domain: &str) -> bool {
        domain != self.test_domain && (self.train_domains.iter().any(|d| d == domain) || self.real_domains.iter().any(|d| d == domain))
    }

    fn check_corpus(&self, records: &[ManifestRecord]) -> Result<()> {
        let has = |domain: &str, label: Option<Label>| {
            records.iter().any(|r| r.domain == domain && label.is_none_or(|l| r.label == l))
        };
        let missing = |d: &str| Err(Error::Data(format!("protocol {}: domain {d} missing from corpus", self.name)));
        for d in &self.train_domains {
            if !has(d, Some(Label::Fake)) {
                return missing(d);
            }
        }
        for d in &self.real_domains {
            if !has(d, Some(Label::Real)) {
                return missing(d);
            }
        }
        if !has(&self.test_domain, None) {
            return missing(&self.test_domain);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub model: ModelConfig,
    /// `train.seed` seeds the first repetition; repetition `r` uses `seed + r`.
    pub train: TrainConfig,
    pub lambda: LambdaChoice,
    pub repeats: usize,
    pub ratio: SplitRatio,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub cdi: f64,
    pub si: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub image_acc: f64,
    pub crop_acc: f64,
    pub images: usize,
    pub confusion: Confusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub lambda: f64,
    pub ce: f64,
    pub cda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub lambda: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub seen_crop_acc: f64,
    pub unseen_crop_acc: f64,
    pub per_domain: BTreeMap<String, DomainReport>,
    pub mean_fusion_weights: FusionWeights,
    /// Mean alignment distance over the last stage-2 epoch.
    pub train_mmd: Option<f64>,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lambda_probes: Vec<ProbeReport>,
    pub train_images: usize,
    pub seconds: f64,
}

/// Means over repetitions, with every run attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: String,
    pub seed: u64,
    /// Most frequently selected weight (smallest on ties).
    pub lambda: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub seen_acc_std: f64,
    pub unseen_acc_std: f64,
    pub seen_crop_acc: f64,
    pub unseen_crop_acc: f64,
    pub per_domain: BTreeMap<String, f64>,
    pub mean_fusion_weights: FusionWeights,
    pub train_mmd: Option<f64>,
    pub repeats: usize,
    pub runs: Vec<RunReport>,
}

struct Trained {
    seed: u64,
    test: Vec<usize>,
    state: TrainState,
    lambda: f64,
    train_mmd: Option<f64>,
    stage1_epochs: usize,
    stage2_epochs: usize,
    probes: Vec<ProbeReport>,
    train_images: usize,
    seconds: f64,
}

/// Full pipeline per repetition: stage 1, lambda choice and stage 2 on the
/// training domains, then evaluation on the seen test split and on the
/// held-out domain. Held-out images are read only after every repetition
/// has finished training.
pub fn run_protocol(
    spec: &ProtocolSpec,
    records: &[ManifestRecord],
    source: &dyn ImageSource,
    cfg: &ProtocolConfig,
    out: Option<&Path>,
) -> Result<ProtocolReport> {
    spec.validate()?;
    cfg.train.validate()?;
    if cfg.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    spec.check_corpus(records)?;
    let pool: Vec<ManifestRecord> = records.iter().filter(|r| spec.trains_on(&r.domain)).cloned().collect();
    let held_out: Vec<ManifestRecord> = records.iter().filter(|r| r.domain == spec.test_domain).cloned().collect();
    let index: HashMap<&Path, usize> = pool.iter().enumerate().map(|(i, r)| (r.path.as_path(), i)).collect();
    log::info!("protocol {}: loading {} training-domain images", spec.name, pool.len());
    let images = load_images(&pool, source, Phase::Training)?;

    let mut trained = Vec::with_capacity(cfg.repeats);
    let mut detector: Option<Detector> = None;
    for r in 0..cfg.repeats {
        let seed = cfg.train.seed + r as u64;
        let started = Instant::now();
        let split = split_dataset(&pool, cfg.ratio, seed)?;
        let pick = |rs: &[ManifestRecord]| rs.iter().map(|r| images[index[r.path.as_path()]].clone()).collect::<Vec<_>>();
        let (train, val) = (pick(&split.train), pick(&split.val));
        if train.iter().chain(&val).any(|im| im.domain == spec.test_domain) {
            return Err(Error::Invariant(format!("held-out domain {} reached the training split", spec.test_domain)));
        }
        let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
        let (det, state) = TrainState::fresh(cfg.model, &train_cfg)?;
        let run_dir: Option<PathBuf> = out.map(|d| d.join(format!("run{r}")));
        log::info!("protocol {} run {r} (seed {seed}): {} train / {} val", spec.name, train.len(), val.len());
        let result = train_pipeline(
            &det,
            state,
            Splits { train: &train, val: &val },
            &train_cfg,
            cfg.lambda,
            Stages::All,
            run_dir.as_deref(),
        )?;
        let stage2 = result.stage2.as_ref();
        trained.push(Trained {
            seed,
            test: split.test.iter().map(|r| index[r.path.as_path()]).collect(),
            lambda: result.model.lambda,
            train_mmd: stage2.and_then(|s| s.epochs.last()).and_then(|e| e.cda),
            stage1_epochs: result.stage1.as_ref().map_or(0, |s| s.epochs.len()),
            stage2_epochs: stage2.map_or(0, |s| s.epochs.len()),
            probes: result
                .selection
                .iter()
                .flat_map(|s| &s.probes)
                .map(|p| ProbeReport { lambda: p.lambda, ce: p.ce, cda: p.cda })
                .collect(),
            state: result.model,
            train_images: train.len(),
            seconds: started.elapsed().as_secs_f64(),
        });
        detector = Some(det);
    }
    let det = detector.expect("at least one repetition");

    log::info!("protocol {}: loading {} held-out images", spec.name, held_out.len());
    let held_images = load_images(&held_out, source, Phase::Evaluation)?;
    let runs = trained
        .into_iter()
        .map(|t| {
            let held_split = split_dataset(&held_out, cfg.ratio, t.seed)?;
            let held_index: HashMap<&Path, usize> =
                held_out.iter().enumerate().map(|(i, r)| (r.path.as_path(), i)).collect();
            let seen: Vec<&LabeledImage> = t.test.iter().map(|&i| &images[i]).collect();
            let unseen_fakes: Vec<&LabeledImage> =
                held_split.test.iter().map(|r| &held_images[held_index[r.path.as_path()]]).collect();
            evaluate_run(spec, &det, t, &seen, &unseen_fakes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(spec, cfg.train.seed, runs))
}

#[derive(Default)]
struct Tally {
    images: Confusion,
    crops: Confusion,
}

impl Tally {
    fn add(&mut self, truth: Label, v: &ImageVerdict) {
        self.images.add(v.label, truth);
        v.crops.iter().for_each(|c| self.crops.add(c.label, truth));
    }
}

fn evaluate_run(
    spec: &ProtocolSpec,
    det: &Detector,
    t: Trained,
    seen: &[&LabeledImage],
    held: &[&LabeledImage],
) -> Result<RunReport> {
    let model = TrainedModel { detector: det, params: &t.state.params };
    let all: Vec<&LabeledImage> = seen.iter().chain(held).copied().collect();
    let verdicts = all.par_iter().map(|im| predict_crops(&im.crops, &model)).collect::<Result<Vec<_>>>()?;
    let (seen_v, held_v) = verdicts.split_at(seen.len());
    let mut seen_tally = Tally::default();
    let mut unseen_tally = Tally::default();
    let mut per_domain: BTreeMap<&str, Tally> = BTreeMap::new();
    for (im, v) in seen.iter().zip(seen_v) {
        seen_tally.add(im.label, v);
        if im.label == Label::Real && spec.real_domains.contains(&im.domain) {
            unseen_tally.add(im.label, v);
        }
        per_domain.entry(&im.domain).or_default().add(im.label, v);
    }
    for (im, v) in held.iter().zip(held_v) {
        unseen_tally.add(im.label, v);
        per_domain.entry(&im.domain).or_default().add(im.label, v);
    }
    let n = verdicts.len().max(1) as f64;
    let weights = verdicts.iter().fold((0.0, 0.0), |(a, b), v| (a + v.weights.0 / n, b + v.weights.1 / n));
    Ok(RunReport {
        seed: t.seed,
        lambda: t.lambda,
        seen_acc: seen_tally.images.accuracy(),
        unseen_acc: unseen_tally.images.accuracy(),
        seen_crop_acc: seen_tally.crops.accuracy(),
        unseen_crop_acc: unseen_tally.crops.accuracy(),
        per_domain: per_domain
            .into_iter()
            .map(|(d, t)| {
                let report = DomainReport {
                    image_acc: t.images.accuracy(),
                    crop_acc: t.crops.accuracy(),
                    images: t.images.total(),
                    confusion: t.images,
                };
                (d.to_string(), report)
            })
            .collect(),
        mean_fusion_weights: FusionWeights { cdi: weights.0, si: weights.1 },
        train_mmd: t.train_mmd,
        stage1_epochs: t.stage1_epochs,
        stage2_epochs: t.stage2_epochs,
        lambda_probes: t.probes,
        train_images: t.train_images,
        seconds: t.seconds,
    })
}

fn summarize(spec: &ProtocolSpec, seed: u64, runs: Vec<RunReport>) -> ProtocolReport {
    let col = |f: &dyn Fn(&RunReport) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let (seen_acc, seen_acc_std) = mean_std(&col(&|r| r.seen_acc));
    let (unseen_acc, unseen_acc_std) = mean_std(&col(&|r| r.unseen_acc));
    let mut per_domain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        for (d, rep) in &r.per_domain {
            per_domain.entry(d.clone()).or_default().push(rep.image_acc);
        }
    }
    let mut lambdas = col(&|r| r.lambda);
    lambdas.sort_by(f64::total_cmp);
    let lambda = lambdas
        .iter()
        .copied()
        .max_by(|a, b| {
            let count = |x: f64| lambdas.iter().filter(|&&v| v == x).count();
            count(*a).cmp(&count(*b)).then(b.total_cmp(a))
        })
        .unwrap_or(0.0);
    let mmd = col(&|r| r.train_mmd.unwrap_or(f64::NAN));
    ProtocolReport {
        protocol: spec.name.clone(),
        seed,
        lambda,
        seen_acc,
        unseen_acc,
        seen_acc_std,
        unseen_acc_std,
        seen_crop_acc: mean_std(&col(&|r| r.seen_crop_acc)).0,
        unseen_crop_acc: mean_std(&col(&|r| r.unseen_crop_acc)).0,
        per_domain: per_domain.into_iter().map(|(d, v)| (d, mean_std(&v).0)).collect(),
        mean_fusion_weights: FusionWeights {
            cdi: mean_std(&col(&|r| r.mean_fusion_weights.cdi)).0,
            si: mean_std(&col(&|r| r.mean_fusion_weights.si)).0,
        },
        train_mmd: runs.iter().all(|r| r.train_mmd.is_some()).then(|| mean_std(&mmd).0),
        repeats: runs.len(),
        runs,
    }
}
