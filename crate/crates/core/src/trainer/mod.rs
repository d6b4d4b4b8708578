//! Two-stage optimization: full cross-entropy training, then fine-tuning of
//! the final residual block of each backbone and the head with an added
//! alignment term.

mod adam;
mod checkpoint;
mod schedule;

pub use adam::{Adam, ADAM_EPS};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use schedule::{lr_after, LrDecision, Plateau, DECAY};

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::total_loss_var;
use crate::error::{Error, Result};
use crate::manifest::Label;
use crate::model::{any_crop_verdict, crop_predictions, stack_inputs, CropPrediction, Detector, LabeledImage, ModelConfig, Prefix};
use crate::octnet::{apply_stat_updates, Forward, OctTensor, OctVar, Preset, StatUpdate};
use crate::preprocess::CropInputs;
use crate::tensor::{Graph, ParamKind, ParamStore, Tensor, Var};
use checkpoint::{bits_tensor, tensor_bits};

pub const LAMBDA_GRID: [f64; 5] = [0.001, 0.01, 0.1, 1.0, 10.0];
pub const LOG_FILE: &str = "train_log.csv";
pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_batch: usize,
    /// Sub-batch drawn from each domain per fine-tuning step.
    pub stage2_batch: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub patience: usize,
    /// Required validation-accuracy gain, in percentage points.
    pub plateau_threshold: f64,
    pub lr_floor: f64,
    pub lambda_grid: Vec<f64>,
    pub probe_epochs: usize,
    pub stage1_max_epochs: usize,
    pub stage2_max_epochs: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            stage1_batch: 10,
            stage2_batch: 16,
            stage1_lr: 1e-3,
            stage2_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            patience: 5,
            plateau_threshold: 0.1,
            lr_floor: 1e-7,
            lambda_grid: LAMBDA_GRID.to_vec(),
            probe_epochs: 5,
            stage1_max_epochs: 20,
            stage2_max_epochs: 10,
            eval_batch: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(format!("train config: {what}")));
        for (name, v) in [
            ("stage1_batch", self.stage1_batch),
            ("stage2_batch", self.stage2_batch),
            ("patience", self.patience),
            ("probe_epochs", self.probe_epochs),
            ("stage1_max_epochs", self.stage1_max_epochs),
            ("stage2_max_epochs", self.stage2_max_epochs),
            ("eval_batch", self.eval_batch),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        for (name, v) in [
            ("stage1_lr", self.stage1_lr),
            ("stage2_lr", self.stage2_lr),
            ("plateau_threshold", self.plateau_threshold),
            ("lr_floor", self.lr_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.lambda_grid.is_empty() {
            return bad("lambda_grid is empty".into());
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return bad(format!("lambda_grid values must be positive, got {l}"));
        }
        Ok(())
    }

    fn plateau(&self, lr: f64) -> Plateau {
        Plateau::new(lr, self.patience, self.plateau_threshold, self.lr_floor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Every weight trainable, cross-entropy only.
    Full,
    /// Last block of each backbone plus the head, cross-entropy plus alignment.
    Finetune,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Full => 1,
            Stage::Finetune => 2,
        }
    }

    fn from_number(n: u64) -> Result<Self> {
        match n {
            1 => Ok(Stage::Full),
            2 => Ok(Stage::Finetune),
            _ => Err(Error::Format(format!("unknown stage tag {n}"))),
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    pub stage: Stage,
    /// Completed epochs of the current stage.
    pub epoch: usize,
    pub plateau: Plateau,
    pub lambda: f64,
    /// Optimizer steps logged so far, across stages.
    pub step: u64,
    pub seed: u64,
    pub best_val: Option<f64>,
    /// Set once the schedule has dropped below its floor.
    pub finished: bool,
}

impl TrainState {
    /// Freshly initialized model at the start of stage 1.
    pub fn fresh(model: ModelConfig, cfg: &TrainConfig) -> Result<(Detector, TrainState)> {
        cfg.validate()?;
        let (det, params) = Detector::build::<f32>(model, cfg.seed)?;
        let optimizer = Adam::new(&params, cfg.beta1, cfg.beta2);
        let state = TrainState {
            model,
            params,
            optimizer,
            stage: Stage::Full,
            epoch: 0,
            plateau: cfg.plateau(cfg.stage1_lr),
            lambda: 0.0,
            step: 0,
            seed: cfg.seed,
            best_val: None,
            finished: false,
        };
        Ok((det, state))
    }

    /// Start of stage 2 from stage-1 weights: only the final blocks and the
    /// head stay trainable and the optimizer restarts.
    pub fn finetune(det: &Detector, from: &TrainState, cfg: &TrainConfig, lambda: f64) -> Result<TrainState> {
        cfg.validate()?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be a finite value >= 0, got {lambda}")));
        }
        let mut params = from.params.clone();
        params.zero_grads();
        let prefixes = det.finetune_prefixes();
        params.set_trainable(|name| prefixes.iter().any(|p| name.starts_with(p.as_str())));
        let optimizer = Adam::new(&params, cfg.beta1, cfg.beta2);
        Ok(TrainState {
            model: from.model,
            params,
            optimizer,
            stage: Stage::Finetune,
            epoch: 0,
            plateau: cfg.plateau(cfg.stage2_lr),
            lambda,
            step: from.step,
            seed: cfg.seed,
            best_val: None,
            finished: false,
        })
    }

    fn meta(&self) -> Vec<(&'static str, u64)> {
        let preset = match self.model.preset {
            Preset::Desk10 => 0,
            Preset::Resnet34 => 1,
        };
        let p = &self.plateau;
        vec![
            ("meta.preset", preset),
            ("meta.alpha", self.model.alpha.to_bits()),
            ("meta.stage", self.stage.number() as u64),
            ("meta.epoch", self.epoch as u64),
            ("meta.lr", p.lr.to_bits()),
            ("meta.patience", p.patience as u64),
            ("meta.threshold", p.threshold.to_bits()),
            ("meta.floor", p.floor.to_bits()),
            ("meta.plateau_best", p.best().unwrap_or(f64::NAN).to_bits()),
            ("meta.plateau_stale", p.stale() as u64),
            ("meta.lambda", self.lambda.to_bits()),
            ("meta.step", self.step),
            ("meta.seed", self.seed),
            ("meta.best_val", self.best_val.unwrap_or(f64::NAN).to_bits()),
            ("meta.finished", self.finished as u64),
            ("meta.adam_step", self.optimizer.steps()),
            ("meta.beta1", self.optimizer.beta1.to_bits()),
            ("meta.beta2", self.optimizer.beta2.to_bits()),
        ]
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        for (_, p) in self.params.iter() {
            ck.push(p.name.clone(), p.value.clone())?;
        }
        for (id, p) in self.params.iter() {
            if p.kind == ParamKind::Weight {
                let (m, v) = self.optimizer.moments(id.index());
                ck.push(format!("adam.m.{}", p.name), Tensor::new(p.value.dims().to_vec(), m.to_vec())?)?;
                ck.push(format!("adam.v.{}", p.name), Tensor::new(p.value.dims().to_vec(), v.to_vec())?)?;
            }
        }
        for (name, bits) in self.meta() {
            ck.push(name, bits_tensor(bits))?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Detector, TrainState)> {
        let meta = |name: &str| ck.require(name).and_then(tensor_bits);
        let float = |name: &str| meta(name).map(f64::from_bits);
        let optional = |name: &str| float(name).map(|v| (!v.is_nan()).then_some(v));
        let preset = match meta("meta.preset")? {
            0 => Preset::Desk10,
            1 => Preset::Resnet34,
            n => return Err(Error::Format(format!("unknown preset code {n}"))),
        };
        let model = ModelConfig { preset, alpha: float("meta.alpha")? };
        let (det, mut params) = Detector::build::<f32>(model, 0)?;
        let stage = Stage::from_number(meta("meta.stage")?)?;
        let mut optimizer = Adam::new(&params, float("meta.beta1")?, float("meta.beta2")?);
        let adam_step = meta("meta.adam_step")?;
        let mut expected = 0;
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.name.clone(), p.kind)).collect();
        for (id, name, kind) in ids {
            let stored = ck.require(&name)?;
            let slot = params.get_mut(id);
            if stored.dims() != slot.value.dims() {
                return Err(Error::Format(format!(
                    "{name} has dims {:?}, model expects {:?}",
                    stored.dims(),
                    slot.value.dims()
                )));
            }
            slot.value = stored.clone();
            expected += 1;
            if kind == ParamKind::Weight {
                let m = ck.require(&format!("adam.m.{name}"))?.data().to_vec();
                let v = ck.require(&format!("adam.v.{name}"))?.data().to_vec();
                optimizer.restore(adam_step, id.index(), m, v)?;
                expected += 2;
            }
        }
        let plateau = Plateau::new(
            float("meta.lr")?,
            meta("meta.patience")? as usize,
            float("meta.threshold")?,
            float("meta.floor")?,
        )
        .with_state(optional("meta.plateau_best")?, meta("meta.plateau_stale")? as usize);
        if stage == Stage::Finetune {
            let prefixes = det.finetune_prefixes();
            params.set_trainable(|name| prefixes.iter().any(|p| name.starts_with(p.as_str())));
        }
        let state = TrainState {
            model,
            params,
            optimizer,
            stage,
            epoch: meta("meta.epoch")? as usize,
            plateau,
            lambda: float("meta.lambda")?,
            step: meta("meta.step")?,
            seed: meta("meta.seed")?,
            best_val: optional("meta.best_val")?,
            finished: meta("meta.finished")? != 0,
        };
        expected += state.meta().len();
        if ck.len() != expected {
            return Err(Error::Format(format!("checkpoint has {} entries, expected {expected}", ck.len())));
        }
        Ok((det, state))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<(Detector, TrainState)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Train and validation images; the held-out test split never enters training.
#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a [LabeledImage],
    pub val: &'a [LabeledImage],
}

impl Splits<'_> {
    fn check(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::Data(format!(
                "training needs non-empty train and val splits (got {} / {})",
                self.train.len(),
                self.val.len()
            )));
        }
        Ok(())
    }
}

/// One row of the training log. Validation accuracy is filled on the last
/// step of an epoch; `cda` is absent in stage 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub ce: f64,
    pub cda: Option<f64>,
    pub lambda: f64,
    pub total: f64,
    pub val_acc: Option<f64>,
}

/// Epoch means of the logged losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub cda: Option<f64>,
    pub total: f64,
    pub val_acc: Option<f64>,
}

impl EpochSummary {
    fn from_rows(stage: Stage, epoch: usize, lr: f64, rows: &[LogRow], val_acc: Option<f64>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&LogRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        EpochSummary {
            stage,
            epoch,
            lr,
            ce: mean(&|r| r.ce),
            cda: rows.iter().all(|r| r.cda.is_some()).then(|| mean(&|r| r.cda.unwrap_or(0.0))),
            total: mean(&|r| r.total),
            val_acc,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// State after the last completed epoch.
    pub last: TrainState,
    /// State at the epoch with the highest validation accuracy.
    pub best: TrainState,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
}

/// Checkpoint and log files of one training run.
struct Sink {
    dir: Option<PathBuf>,
}

impl Sink {
    fn new(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Sink { dir: dir.map(Path::to_path_buf) })
    }

    fn path(&self, stage: Stage, kind: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("stage{}.{kind}.ckpt", stage.number())))
    }

    fn save(&self, state: &TrainState, kind: &str) -> Result<()> {
        match self.path(state.stage, kind) {
            Some(p) => state.save(&p),
            None => Ok(()),
        }
    }

    fn log(&self, rows: &[LogRow]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let fresh = file.metadata().map_err(|e| Error::io(&path, e))?.len() == 0;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        for r in rows {
            w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Per-epoch shuffling stream, independent of how many epochs ran before.
fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage.number() as u64) << 32) | epoch as u64);
    rng
}

struct EpochLoop<'a> {
    cfg: &'a TrainConfig,
    sink: Sink,
    validate: bool,
    max_epochs: usize,
}

impl EpochLoop<'_> {
    fn run(
        &self,
        mut state: TrainState,
        mut train_epoch: impl FnMut(&mut TrainState, usize) -> Result<Vec<LogRow>>,
        mut val_acc: impl FnMut(&TrainState) -> Result<f64>,
    ) -> Result<RunOutput> {
        let mut best = match (state.best_val, self.sink.path(state.stage, "best")) {
            (Some(_), Some(path)) if state.epoch > 0 => TrainState::load(&path)?.1,
            _ => state.clone(),
        };
        let mut log = Vec::new();
        let mut epochs = Vec::new();
        while !state.finished && state.epoch < self.max_epochs {
            let epoch = state.epoch + 1;
            let lr = state.plateau.lr;
            let mut rows = train_epoch(&mut state, epoch)?;
            state.epoch = epoch;
            let acc = if self.validate { Some(val_acc(&state)?) } else { None };
            if let Some(acc) = acc {
                if state.best_val.is_none_or(|b| acc > b) {
                    state.best_val = Some(acc);
                    best = state.clone();
                    self.sink.save(&best, "best")?;
                }
                match state.plateau.update(acc) {
                    LrDecision::Keep => {}
                    LrDecision::Decay(lr) => log::info!("stage {} epoch {epoch}: lr -> {lr:e}", state.stage.number()),
                    LrDecision::Stop => {
                        log::info!("stage {} epoch {epoch}: lr floor reached", state.stage.number());
                        state.finished = true;
                    }
                }
                if let Some(last) = rows.last_mut() {
                    last.val_acc = Some(acc);
                }
            }
            let summary = EpochSummary::from_rows(state.stage, epoch, lr, &rows, acc);
            log::info!(
                "stage {} epoch {epoch}: ce {:.4} cda {} val {}",
                state.stage.number(),
                summary.ce,
                summary.cda.map_or("-".into(), |v| format!("{v:.4}")),
                acc.map_or("-".into(), |v| format!("{v:.2}"))
            );
            self.sink.log(&rows)?;
            self.sink.save(&state, "last")?;
            log.extend(rows);
            epochs.push(summary);
        }
        if !self.validate {
            best = state.clone();
        }
        Ok(RunOutput { last: state, best, log, epochs })
    }
}

/// Backward pass, optimizer update and running-statistics update.
fn apply_step(state: &mut TrainState, g: &mut Graph<f32>, bound: &crate::tensor::Bound, loss: Var, stats: &[StatUpdate<f32>]) -> Result<()> {
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { context: format!("training loss at step {}", state.step + 1) });
    }
    g.backward(loss)?;
    state.params.zero_grads();
    state.params.accumulate_grads(g, bound);
    state.optimizer.step(&mut state.params, state.plateau.lr)?;
    apply_stat_updates(&mut state.params, stats);
    state.step += 1;
    Ok(())
}

fn full_step(det: &Detector, state: &mut TrainState, crops: &[&CropInputs], labels: &[usize]) -> Result<f64> {
    let (cdi, si) = stack_inputs(crops)?;
    let mut g = Graph::new();
    let bound = state.params.bind(&mut g)?;
    let cdi = g.input(cdi)?;
    let si = g.input(si)?;
    let mut f = Forward::new(&mut g, &state.params, &bound, true);
    let out = det.forward(&mut f, cdi, si)?;
    let stats = std::mem::take(&mut f.stats);
    let ce = g.softmax_cross_entropy(out.fusion.logits, labels)?;
    let value = g.value(ce).data()[0] as f64;
    apply_step(state, &mut g, &bound, ce, &stats)?;
    Ok(value)
}

fn image_accuracy(images: impl Iterator<Item = (Label, Vec<Label>)>) -> f64 {
    let (mut right, mut total) = (0usize, 0usize);
    for (truth, crops) in images {
        total += 1;
        right += usize::from(any_crop_verdict(crops) == truth);
    }
    100.0 * right as f64 / total.max(1) as f64
}

/// Per-image accuracy (percent) under the any-crop rule.
pub fn evaluate_images(det: &Detector, params: &ParamStore<f32>, images: &[LabeledImage], batch: usize) -> Result<f64> {
    let crops: Vec<&CropInputs> = images.iter().flat_map(|im| &im.crops).collect();
    let mut preds: Vec<CropPrediction> = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(batch.max(1)) {
        preds.extend(det.predict(params, chunk)?);
    }
    let mut it = preds.into_iter();
    Ok(image_accuracy(
        images.iter().map(|im| (im.label, it.by_ref().take(im.crops.len()).map(|p| p.label).collect())),
    ))
}

/// Stage 1: every weight trainable, cross-entropy only, plateau schedule on
/// validation accuracy. `state` is fresh or a resumed stage-1 checkpoint.
pub fn train_stage1(det: &Detector, state: TrainState, data: Splits<'_>, cfg: &TrainConfig, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    data.check()?;
    if state.stage != Stage::Full {
        return Err(Error::InvalidArgument("stage 1 cannot continue a stage-2 checkpoint".into()));
    }
    let items: Vec<(usize, usize)> = data
        .train
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.crops.len()).map(move |c| (i, c)))
        .collect();
    let runner = EpochLoop { cfg, sink: Sink::new(out)?, validate: true, max_epochs: cfg.stage1_max_epochs };
    runner.run(
        state,
        |state, epoch| {
            let mut order = items.clone();
            order.shuffle(&mut epoch_rng(state.seed, Stage::Full, epoch));
            let mut rows = Vec::new();
            for batch in order.chunks(cfg.stage1_batch) {
                let crops: Vec<&CropInputs> = batch.iter().map(|&(i, c)| &data.train[i].crops[c]).collect();
                let labels: Vec<usize> = batch.iter().map(|&(i, _)| data.train[i].label.class()).collect();
                let lr = state.plateau.lr;
                let ce = full_step(det, state, &crops, &labels)?;
                rows.push(LogRow { step: state.step, epoch, stage: 1, lr, ce, cda: None, lambda: 0.0, total: ce, val_acc: None });
            }
            Ok(rows)
        },
        |state| evaluate_images(det, &state.params, data.val, runner.cfg.eval_batch),
    )
}

/// Frozen activations entering the final block of both backbones.
#[derive(Clone, Debug)]
struct CachedCrop {
    cdi: OctTensor<f32>,
    si: OctTensor<f32>,
}

fn sample_oct(g: &Graph<f32>, v: OctVar, i: usize) -> Result<OctTensor<f32>> {
    Ok(OctTensor { high: g.value(v.high).sample(i)?, low: v.low.map(|l| g.value(l).sample(i)).transpose()? })
}

fn stack_oct(g: &mut Graph<f32>, items: &[&OctTensor<f32>]) -> Result<OctVar> {
    let high = g.input(Tensor::stack(&items.iter().map(|t| &t.high).collect::<Vec<_>>())?)?;
    let low = match items[0].low {
        Some(_) => {
            let lows = items.iter().map(|t| t.low.as_ref()).collect::<Option<Vec<_>>>();
            let lows = lows.ok_or_else(|| Error::shape("prefix cache", "mixed low-branch presence"))?;
            Some(g.input(Tensor::stack(&lows)?)?)
        }
        None => None,
    };
    Ok(OctVar { high, low })
}

fn prefix_cache(det: &Detector, params: &ParamStore<f32>, crops: &[&CropInputs], batch: usize) -> Result<Vec<CachedCrop>> {
    let mut out = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(batch.max(1)) {
        let (cdi, si) = stack_inputs(chunk)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g)?;
        let cdi = g.input(cdi)?;
        let si = g.input(si)?;
        let mut f = Forward::new(&mut g, params, &bound, false);
        let p = det.forward_prefix(&mut f, cdi, si)?;
        for i in 0..chunk.len() {
            out.push(CachedCrop { cdi: sample_oct(&g, p.cdi, i)?, si: sample_oct(&g, p.si, i)? });
        }
    }
    Ok(out)
}

fn cached_prefix(g: &mut Graph<f32>, crops: &[&CachedCrop]) -> Result<Prefix> {
    let cdi = stack_oct(g, &crops.iter().map(|c| &c.cdi).collect::<Vec<_>>())?;
    let si = stack_oct(g, &crops.iter().map(|c| &c.si).collect::<Vec<_>>())?;
    Ok(Prefix { cdi, si })
}

/// Stage-2 inputs: training crops grouped into per-domain pools, plus
/// validation crops, all reduced to their frozen prefix activations.
struct FinetuneData {
    domains: Vec<String>,
    crops: Vec<CachedCrop>,
    labels: Vec<Label>,
    pools: Vec<Vec<usize>>,
    val_crops: Vec<CachedCrop>,
    val_images: Vec<(Range<usize>, Label)>,
}

/// Fake domains define the pools. Real images join the pool of their own
/// domain when it is one of them, otherwise they are dealt round-robin.
pub fn domain_pools(train: &[LabeledImage]) -> Result<(Vec<String>, Vec<Vec<usize>>)> {
    let domains: Vec<String> = train
        .iter()
        .filter(|im| im.label == Label::Fake)
        .map(|im| im.domain.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if domains.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "alignment needs at least 2 fake domains, got {}",
            domains.len()
        )));
    }
    let mut pools = vec![Vec::new(); domains.len()];
    let mut dealt = 0;
    for (i, im) in train.iter().enumerate() {
        let d = match domains.iter().position(|d| *d == im.domain) {
            Some(d) => d,
            None => {
                dealt += 1;
                (dealt - 1) % domains.len()
            }
        };
        pools[d].push(i);
    }
    Ok((domains, pools))
}

impl FinetuneData {
    fn new(det: &Detector, params: &ParamStore<f32>, data: Splits<'_>, batch: usize) -> Result<Self> {
        let (domains, image_pools) = domain_pools(data.train)?;
        let mut starts = Vec::with_capacity(data.train.len());
        let mut train_crops = Vec::new();
        let mut labels = Vec::new();
        for im in data.train {
            starts.push(train_crops.len());
            train_crops.extend(im.crops.iter());
            labels.extend(std::iter::repeat_n(im.label, im.crops.len()));
        }
        let pools = image_pools
            .iter()
            .map(|imgs| imgs.iter().flat_map(|&i| starts[i]..starts[i] + data.train[i].crops.len()).collect())
            .collect();
        let mut val_images = Vec::with_capacity(data.val.len());
        let mut val_crops = Vec::new();
        for im in data.val {
            val_images.push((val_crops.len()..val_crops.len() + im.crops.len(), im.label));
            val_crops.extend(im.crops.iter());
        }
        Ok(FinetuneData {
            domains,
            crops: prefix_cache(det, params, &train_crops, batch)?,
            labels,
            pools,
            val_crops: prefix_cache(det, params, &val_crops, batch)?,
            val_images,
        })
    }

    fn evaluate(&self, det: &Detector, params: &ParamStore<f32>, batch: usize) -> Result<f64> {
        let mut preds = Vec::with_capacity(self.val_crops.len());
        for chunk in self.val_crops.chunks(batch.max(1)) {
            let mut g = Graph::new();
            let bound = params.bind(&mut g)?;
            let prefix = cached_prefix(&mut g, &chunk.iter().collect::<Vec<_>>())?;
            let mut f = Forward::new(&mut g, params, &bound, false);
            let out = det.forward_from_prefix(&mut f, prefix)?;
            preds.extend(crop_predictions(&g, out.fusion).into_iter().map(|p| p.label));
        }
        Ok(image_accuracy(self.val_images.iter().map(|(r, l)| (*l, preds[r.clone()].to_vec()))))
    }
}

/// CRC of every parameter outside the fine-tuned blocks.
fn frozen_digest(det: &Detector, params: &ParamStore<f32>) -> u32 {
    let prefixes = det.finetune_prefixes();
    let mut h = crc32fast::Hasher::new();
    for (_, p) in params.iter() {
        if !prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())) {
            h.update(p.name.as_bytes());
            p.value.data().iter().for_each(|v| h.update(&v.to_le_bytes()));
        }
    }
    h.finalize()
}

fn finetune_step(det: &Detector, state: &mut TrainState, data: &FinetuneData, picks: &[Vec<usize>]) -> Result<(f64, f64, f64)> {
    let idx: Vec<usize> = picks.iter().flatten().copied().collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i].class()).collect();
    let mut groups = Vec::with_capacity(picks.len());
    let mut at = 0;
    for p in picks {
        groups.push((at..at + p.len()).collect::<Vec<_>>());
        at += p.len();
    }
    let mut g = Graph::new();
    let bound = state.params.bind(&mut g)?;
    let prefix = cached_prefix(&mut g, &idx.iter().map(|&i| &data.crops[i]).collect::<Vec<_>>())?;
    let mut f = Forward::new(&mut g, &state.params, &bound, true);
    let out = det.forward_from_prefix(&mut f, prefix)?;
    let stats = std::mem::take(&mut f.stats);
    let (total, ce, cda) = total_loss_var(&mut g, out.fusion.logits, &labels, out.fusion.penultimate, &groups, state.lambda)?;
    let read = |v: Var| g.value(v).data()[0] as f64;
    let values = (read(ce), read(cda), read(total));
    apply_step(state, &mut g, &bound, total, &stats)?;
    Ok(values)
}

fn run_finetune(
    det: &Detector,
    state: TrainState,
    data: &FinetuneData,
    cfg: &TrainConfig,
    out: Option<&Path>,
    validate: bool,
    max_epochs: usize,
) -> Result<RunOutput> {
    if state.stage != Stage::Finetune {
        return Err(Error::InvalidArgument("fine-tuning needs a stage-2 state".into()));
    }
    let frozen = frozen_digest(det, &state.params);
    let runner = EpochLoop { cfg, sink: Sink::new(out)?, validate, max_epochs };
    let b = cfg.stage2_batch;
    runner.run(
        state,
        |state, epoch| {
            let mut rng = epoch_rng(state.seed, Stage::Finetune, epoch);
            let orders: Vec<Vec<usize>> = data
                .pools
                .iter()
                .map(|p| {
                    let mut o = p.clone();
                    o.shuffle(&mut rng);
                    o
                })
                .collect();
            let largest = orders.iter().map(Vec::len).max().unwrap_or(0);
            let mut rows = Vec::new();
            for s in 0..largest.div_ceil(b) {
                let picks: Vec<Vec<usize>> =
                    orders.iter().map(|o| (0..b).map(|j| o[(s * b + j) % o.len()]).collect()).collect();
                let lr = state.plateau.lr;
                let (ce, cda, total) = finetune_step(det, state, data, &picks)?;
                rows.push(LogRow { step: state.step, epoch, stage: 2, lr, ce, cda: Some(cda), lambda: state.lambda, total, val_acc: None });
            }
            if frozen_digest(det, &state.params) != frozen {
                return Err(Error::Invariant(format!("frozen parameters changed during stage-2 epoch {epoch}")));
            }
            Ok(rows)
        },
        |state| data.evaluate(det, &state.params, cfg.eval_batch),
    )
}

/// Stage 2: fine-tunes from `state` (see [`TrainState::finetune`]) or
/// resumes a stage-2 checkpoint.
pub fn train_stage2(det: &Detector, state: TrainState, data: Splits<'_>, cfg: &TrainConfig, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    data.check()?;
    let prepared = FinetuneData::new(det, &state.params, data, cfg.eval_batch)?;
    log::info!("stage 2 domains: {}", prepared.domains.join(", "));
    run_finetune(det, state, &prepared, cfg, out, true, cfg.stage2_max_epochs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaProbe {
    pub lambda: f64,
    /// Final-epoch mean cross-entropy.
    pub ce: f64,
    /// Final-epoch mean alignment distance.
    pub cda: f64,
}

impl LambdaProbe {
    pub fn imbalance(&self) -> f64 {
        (self.ce - self.lambda * self.cda).abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub probes: Vec<LambdaProbe>,
}

/// Picks the weight that best balances the two loss terms; ties go to the
/// smaller weight.
pub fn choose_lambda(probes: &[LambdaProbe]) -> Result<f64> {
    let mut sorted = probes.to_vec();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let mut best: Option<LambdaProbe> = None;
    for p in sorted {
        if !p.imbalance().is_finite() {
            return Err(Error::NonFinite { context: format!("probe for lambda {}", p.lambda) });
        }
        if best.is_none_or(|b| p.imbalance() < b.imbalance()) {
            best = Some(p);
        }
    }
    best.map(|b| b.lambda).ok_or_else(|| Error::InvalidArgument("no lambda probes".into()))
}

/// Runs a short stage-2 probe from the stage-1 weights for every grid value.
pub fn select_lambda(det: &Detector, stage1: &TrainState, data: Splits<'_>, cfg: &TrainConfig) -> Result<LambdaSelection> {
    cfg.validate()?;
    data.check()?;
    let prepared = FinetuneData::new(det, &stage1.params, data, cfg.eval_batch)?;
    let mut probes = Vec::with_capacity(cfg.lambda_grid.len());
    for &lambda in &cfg.lambda_grid {
        let state = TrainState::finetune(det, stage1, cfg, lambda)?;
        let run = run_finetune(det, state, &prepared, cfg, None, false, cfg.probe_epochs)?;
        let last = run.epochs.last().expect("probe runs at least one epoch");
        let probe = LambdaProbe { lambda, ce: last.ce, cda: last.cda.unwrap_or(0.0) };
        log::info!("lambda probe {lambda}: ce {:.4} cda {:.4} imbalance {:.4}", probe.ce, probe.cda, probe.imbalance());
        probes.push(probe);
    }
    Ok(LambdaSelection { lambda: choose_lambda(&probes)?, probes })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaChoice {
    Auto,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stages {
    One,
    Two,
    All,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub stage1: Option<RunOutput>,
    pub selection: Option<LambdaSelection>,
    pub stage2: Option<RunOutput>,
    /// Best-validation weights of the last stage that ran.
    pub model: TrainState,
}

/// Stage 1, lambda selection and stage 2 in order, skipping whatever the
/// starting state has already completed. With [`Stages::Two`] the start
/// must be stage-1 weights or a stage-2 checkpoint.
pub fn train_pipeline(
    det: &Detector,
    start: TrainState,
    data: Splits<'_>,
    cfg: &TrainConfig,
    lambda: LambdaChoice,
    stages: Stages,
    out: Option<&Path>,
) -> Result<PipelineOutput> {
    let mut result = PipelineOutput { stage1: None, selection: None, stage2: None, model: start.clone() };
    let base = match (start.stage, stages) {
        (Stage::Full, Stages::One | Stages::All) => {
            let run = train_stage1(det, start, data, cfg, out)?;
            let best = run.best.clone();
            result.stage1 = Some(run);
            best
        }
        (Stage::Full, Stages::Two) if start.epoch == 0 => {
            return Err(Error::InvalidArgument("stage 2 needs trained stage-1 weights".into()));
        }
        (Stage::Finetune, Stages::One) => {
            return Err(Error::InvalidArgument("cannot run stage 1 from a stage-2 checkpoint".into()));
        }
        _ => start,
    };
    result.model = base.clone();
    if stages != Stages::One {
        let state = if base.stage == Stage::Finetune {
            base
        } else {
            let lambda = match lambda {
                LambdaChoice::Fixed(v) => v,
                LambdaChoice::Auto => {
                    let sel = select_lambda(det, &base, data, cfg)?;
                    log::info!("selected lambda {}", sel.lambda);
                    let v = sel.lambda;
                    result.selection = Some(sel);
                    v
                }
            };
            TrainState::finetune(det, &base, cfg, lambda)?
        };
        let run = train_stage2(det, state, data, cfg, out)?;
        result.model = run.best.clone();
        result.stage2 = Some(run);
    }
    if let Some(dir) = out {
        result.model.save(&dir.join(MODEL_FILE))?;
    }
    Ok(result)
}
