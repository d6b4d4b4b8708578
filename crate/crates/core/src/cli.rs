//! Argument definitions and command implementations of the `octforge` binary.
//! Every command returns a JSON value for stdout; progress goes to the log.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::harness::{
    builtin_protocol, load_images, manifest_root, predict_crops, predict_image, run_protocol, split_dataset, DiskSource,
    ImageVerdict, Phase, ProtocolConfig, ProtocolSpec, SplitRatio, TrainedModel,
};
use crate::manifest::load_manifest;
use crate::model::ModelConfig;
use crate::preprocess::{cdi_hf_energy, compute_cdi, compute_si, crop_parts, dump_cdi, dump_si, RgbImage};
use crate::synthgen::{write_corpus, Family};
use crate::trainer::{evaluate_images, train_pipeline, LambdaChoice, Splits, Stages, TrainConfig, TrainState};

pub const THREADS_ENV: &str = "OCTFORGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "octforge", version, about = "Fake-face detection with CDI/SI clues and octave-convolution backbones")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic real/fake corpus with a manifest.
    Synth(SynthArgs),
    /// Print HF statistics of an image and optionally dump its CDI/SI.
    Inspect(InspectArgs),
    /// Train a detector on a manifest.
    Train(TrainArgs),
    /// Classify images with a trained checkpoint.
    Eval(EvalArgs),
    /// Run a cross-domain protocol and emit its report.
    Protocol(ProtocolArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Images per class.
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    /// Comma-separated fake families.
    #[arg(long, value_delimiter = ',', default_values_t = Family::ALL.map(|f| f.as_str().to_string()))]
    pub families: Vec<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub image: PathBuf,
    /// Write the CDI of each crop as PNG.
    #[arg(long)]
    pub dump_cdi: Option<PathBuf>,
    /// Write the SI of each crop as PNG.
    #[arg(long)]
    pub dump_si: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

impl From<StageArg> for Stages {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::One => Stages::One,
            StageArg::Two => Stages::Two,
            StageArg::All => Stages::All,
        }
    }
}

/// `auto` or a non-negative weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaArg(pub LambdaChoice);

impl FromStr for LambdaArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LambdaArg(LambdaChoice::Auto));
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(LambdaArg(LambdaChoice::Fixed(v))),
            _ => Err(format!("expected `auto` or a value >= 0, got {s:?}")),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "all")]
    pub stage: StageArg,
    #[arg(long, default_value = "auto")]
    pub lambda: LambdaArg,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required_unless_present = "manifest")]
    pub image: Vec<PathBuf>,
    /// Score every record of a manifest instead of single images.
    #[arg(long, conflicts_with = "image")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    /// Built-in protocol name or a TOML protocol file.
    #[arg(long)]
    pub spec: String,
    /// Corpus manifest; built-in protocols generate a synthetic corpus when omitted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Images per class of the generated corpus.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value = "auto")]
    pub lambda: LambdaArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings file. Flags override file values, which override defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: CliConfig =
            toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn log_resolved(&self, extra: &Value) {
        let text = toml::to_string(self).unwrap_or_default();
        log::info!("resolved config:\n{text}{extra}");
    }
}

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => 4,
        Error::Data(_) | Error::Io { .. } | Error::Format(_) => 3,
        Error::InvalidArgument(_) => 2,
        Error::Shape { .. } | Error::Invariant(_) => 1,
    }
}

/// Caps the global worker pool from `OCTFORGE_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Protocol(a) => cmd_protocol(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Value> {
    let families = a.families.iter().map(|f| f.parse()).collect::<Result<Vec<Family>>>()?;
    let records = write_corpus(&a.out, a.seed, a.count, &families)?;
    Ok(json!({
        "manifest": a.out.join("manifest.csv"),
        "rows": records.len(),
        "seed": a.seed,
        "families": families.iter().map(|f| f.as_str()).collect::<Vec<_>>(),
    }))
}

fn numbered(path: &Path, k: usize, n: usize) -> PathBuf {
    if n == 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dump");
    path.with_file_name(format!("{stem}-{k}.png"))
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<Value> {
    let img = RgbImage::load_png(&a.image)?;
    let (grid, crops) = crop_parts(&img)?;
    let mut per_crop = Vec::with_capacity(crops.len());
    for (k, crop) in crops.iter().enumerate() {
        if let Some(p) = &a.dump_cdi {
            dump_cdi(&compute_cdi(crop)?, &numbered(p, k, crops.len()))?;
        }
        if let Some(p) = &a.dump_si {
            dump_si(&compute_si(crop)?, &numbered(p, k, crops.len()))?;
        }
        let (row, col) = grid.offsets[k];
        per_crop.push(json!({ "row": row, "col": col, "hf_cdi": cdi_hf_energy(crop)? }));
    }
    Ok(json!({
        "image": a.image,
        "height": img.height(),
        "width": img.width(),
        "hf_cdi": cdi_hf_energy(&img)?,
        "crops": per_crop,
    }))
}

pub fn cmd_train(a: &TrainArgs) -> Result<Value> {
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    cfg.train.seed = a.seed;
    cfg.log_resolved(&json!({ "stage": format!("{:?}", a.stage), "lambda": format!("{:?}", a.lambda.0) }));
    let records = load_manifest(&a.manifest)?;
    let split = split_dataset(&records, SplitRatio::default(), a.seed)?;
    let source = DiskSource::new(manifest_root(&a.manifest));
    let train = load_images(&split.train, &source, Phase::Training)?;
    let val = load_images(&split.val, &source, Phase::Training)?;
    let (det, start) = match &a.resume {
        Some(path) => {
            let (det, state) = TrainState::load(path)?;
            if state.seed != a.seed {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint was trained with seed {}, not {}",
                    state.seed, a.seed
                )));
            }
            log::info!("resuming stage {} after epoch {}", state.stage.number(), state.epoch);
            (det, state)
        }
        None if a.stage == StageArg::Two => {
            return Err(Error::InvalidArgument("--stage 2 needs --resume with stage-1 weights".into()));
        }
        None => TrainState::fresh(cfg.model, &cfg.train)?,
    };
    let data = Splits { train: &train, val: &val };
    let result = train_pipeline(&det, start, data, &cfg.train, a.lambda.0, a.stage.into(), Some(&a.out))?;
    let test = load_images(&split.test, &source, Phase::Evaluation)?;
    let test_acc = evaluate_images(&det, &result.model.params, &test, cfg.train.eval_batch)?;
    Ok(json!({
        "model": a.out.join(crate::trainer::MODEL_FILE),
        "log": a.out.join(crate::trainer::LOG_FILE),
        "stage": result.model.stage.number(),
        "lambda": result.model.lambda,
        "best_val_acc": result.model.best_val,
        "test_acc": test_acc,
        "stage1_epochs": result.stage1.as_ref().map(|r| r.epochs.len()),
        "stage2_epochs": result.stage2.as_ref().map(|r| r.epochs.len()),
        "lambda_probes": result.selection.as_ref().map(|s| {
            s.probes.iter().map(|p| json!({ "lambda": p.lambda, "ce": p.ce, "cda": p.cda })).collect::<Vec<_>>()
        }),
    }))
}

fn verdict_json(v: &ImageVerdict) -> Value {
    json!({
        "verdict": v.label.as_str(),
        "mean_fusion_weights": { "cdi": v.weights.0, "si": v.weights.1 },
        "crops": v.crops.iter().map(|c| json!({
            "verdict": c.label.as_str(),
            "fake_probability": c.fake_probability,
            "weights": { "cdi": c.weights.0, "si": c.weights.1 },
        })).collect::<Vec<_>>(),
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let (det, state) = TrainState::load(&a.model)?;
    let model = TrainedModel { detector: &det, params: &state.params };
    if let Some(manifest) = &a.manifest {
        let records = load_manifest(manifest)?;
        let images = load_images(&records, &DiskSource::new(manifest_root(manifest)), Phase::Evaluation)?;
        let mut confusion = crate::harness::Confusion::default();
        let mut crops = crate::harness::Confusion::default();
        for im in &images {
            let v = predict_crops(&im.crops, &model)?;
            confusion.add(v.label, im.label);
            v.crops.iter().for_each(|c| crops.add(c.label, im.label));
        }
        return Ok(json!({
            "images": images.len(),
            "image_acc": confusion.accuracy(),
            "crop_acc": crops.accuracy(),
            "confusion": confusion,
        }));
    }
    let mut out = Vec::with_capacity(a.image.len());
    for path in &a.image {
        let v = predict_image(&RgbImage::load_png(path)?, &model)?;
        let mut j = verdict_json(&v);
        j["image"] = json!(path);
        out.push(j);
    }
    Ok(if out.len() == 1 { out.pop().expect("one image") } else { Value::Array(out) })
}

pub fn resolve_protocol(spec: &str) -> Result<ProtocolSpec> {
    if let Some(p) = builtin_protocol(spec) {
        return Ok(p);
    }
    let path = Path::new(spec);
    if path.is_file() {
        return ProtocolSpec::from_toml_file(path);
    }
    Err(Error::InvalidArgument(format!(
        "unknown protocol {spec:?} (built-ins: {})",
        crate::harness::BUILTIN_PROTOCOLS.join(", ")
    )))
}

pub fn cmd_protocol(a: &ProtocolArgs) -> Result<Value> {
    let spec = resolve_protocol(&a.spec)?;
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.log_resolved(&json!({ "protocol": spec, "repeats": a.repeats, "lambda": format!("{:?}", a.lambda.0) }));
    let manifest = match &a.manifest {
        Some(m) => m.clone(),
        None if builtin_protocol(&a.spec).is_some() => {
            let dir = a.out.join("corpus");
            log::info!("generating synthetic corpus in {}", dir.display());
            write_corpus(&dir, cfg.train.seed, a.count, &Family::ALL)?;
            dir.join("manifest.csv")
        }
        None => return Err(Error::InvalidArgument("--manifest is required for protocol files".into())),
    };
    let records = load_manifest(&manifest)?;
    let source = DiskSource::new(manifest_root(&manifest));
    let pcfg = ProtocolConfig {
        model: cfg.model,
        train: cfg.train.clone(),
        lambda: a.lambda.0,
        repeats: a.repeats,
        ratio: SplitRatio::default(),
    };
    let report = run_protocol(&spec, &records, &source, &pcfg, Some(&a.out))?;
    let value = serde_json::to_value(&report).map_err(|e| Error::Data(e.to_string()))?;
    let path = a.out.join("report.json");
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(value)
}
