//! Synthetic face-free corpus with the two intrinsic clues.
//!
//! Every image starts from the same kind of smooth random field. Camera
//! images pass it through an RGGB mosaic and bilinear demosaicing; fakes are
//! rendered at half resolution and upsampled by one of three kernels.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::{write_manifest, Label, ManifestRecord};
use crate::preprocess::RgbImage;

pub const CAMERA_DOMAIN: &str = "camera";

const SINUSOIDS: usize = 8;
const MEAN_RANGE: (f64, f64) = (60.0, 190.0);
const AMPLITUDE_RANGE: (f64, f64) = (10.0, 16.0);
const RADIUS_RANGE: (f64, f64) = (15.0, 20.0);
const SHOT_NOISE: f64 = 0.5;

const BILINEAR: [[f64; 3]; 3] = [[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]];
const CROSS: [[f64; 3]; 3] = [[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]];
const CHECKERBOARD: [[f64; 3]; 3] = [[0.2, 0.5, 0.2], [0.5, 1.2, 0.5], [0.2, 0.5, 0.2]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Nearest,
    Bilinear,
    Checkerboard,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Nearest, Family::Bilinear, Family::Checkerboard];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Nearest => "nearest",
            Family::Bilinear => "bilinear",
            Family::Checkerboard => "checkerboard",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Family::Nearest => 1,
            Family::Bilinear => 2,
            Family::Checkerboard => 3,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown upsampling family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub family: Family,
    pub base_resolution: usize,
    pub output_resolution: usize,
    pub count: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(family: Family, count: usize, seed: u64) -> Self {
        SynthConfig { family, base_resolution: 64, output_resolution: 128, count, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_resolution != 2 * self.base_resolution || self.base_resolution == 0 {
            return Err(Error::InvalidArgument(format!(
                "output resolution {} must be twice the base resolution {}",
                self.output_resolution, self.base_resolution
            )));
        }
        if self.count == 0 {
            return Err(Error::InvalidArgument("count must be at least 1".into()));
        }
        Ok(())
    }
}

/// A generated image with its manifest entry.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: ManifestRecord,
    pub image: RgbImage,
}

fn record(domain: &str, label: Label, index: usize) -> ManifestRecord {
    ManifestRecord {
        path: PathBuf::from(domain).join(label.as_str()).join(format!("{index:05}.png")),
        label,
        domain: domain.to_string(),
    }
}

/// Independent generator per (seed, domain, index) so images can be made in
/// any order.
fn image_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 40) | index as u64);
    rng
}

struct Wave {
    amplitude: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

struct FieldParams {
    means: [f64; 3],
    waves: [Vec<Wave>; 3],
}

fn field_params(rng: &mut ChaCha8Rng) -> FieldParams {
    let mut means = [0.0; 3];
    let mut waves: [Vec<Wave>; 3] = Default::default();
    for c in 0..3 {
        means[c] = rng.random_range(MEAN_RANGE.0..MEAN_RANGE.1);
        for _ in 0..SINUSOIDS {
            let radius = rng.random_range(RADIUS_RANGE.0..RADIUS_RANGE.1);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            waves[c].push(Wave {
                amplitude: rng.random_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1),
                fx: radius * theta.cos(),
                fy: radius * theta.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            });
        }
    }
    FieldParams { means, waves }
}

/// Planar `[3][res*res]` rendering of the field at `res`, with shot noise.
/// Frequencies are in cycles per image, so the content is resolution-free.
fn render_field(p: &FieldParams, res: usize, rng: &mut ChaCha8Rng) -> [Vec<f64>; 3] {
    let coord = |i: usize| (i as f64 + 0.5) / res as f64;
    let mut planes: [Vec<f64>; 3] = Default::default();
    for c in 0..3 {
        let plane = &mut planes[c];
        plane.reserve(res * res);
        for r in 0..res {
            for col in 0..res {
                let (x, y) = (coord(col), coord(r));
                let v: f64 = p.waves[c]
                    .iter()
                    .map(|w| w.amplitude * (std::f64::consts::TAU * (w.fx * x + w.fy * y) + w.phase).sin())
                    .sum();
                plane.push(p.means[c] + v);
            }
        }
    }
    let scale = SHOT_NOISE / 128f64.sqrt();
    for plane in &mut planes {
        for v in plane.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += z * scale * v.max(1.0).sqrt();
        }
    }
    planes
}

/// 3×3 correlation with mirror boundaries (edge sample not repeated).
fn correlate3(plane: &[f64], n: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mirror = |i: isize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * (n - 1) - i as usize
        } else {
            i as usize
        }
    };
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for (a, row) in k.iter().enumerate() {
                let rr = mirror(r as isize + a as isize - 1);
                for (b, &kv) in row.iter().enumerate() {
                    if kv != 0.0 {
                        acc += kv * plane[rr * n + mirror(c as isize + b as isize - 1)];
                    }
                }
            }
            out[r * n + c] = acc;
        }
    }
    out
}

/// RGGB sampling followed by bilinear interpolation of the missing samples.
fn mosaic_and_demosaic(planes: &[Vec<f64>; 3], n: usize) -> [Vec<f64>; 3] {
    let site = |c: usize, r: usize, col: usize| match c {
        0 => r % 2 == 0 && col % 2 == 0,
        2 => r % 2 == 1 && col % 2 == 1,
        _ => (r + col) % 2 == 1,
    };
    let mut out: [Vec<f64>; 3] = Default::default();
    for c in 0..3 {
        let sampled: Vec<f64> = (0..n * n)
            .map(|i| if site(c, i / n, i % n) { planes[c][i] } else { 0.0 })
            .collect();
        out[c] = correlate3(&sampled, n, if c == 1 { &CROSS } else { &BILINEAR });
    }
    out
}

fn upsample(plane: &[f64], n: usize, family: Family) -> Vec<f64> {
    let m = 2 * n;
    match family {
        Family::Nearest => (0..m * m).map(|i| plane[(i / m / 2) * n + (i % m) / 2]).collect(),
        Family::Bilinear | Family::Checkerboard => {
            let mut z = vec![0.0; m * m];
            for r in 0..n {
                for c in 0..n {
                    z[2 * r * m + 2 * c] = plane[r * n + c];
                }
            }
            let k = if family == Family::Bilinear { &BILINEAR } else { &CHECKERBOARD };
            correlate3(&z, m, k)
        }
    }
}

fn quantize(planes: &[Vec<f64>; 3], n: usize) -> RgbImage {
    RgbImage::from_fn(n, n, |r, c| {
        let px = |k: usize| planes[k][r * n + c].round().clamp(0.0, 255.0) as u8;
        [px(0), px(1), px(2)]
    })
}

pub fn render_real(seed: u64, index: usize, resolution: usize) -> RgbImage {
    let mut rng = image_rng(seed, 0, index);
    let params = field_params(&mut rng);
    let field = render_field(&params, resolution, &mut rng);
    quantize(&mosaic_and_demosaic(&field, resolution), resolution)
}

pub fn render_fake(family: Family, seed: u64, index: usize, base_resolution: usize) -> RgbImage {
    let mut rng = image_rng(seed, family.stream(), index);
    let params = field_params(&mut rng);
    let field = render_field(&params, base_resolution, &mut rng);
    let up = [0, 1, 2].map(|c| upsample(&field[c], base_resolution, family));
    quantize(&up, 2 * base_resolution)
}

/// Camera-pipeline images, domain `camera`, label `real`.
pub fn gen_real(seed: u64, count: usize) -> Vec<Sample> {
    (0..count)
        .into_par_iter()
        .map(|i| Sample { record: record(CAMERA_DOMAIN, Label::Real, i), image: render_real(seed, i, 128) })
        .collect()
}

pub fn gen_fake_with(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..cfg.count)
        .into_par_iter()
        .map(|i| Sample {
            record: record(cfg.family.as_str(), Label::Fake, i),
            image: render_fake(cfg.family, cfg.seed, i, cfg.base_resolution),
        })
        .collect())
}

pub fn gen_fake(family: &str, seed: u64, count: usize) -> Result<Vec<Sample>> {
    gen_fake_with(&SynthConfig::new(family.parse()?, count, seed))
}

/// Writes `count` reals plus `count` fakes per family under `out` and
/// returns the manifest rows (also written to `out/manifest.csv`).
pub fn write_corpus(out: &Path, seed: u64, count: usize, families: &[Family]) -> Result<Vec<ManifestRecord>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let mut samples = gen_real(seed, count);
    for &f in families {
        samples.extend(gen_fake_with(&SynthConfig::new(f, count, seed))?);
    }
    samples.par_iter().try_for_each(|s| -> Result<()> {
        let path = out.join(&s.record.path);
        let dir = path.parent().expect("record paths have a directory");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        s.image.save_png(&path)
    })?;
    let records: Vec<ManifestRecord> = samples.into_iter().map(|s| s.record).collect();
    write_manifest(&out.join("manifest.csv"), &records)?;
    Ok(records)
}
