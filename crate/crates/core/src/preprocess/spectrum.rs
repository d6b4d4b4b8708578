use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{check_crop, RgbImage, CROP};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Min-max scaled, centred log-magnitude spectrum of a crop's luminance, `[1, 128, 128]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumImage(Tensor<f32>);

impl SpectrumImage {
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.0.data()[row * CROP + col]
    }
}

/// 2D DFT of a real `h`×`w` plane, unshifted, row-major.
pub fn dft2(plane: &[f64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    if plane.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape("dft2", format!("{} values for a {h}x{w} plane", plane.len())));
    }
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut data: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    row_fft.process(&mut data);
    let mut column = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = data[r * w + c];
        }
        col_fft.process(&mut column);
        for r in 0..h {
            data[r * w + c] = column[r];
        }
    }
    Ok(data)
}

/// Moves the zero frequency to `(h/2, w/2)`.
pub fn fftshift<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for r in 0..h {
        for c in 0..w {
            out[((r + h / 2) % h) * w + (c + w / 2) % w] = data[r * w + c];
        }
    }
    out
}

/// `log(1 + |F|)`, centred.
pub fn log_spectrum(plane: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let f = dft2(plane, h, w)?;
    let mags: Vec<f64> = f.iter().map(|z| z.norm().ln_1p()).collect();
    Ok(fftshift(&mags, h, w))
}

/// `Y = 0.299 R + 0.587 G + 0.114 B`.
pub fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .chunks(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn min_max_scaled(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
}

fn spectrum_image(log_mag: &[f64]) -> SpectrumImage {
    let scaled = min_max_scaled(log_mag);
    SpectrumImage(Tensor::new(vec![1, CROP, CROP], scaled).expect("crop-sized spectrum"))
}

pub fn compute_si(crop: &RgbImage) -> Result<SpectrumImage> {
    check_crop("compute_si", crop)?;
    Ok(spectrum_image(&log_spectrum(&luminance(crop), CROP, CROP)?))
}

/// Mean of the unscaled log spectra of the first `n` images, scaled once.
/// Images larger than a crop contribute the mean over their crop grid.
pub fn average_spectrum(images: &[RgbImage], n: usize) -> Result<SpectrumImage> {
    if n == 0 || images.is_empty() {
        return Err(Error::InvalidArgument("average_spectrum needs at least one image".into()));
    }
    if n > images.len() {
        return Err(Error::InvalidArgument(format!(
            "asked to average {n} spectra but only {} images were given",
            images.len()
        )));
    }
    let mut acc = vec![0.0; CROP * CROP];
    for img in &images[..n] {
        let (_, crops) = super::crop_parts(img)?;
        let weight = 1.0 / (crops.len() * n) as f64;
        for crop in &crops {
            let s = log_spectrum(&luminance(crop), CROP, CROP)?;
            acc.iter_mut().zip(&s).for_each(|(a, v)| *a += v * weight);
        }
    }
    Ok(spectrum_image(&acc))
}

/// Fraction of spectral energy `|F|^2` outside the centred half band
/// (`|u| < h/4` and `|v| < w/4`). The plane is demeaned first, so the DC
/// term never counts. A flat plane has no energy and yields 0.
pub fn hf_energy(plane: &[f64], h: usize, w: usize) -> Result<f64> {
    let mean = plane.iter().sum::<f64>() / plane.len().max(1) as f64;
    let centred: Vec<f64> = plane.iter().map(|v| v - mean).collect();
    let f = dft2(&centred, h, w)?;
    let signed = |i: usize, n: usize| if i < n.div_ceil(2) { i as isize } else { i as isize - n as isize };
    let (mut total, mut high) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let e = f[r * w + c].norm_sqr();
            total += e;
            let (u, v) = (signed(r, h).unsigned_abs(), signed(c, w).unsigned_abs());
            if 4 * u >= h || 4 * v >= w {
                high += e;
            }
        }
    }
    Ok(if total > 0.0 { high / total } else { 0.0 })
}
