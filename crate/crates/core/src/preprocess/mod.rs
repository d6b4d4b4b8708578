//! Intrinsic-clue inputs: channel difference images, spectrum images and
//! the crop grid that feeds them.

mod image;
mod spectrum;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use image::RgbImage;
pub use spectrum::{
    average_spectrum, compute_si, dft2, fftshift, hf_energy, log_spectrum, luminance, SpectrumImage,
};

/// Side of the square network input window.
pub const CROP: usize = 128;

fn check_crop(op: &'static str, img: &RgbImage) -> Result<()> {
    if img.height() != CROP || img.width() != CROP {
        return Err(Error::shape(
            op,
            format!("expected a {CROP}x{CROP} crop, got {}x{}", img.height(), img.width()),
        ));
    }
    Ok(())
}

/// Channel difference image `(R-G, B-G, R-B) / 255`, `[3, 128, 128]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cdi(Tensor<f32>);

impl Cdi {
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        &self.0.data()[k * CROP * CROP..(k + 1) * CROP * CROP]
    }
}

/// Un-normalized planes `R-G`, `B-G`, `R-B` of any image.
pub fn channel_differences(img: &RgbImage) -> [Vec<i16>; 3] {
    let n = img.height() * img.width();
    let mut out = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for p in img.pixels().chunks(3) {
        let (r, g, b) = (p[0] as i16, p[1] as i16, p[2] as i16);
        out[0].push(r - g);
        out[1].push(b - g);
        out[2].push(r - b);
    }
    out
}

pub fn compute_cdi(crop: &RgbImage) -> Result<Cdi> {
    check_crop("compute_cdi", crop)?;
    let data = channel_differences(crop)
        .iter()
        .flat_map(|plane| plane.iter().map(|&d| d as f32 / 255.0))
        .collect();
    Ok(Cdi(Tensor::new(vec![3, CROP, CROP], data)?))
}

/// HF energy of the `R-G` difference plane.
pub fn cdi_hf_energy(img: &RgbImage) -> Result<f64> {
    let [rg, _, _] = channel_differences(img);
    let plane: Vec<f64> = rg.iter().map(|&v| v as f64 / 255.0).collect();
    hf_energy(&plane, img.height(), img.width())
}

/// Top-left anchors of the crop windows of an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropGrid {
    pub offsets: Vec<(usize, usize)>,
}

/// Anchors along one axis: multiples of the window, plus `dim - 128` when
/// the axis is not an exact multiple.
pub fn crop_anchors(dim: usize) -> Vec<usize> {
    let mut anchors: Vec<usize> = (0..=dim.saturating_sub(CROP)).step_by(CROP).collect();
    if dim >= CROP && dim % CROP != 0 {
        anchors.push(dim - CROP);
    }
    anchors
}

pub fn crop_parts(img: &RgbImage) -> Result<(CropGrid, Vec<RgbImage>)> {
    if img.height() < CROP || img.width() < CROP {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than the {CROP}x{CROP} crop",
            img.height(),
            img.width()
        )));
    }
    let mut offsets = Vec::new();
    for &r in &crop_anchors(img.height()) {
        for &c in &crop_anchors(img.width()) {
            offsets.push((r, c));
        }
    }
    let crops = offsets
        .iter()
        .map(|&(r, c)| img.crop(r, c, CROP))
        .collect::<Result<Vec<_>>>()?;
    Ok((CropGrid { offsets }, crops))
}

/// Network inputs of one crop.
#[derive(Clone, Debug, PartialEq)]
pub struct CropInputs {
    pub cdi: Tensor<f32>,
    pub si: Tensor<f32>,
}

pub fn crop_inputs(crop: &RgbImage) -> Result<CropInputs> {
    Ok(CropInputs {
        cdi: compute_cdi(crop)?.into_tensor(),
        si: compute_si(crop)?.into_tensor(),
    })
}

fn to_byte(v: f32) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

/// Writes the CDI as an RGB PNG, mapping `[-1, 1]` to `[0, 255]`.
pub fn dump_cdi(cdi: &Cdi, path: &Path) -> Result<()> {
    let n = CROP * CROP;
    let mut pixels = Vec::with_capacity(3 * n);
    for i in 0..n {
        for k in 0..3 {
            pixels.push(to_byte((cdi.channel(k)[i] + 1.0) * 127.5));
        }
    }
    RgbImage::new(CROP, CROP, pixels)?.save_png(path)
}

/// Writes the SI as a grayscale PNG, mapping `[0, 1]` to `[0, 255]`.
pub fn dump_si(si: &SpectrumImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = si.tensor().data().iter().map(|&v| to_byte(v * 255.0)).collect();
    image::save_gray_png(path, CROP, CROP, &bytes)
}
