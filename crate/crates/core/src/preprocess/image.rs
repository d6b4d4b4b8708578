use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, channels interleaved as R, G, B.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(RgbImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                pixels.extend_from_slice(&f(r, c));
            }
        }
        RgbImage { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Copies the `size`×`size` window anchored at (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Result<RgbImage> {
        if row + size > self.height || col + size > self.width {
            return Err(Error::InvalidArgument(format!(
                "window {size}x{size} at ({row},{col}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(size * size * 3);
        for r in row..row + size {
            let start = (r * self.width + col) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + size * 3]);
        }
        Ok(RgbImage { height: size, width: size, pixels })
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        decode(Cursor::new(bytes), "<memory>")
    }

    /// Reads an 8-bit PNG. Grayscale is replicated to three channels and
    /// alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        decode(BufReader::new(file), &path.display().to_string())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_png(&mut out, self.width, self.height, png::ColorType::Rgb, &self.pixels)?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save(path, self.width, self.height, png::ColorType::Rgb, &self.pixels)
    }
}

fn decode<R: std::io::BufRead + std::io::Seek>(reader: R, origin: &str) -> Result<RgbImage> {
    let bad = |e: png::DecodingError| Error::Data(format!("cannot decode PNG {origin}: {e}"));
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("PNG {origin} is too large")))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Data(format!("PNG {origin}: palette was not expanded")));
        }
    };
    let mut pixels = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * channels].chunks(channels) {
            match channels {
                1 | 2 => pixels.extend_from_slice(&[px[0]; 3]),
                _ => pixels.extend_from_slice(&px[..3]),
            }
        }
    }
    RgbImage::new(h, w, pixels)
}

fn write_png<W: Write>(w: W, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let fail = |e: png::EncodingError| Error::Format(format!("PNG encoding failed: {e}"));
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(data).map_err(fail)?;
    writer.finish().map_err(fail)
}

fn save(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_png(&mut out, width, height, color, data)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn save_gray_png(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    save(path, width, height, png::ColorType::Grayscale, data)
}
