//! PNG ingestion and the planar float image used at the model boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Planar RGB image with values in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "rgb image {width}x{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        RgbImage {
            width,
            height,
            data: vec![value; 3 * width * height],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Rec. 601 luma.
    pub fn luma(&self, y: usize, x: usize) -> f32 {
        0.299 * self.get(0, y, x) + 0.587 * self.get(1, y, x) + 0.114 * self.get(2, y, x)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 * self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push(quantize(self.get(c, y, x)));
                }
            }
        }
        out
    }

    /// Bilinear resize with corner-aligned sampling: output pixel `k` samples
    /// source coordinate `k * (in - 1) / (out - 1)`.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let scale = |out: usize, inp: usize| {
            if out > 1 {
                (inp - 1) as f64 / (out - 1) as f64
            } else {
                0.0
            }
        };
        let (sx, sy) = (scale(width, self.width), scale(height, self.height));
        let mut out = RgbImage::filled(width, height, 0.0);
        for y in 0..height {
            let fy = y as f64 * sy;
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = x as f64 * sx;
                let x0 = (fx.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..3 {
                    let top = self.get(c, y0, x0) as f64 * (1.0 - tx) + self.get(c, y0, x1) as f64 * tx;
                    let bot = self.get(c, y1, x0) as f64 * (1.0 - tx) + self.get(c, y1, x1) as f64 * tx;
                    out.set(c, y, x, (top * (1.0 - ty) + bot * ty) as f32);
                }
            }
        }
        out
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(bad(format!("unsupported color type {other:?}"))),
    };
    let mut img = RgbImage::filled(w, h, 0.0);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..x * channels + channels];
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            for (c, &v) in rgb.iter().enumerate() {
                img.set(c, y, x, v as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

fn encode_png(width: u32, height: u32, color: png::ColorType, pixels: &[u8], w: impl Write) -> std::result::Result<(), png::EncodingError> {
    let mut encoder = png::Encoder::new(w, width, height);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_compression(png::Compression::Balanced);
    encoder.set_filter(png::Filter::Sub);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(pixels)?;
    writer.finish()
}

/// Encodes 8-bit RGBA pixels with fixed encoder settings, so identical pixels give identical bytes.
pub fn encode_rgba_png(width: usize, height: usize, rgba: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_png(width as u32, height as u32, png::ColorType::Rgba, rgba, &mut out)
        .map_err(|e| Error::InvalidArgument(format!("png encoding failed: {e}")))?;
    Ok(out)
}

pub fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    encode_png(
        img.width as u32,
        img.height as u32,
        png::ColorType::Rgb,
        &img.to_rgb8(),
        BufWriter::new(file),
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
