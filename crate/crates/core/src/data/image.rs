use std::io::Cursor;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result, Sample};
use crate::tensor::Tensor;

pub const INPUT_HEIGHT: usize = 66;
pub const INPUT_WIDTH: usize = 200;

/// Interleaved 8-bit RGB, row-major `height × width × 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(DataError::Config(format!(
                "{height}×{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(height * width * 3)
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mirrored(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width * 3) {
            for px in row.chunks(3).rev() {
                data.extend_from_slice(px);
            }
        }
        Self { data, ..*self }
    }
}

pub fn decode_jpeg(bytes: &[u8]) -> Result<RawImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Jpeg)
        .map_err(|e| DataError::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    RawImage::new(h as usize, w as usize, img.into_raw())
}

pub fn encode_jpeg(img: &RawImage, quality: u8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let encoder =
        image::codecs::jpeg::JpegEncoder::new_with_quality(Cursor::new(&mut out), quality);
    image::ImageEncoder::write_image(
        encoder,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| DataError::Image(e.to_string()))?;
    Ok(out)
}

pub fn load_jpeg(path: &Path) -> Result<RawImage> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_jpeg(&bytes).map_err(|e| match e {
        DataError::Image(m) => DataError::Image(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Rows removed from the top and bottom of a raw frame before resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Crop {
    pub top: usize,
    pub bottom: usize,
}

/// Geometric parameters of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Transform {
    pub flip: bool,
    /// Rotation about the crop-window centre, degrees, counter-clockwise.
    pub rotation_deg: f64,
    /// Shift of the crop window in raw pixels.
    pub jitter_x: i32,
    pub jitter_y: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip: bool,
    pub max_rotation_deg: f64,
    pub max_jitter_px: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            max_rotation_deg: 5.0,
            max_jitter_px: 4,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: false,
            max_rotation_deg: 0.0,
            max_jitter_px: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=15.0).contains(&self.max_rotation_deg) {
            return Err(DataError::Config(format!(
                "rotation bound must lie in [0, 15] degrees, got {}",
                self.max_rotation_deg
            )));
        }
        if self.max_jitter_px > 4 {
            return Err(DataError::Config(format!(
                "crop jitter is limited to 4 px, got {}",
                self.max_jitter_px
            )));
        }
        Ok(())
    }

    /// Draws flip, rotation and jitter, in that order.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Transform {
        let flip = self.flip && rng.gen_bool(0.5);
        let rotation_deg = if self.max_rotation_deg > 0.0 {
            rng.gen_range(-self.max_rotation_deg..=self.max_rotation_deg)
        } else {
            0.0
        };
        let j = self.max_jitter_px as i32;
        let (jitter_x, jitter_y) = if j > 0 {
            (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
        } else {
            (0, 0)
        };
        Transform {
            flip,
            rotation_deg,
            jitter_x,
            jitter_y,
        }
    }
}

/// Crop, bilinear resize to 66×200, planar channel layout and `p/127.5 − 1`.
pub fn preprocess(raw: &RawImage, crop: Crop) -> Result<Tensor<f32>> {
    preprocess_with(raw, crop, &Transform::default())
}

/// [`preprocess`] with an augmentation transform folded into the resampling,
/// so every output pixel is interpolated exactly once.
pub fn preprocess_with(raw: &RawImage, crop: Crop, t: &Transform) -> Result<Tensor<f32>> {
    if raw.height < crop.top + crop.bottom + 1 || raw.width == 0 {
        return Err(DataError::Config(format!(
            "crop {}+{} leaves nothing of a {}-row image",
            crop.top, crop.bottom, raw.height
        )));
    }
    let (oh, ow) = (INPUT_HEIGHT, INPUT_WIDTH);
    let win_h = (raw.height - crop.top - crop.bottom) as f64;
    let win_w = raw.width as f64;
    let y0 = crop.top as f64 + t.jitter_y as f64;
    let x0 = t.jitter_x as f64;
    let (sy, sx) = (win_h / oh as f64, win_w / ow as f64);
    let rotate = t.rotation_deg != 0.0;
    let (sin, cos) = t.rotation_deg.to_radians().sin_cos();
    let (cy, cx) = (y0 + win_h / 2.0 - 0.5, x0 + win_w / 2.0 - 0.5);

    let ylo = y0.max(0.0);
    let yhi = (y0 + win_h - 1.0).min((raw.height - 1) as f64).max(ylo);
    let xlo = x0.max(0.0);
    let xhi = (x0 + win_w - 1.0).min((raw.width - 1) as f64).max(xlo);

    let plane = oh * ow;
    let mut out = vec![0f32; 3 * plane];
    for oy in 0..oh {
        for ox in 0..ow {
            let ux = if t.flip { ow - 1 - ox } else { ox };
            let mut y = y0 + (oy as f64 + 0.5) * sy - 0.5;
            let mut x = x0 + (ux as f64 + 0.5) * sx - 0.5;
            if rotate {
                let (dy, dx) = (y - cy, x - cx);
                // Counter-clockwise on screen (y grows downwards).
                x = cx + cos * dx + sin * dy;
                y = cy - sin * dx + cos * dy;
            }
            // Samples never reach outside the (shifted) window, and never
            // outside the frame.
            let y = y.clamp(ylo, yhi);
            let x = x.clamp(xlo, xhi);
            let px = bilinear(raw, y, x);
            for c in 0..3 {
                out[c * plane + oy * ow + ox] = (px[c] / 127.5 - 1.0).clamp(-1.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(vec![3, oh, ow], out).map_err(Into::into)
}

/// Edge-clamped bilinear sample at fractional pixel centre coordinates.
fn bilinear(img: &RawImage, y: f64, x: f64) -> [f64; 3] {
    let maxy = (img.height - 1) as f64;
    let maxx = (img.width - 1) as f64;
    let y = y.clamp(0.0, maxy);
    let x = x.clamp(0.0, maxx);
    let (yf, xf) = (y.floor(), x.floor());
    let (fy, fx) = (y - yf, x - xf);
    let (y0, x0) = (yf as usize, xf as usize);
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let p00 = img.pixel(y0, x0);
    let p01 = img.pixel(y0, x1);
    let p10 = img.pixel(y1, x0);
    let p11 = img.pixel(y1, x1);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
        let bot = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Draws a transform from `rng` and applies it; the label is negated when the
/// frame is mirrored, rotation and jitter leave it unchanged.
pub fn augment<R: Rng + ?Sized>(
    raw: &RawImage,
    label: f32,
    crop: Crop,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<Sample> {
    config.validate()?;
    let t = config.draw(rng);
    Ok(Sample {
        image: preprocess_with(raw, crop, &t)?,
        label: if t.flip { -label } else { label },
    })
}

/// Horizontal mirror of an already preprocessed sample, negating its label.
pub fn flip_sample(sample: &Sample) -> Sample {
    let shape = sample.image.shape();
    let w = shape[shape.len() - 1];
    let mut data = sample.image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Sample {
        image: Tensor::new(shape.to_vec(), data).expect("same shape"),
        label: -sample.label,
    }
}
