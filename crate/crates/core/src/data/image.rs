use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder-domain normalization: intensity in [0, 1] standardized with
/// this mean and standard deviation on every channel. With generator-domain
/// values `g` in [-1, 1] the map is `e = (0.5 g + 0.5 - MEAN) / STD = 2 g`.
pub const ENCODER_MEAN: f32 = 0.5;
pub const ENCODER_STD: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueDomain {
    /// [-1, 1], what the generator emits and the discriminators consume.
    Generator,
    /// Standardized input of the image encoder.
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scale {
    S0,
    S1,
    S2,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::S0, Scale::S1, Scale::S2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Scale> {
        Self::ALL.get(i).copied()
    }
}

/// An RGB image stored row-major, channels interleaved (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub domain: ValueDomain,
    pub scale: Option<Scale>,
}

pub fn generator_to_encoder(v: f32) -> f32 {
    (0.5 * v + 0.5 - ENCODER_MEAN) / ENCODER_STD
}

pub fn encoder_to_generator(v: f32) -> f32 {
    ((v * ENCODER_STD + ENCODER_MEAN) - 0.5) / 0.5
}

impl ImageSample {
    pub fn new(height: usize, width: usize, data: Vec<f32>, domain: ValueDomain) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatures("non-finite pixel".into()));
        }
        Ok(Self {
            height,
            width,
            data,
            domain,
            scale: None,
        })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let data = (0..size * size).flat_map(|_| rgb).collect();
        Self {
            height: size,
            width: size,
            data,
            domain: ValueDomain::Generator,
            scale: None,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Side length; errors for non-square images.
    pub fn size(&self) -> Result<usize> {
        if self.height != self.width {
            return Err(Error::Shape(format!("non-square image {}x{}", self.height, self.width)));
        }
        Ok(self.height)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn with_scale(mut self, scale: Scale) -> Self {
        self.scale = Some(scale);
        self
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let data = img.pixels().flat_map(|p| p.0.map(|c| c as f32 / 127.5 - 1.0)).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
            domain: ValueDomain::Generator,
            scale: None,
        }
    }

    /// Quantizes generator-domain values to 8-bit RGB (values clamped).
    pub fn to_rgb(&self) -> RgbImage {
        let img = self.to_domain(ValueDomain::Generator);
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = img.pixel(y as usize, x as usize);
            Rgb(p.map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(source) => Error::Io {
                    path: path.to_path_buf(),
                    source,
                },
                other => Error::Image(other),
            })?
            .to_rgb8();
        Ok(Self::from_rgb(&img))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
        self.to_rgb().save(path)?;
        Ok(())
    }

    pub fn to_domain(&self, domain: ValueDomain) -> ImageSample {
        let map: fn(f32) -> f32 = match (self.domain, domain) {
            (a, b) if a == b => return self.clone(),
            (ValueDomain::Generator, ValueDomain::Encoder) => generator_to_encoder,
            _ => encoder_to_generator,
        };
        ImageSample {
            data: self.data.iter().map(|&v| map(v)).collect(),
            domain,
            ..self.clone()
        }
    }

    pub fn flip_horizontal(&self) -> ImageSample {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * 3;
                let dst = (y * self.width + x) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    /// Upscales by `factor` and crops a random square of the original size.
    pub fn random_crop(&self, factor: f32, rng: &mut impl Rng) -> Result<ImageSample> {
        let size = self.size()?;
        let big = ((size as f32) * factor).round().max(size as f32) as usize;
        let up = rescale_image(self, big)?;
        let oy = rng.random_range(0..=big - size);
        let ox = rng.random_range(0..=big - size);
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            let row = ((oy + y) * big + ox) * 3;
            data.extend_from_slice(&up.data[row..row + size * 3]);
        }
        Ok(ImageSample { data, ..self.clone() })
    }
}

/// Source coordinate and blend weights for half-pixel-centered bilinear
/// sampling along one axis.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, (x - x0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of a square image (half-pixel centers, edge clamp).
pub fn rescale_image(img: &ImageSample, target: usize) -> Result<ImageSample> {
    let size = img.size()?;
    if target == 0 {
        return Err(Error::Shape("target size must be at least 1".into()));
    }
    if target == size {
        return Ok(img.clone());
    }
    let taps = bilinear_taps(size, target);
    // Horizontal pass then vertical pass.
    let mut rows = vec![0f32; size * target * 3];
    for y in 0..size {
        for (x, &(x0, x1, w)) in taps.iter().enumerate() {
            for c in 0..3 {
                let a = img.data[(y * size + x0) * 3 + c];
                let b = img.data[(y * size + x1) * 3 + c];
                rows[(y * target + x) * 3 + c] = a + (b - a) * w;
            }
        }
    }
    let mut out = vec![0f32; target * target * 3];
    for (y, &(y0, y1, w)) in taps.iter().enumerate() {
        for x in 0..target {
            for c in 0..3 {
                let a = rows[(y0 * target + x) * 3 + c];
                let b = rows[(y1 * target + x) * 3 + c];
                out[(y * target + x) * 3 + c] = a + (b - a) * w;
            }
        }
    }
    Ok(ImageSample {
        height: target,
        width: target,
        data: out,
        domain: img.domain,
        scale: img.scale,
    })
}

/// Stacks same-size images into a `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[ImageSample], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut buf: Vec<f32> = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape("mixed image sizes in batch".into()));
        }
        for c in 0..3 {
            buf.extend(img.data.iter().skip(c).step_by(3));
        }
    }
    Ok(Tensor::from_vec(buf, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`images_to_tensor`].
pub fn tensor_to_images(t: &Tensor, domain: ValueDomain) -> Result<Vec<ImageSample>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| {
            let base = i * 3 * h * w;
            let mut data = vec![0f32; h * w * 3];
            for ch in 0..3 {
                for p in 0..h * w {
                    data[p * 3 + ch] = flat[base + ch * h * w + p];
                }
            }
            ImageSample {
                height: h,
                width: w,
                data,
                domain,
                scale: None,
            }
        })
        .collect())
}

/// Tiles images into a grid, upscaling each to `cell` pixels.
pub fn compose_grid(rows: &[Vec<ImageSample>], cell: usize, pad: usize) -> Result<ImageSample> {
    let n_rows = rows.len();
    let n_cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let h = n_rows * cell + (n_rows + 1) * pad;
    let w = n_cols * cell + (n_cols + 1) * pad;
    let (h, w) = (h.max(1), w.max(1));
    let mut out = ImageSample {
        height: h,
        width: w,
        data: vec![1.0; h * w * 3],
        domain: ValueDomain::Generator,
        scale: None,
    };
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let tile = rescale_image(&img.to_domain(ValueDomain::Generator), cell)?;
            let (oy, ox) = (pad + r * (cell + pad), pad + c * (cell + pad));
            for y in 0..cell {
                let dst = ((oy + y) * out.width + ox) * 3;
                out.data[dst..dst + cell * 3].copy_from_slice(&tile.data[y * cell * 3..(y + 1) * cell * 3]);
            }
        }
    }
    Ok(out)
}
