//! Random crop/resize, flip, color jitter, grayscale and blur.

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{ImageTensor, MIN_SIDE};
use crate::error::{Error, Result};

/// Crops narrower than this (in source pixels) are rejected.
pub const MIN_CROP_SIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub enabled: bool,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - strength, 1 + strength]`.
    pub strength: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBlur {
    pub enabled: bool,
    pub probability: f64,
    /// Odd kernel width.
    pub kernel_size: usize,
    pub sigma_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub output_size: (usize, usize),
    pub flip_probability: f64,
    pub color_jitter: ColorJitter,
    pub grayscale_probability: f64,
    pub gaussian_blur: GaussianBlur,
    /// Fraction of the source area kept by the random crop.
    pub crop_scale_range: (f64, f64),
}

impl AugmentationSpec {
    /// No randomness at all; only resizes when `output_size` differs from
    /// the input.
    pub fn identity(output_size: (usize, usize)) -> Self {
        Self {
            output_size,
            flip_probability: 0.0,
            color_jitter: ColorJitter {
                enabled: false,
                strength: 0.0,
                probability: 0.0,
            },
            grayscale_probability: 0.0,
            gaussian_blur: GaussianBlur {
                enabled: false,
                probability: 0.0,
                kernel_size: 3,
                sigma_range: (0.1, 2.0),
            },
            crop_scale_range: (1.0, 1.0),
        }
    }

    /// Random crop and horizontal flip.
    pub fn basic(output_size: (usize, usize)) -> Self {
        Self {
            flip_probability: 0.5,
            crop_scale_range: (0.6, 1.0),
            ..Self::identity(output_size)
        }
    }

    /// Basic stack plus color jitter, random grayscale and gaussian blur.
    pub fn pretraining(output_size: (usize, usize)) -> Self {
        let side = output_size.0.min(output_size.1);
        // roughly a tenth of the image, forced odd
        let kernel_size = ((side / 10) | 1).max(3);
        Self {
            color_jitter: ColorJitter {
                enabled: true,
                strength: 0.4,
                probability: 0.8,
            },
            grayscale_probability: 0.2,
            gaussian_blur: GaussianBlur {
                enabled: true,
                probability: 0.5,
                kernel_size,
                sigma_range: (0.1, 2.0),
            },
            ..Self::basic(output_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("flip_probability", self.flip_probability)?;
        prob("grayscale_probability", self.grayscale_probability)?;
        prob("color_jitter.probability", self.color_jitter.probability)?;
        prob("gaussian_blur.probability", self.gaussian_blur.probability)?;
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "crop_scale_range ({lo}, {hi}) must satisfy 0 < min <= max <= 1"
            )));
        }
        if self.output_size.0 < MIN_SIDE || self.output_size.1 < MIN_SIDE {
            return Err(Error::config(format!(
                "output_size {:?} below minimum side {MIN_SIDE}",
                self.output_size
            )));
        }
        if !(0.0..1.0).contains(&self.color_jitter.strength) {
            return Err(Error::config("color_jitter.strength must be in [0, 1)"));
        }
        let blur = &self.gaussian_blur;
        if blur.kernel_size % 2 == 0 {
            return Err(Error::config("gaussian_blur.kernel_size must be odd"));
        }
        let (s0, s1) = blur.sigma_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::config("gaussian_blur.sigma_range must be positive and ordered"));
        }
        Ok(())
    }
}

/// Applies `spec` to `image` with randomness drawn from `rng`.
pub fn augment<R: Rng + ?Sized>(
    image: &ImageTensor,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<ImageTensor> {
    spec.validate()?;
    let (_, h, w) = image.shape();
    let (lo, hi) = spec.crop_scale_range;
    let min_crop = |side: usize| (lo.sqrt() * side as f64).round() as usize;
    if min_crop(h) < MIN_CROP_SIDE || min_crop(w) < MIN_CROP_SIDE {
        return Err(Error::invalid(format!(
            "{h}x{w} image is smaller than the minimum crop at scale {lo}"
        )));
    }

    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let crop_h = ((scale.sqrt() * h as f64).round() as usize).clamp(MIN_CROP_SIDE, h);
    let crop_w = ((scale.sqrt() * w as f64).round() as usize).clamp(MIN_CROP_SIDE, w);
    let top = rng.random_range(0..=h - crop_h);
    let left = rng.random_range(0..=w - crop_w);
    let mut px = crop_resize(image.pixels(), top, left, crop_h, crop_w, spec.output_size);

    if spec.flip_probability > 0.0 && rng.random_bool(spec.flip_probability) {
        px.invert_axis(Axis(2));
        px = px.as_standard_layout().into_owned();
    }

    let jitter = &spec.color_jitter;
    if jitter.enabled && rng.random_bool(jitter.probability) {
        let s = jitter.strength;
        let mut factor = || if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
        let (b, c, sat) = (factor(), factor(), factor());
        color_jitter(&mut px, b, c, sat);
    }

    if spec.grayscale_probability > 0.0 && rng.random_bool(spec.grayscale_probability) {
        to_grayscale(&mut px);
    }

    let blur = &spec.gaussian_blur;
    if blur.enabled && rng.random_bool(blur.probability) {
        let (s0, s1) = blur.sigma_range;
        let sigma = if s1 > s0 { rng.random_range(s0..=s1) } else { s0 };
        px = gaussian_blur(&px, blur.kernel_size, sigma);
    }

    Ok(ImageTensor::from_clamped(px))
}

/// Bilinear resize of the crop window with half-pixel centers. A full-frame
/// crop at the original size is returned unchanged.
fn crop_resize(
    src: &Array3<f64>,
    top: usize,
    left: usize,
    crop_h: usize,
    crop_w: usize,
    (out_h, out_w): (usize, usize),
) -> Array3<f64> {
    let (c, h, w) = src.dim();
    if top == 0 && left == 0 && crop_h == h && crop_w == w && out_h == h && out_w == w {
        return src.to_owned();
    }
    let axis = |out: usize, crop: usize, offset: usize| -> Vec<(usize, usize, f64)> {
        let ratio = crop as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (crop - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(crop - 1);
                (offset + i0, offset + i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, crop_h, top);
    let xs = axis(out_w, crop_w, left);
    Array3::from_shape_fn((c, out_h, out_w), |(ch, y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top_row = src[[ch, y0, x0]] * (1.0 - fx) + src[[ch, y0, x1]] * fx;
        let bottom_row = src[[ch, y1, x0]] * (1.0 - fx) + src[[ch, y1, x1]] * fx;
        top_row * (1.0 - fy) + bottom_row * fy
    })
}

fn luma(px: &Array3<f64>) -> ndarray::Array2<f64> {
    if px.dim().0 >= 3 {
        &px.index_axis(Axis(0), 0) * 0.299
            + &px.index_axis(Axis(0), 1) * 0.587
            + &px.index_axis(Axis(0), 2) * 0.114
    } else {
        px.index_axis(Axis(0), 0).to_owned()
    }
}

fn color_jitter(px: &mut Array3<f64>, brightness: f64, contrast: f64, saturation: f64) {
    px.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));

    let mean = luma(px).mean().unwrap_or(0.0);
    px.mapv_inplace(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));

    if px.dim().0 >= 3 {
        let gray = luma(px);
        for mut channel in px.axis_iter_mut(Axis(0)) {
            ndarray::Zip::from(&mut channel)
                .and(&gray)
                .for_each(|v, &g| *v = ((*v - g) * saturation + g).clamp(0.0, 1.0));
        }
    }
}

fn to_grayscale(px: &mut Array3<f64>) {
    if px.dim().0 < 3 {
        return;
    }
    let gray = luma(px);
    for mut channel in px.axis_iter_mut(Axis(0)) {
        channel.assign(&gray);
    }
}

/// Separable gaussian blur with clamped borders.
fn gaussian_blur(px: &Array3<f64>, kernel_size: usize, sigma: f64) -> Array3<f64> {
    let radius = (kernel_size / 2) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (c, h, w) = px.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horizontal = Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        kernel
            .iter()
            .zip(-radius..=radius)
            .map(|(k, d)| k * px[[ch, y, clamp(x as isize + d, w)]])
            .sum::<f64>()
    });
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        kernel
            .iter()
            .zip(-radius..=radius)
            .map(|(k, d)| k * horizontal[[ch, clamp(y as isize + d, h), x]])
            .sum::<f64>()
    })
}
