//! Desk-scale stand-ins for a low-variance target corpus and a diverse
//! auxiliary corpus.
//!
//! Target images share one fixed template (a stained cell on a tinted
//! background); classes differ only in a faint nucleus whose lobe count is
//! `class + 1`, with total nucleus area held constant across classes. The
//! nucleus amplitude scales with `contrast_level`, so at zero every image is
//! the template plus sensor noise. Auxiliary images are random colored
//! gratings and blobs whose orientation, frequency and palette depend on the
//! class.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::image::{ImageTensor, LabeledImage, Split, MIN_SIDE};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub size: (usize, usize),
    pub contrast_level: f64,
    pub seed: u64,
    pub aux_class_count: usize,
    /// Unset: same as `per_class`.
    pub aux_per_class: Option<usize>,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    /// Four classes of 200 low-contrast 32x32 images.
    fn default() -> Self {
        Self::new(4, 200, (32, 32), 0.2, 0)
    }
}

impl SyntheticSpec {
    pub fn new(class_count: usize, per_class: usize, size: (usize, usize), contrast_level: f64, seed: u64) -> Self {
        Self {
            class_count,
            per_class,
            size,
            contrast_level,
            seed,
            aux_class_count: 10,
            aux_per_class: None,
            noise_std: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config(format!(
                "class_count must be at least 2, got {}",
                self.class_count
            )));
        }
        if self.aux_class_count < 1 || self.per_class < 1 || self.aux_per_class() < 1 {
            return Err(Error::config("synthetic corpora need at least one image per class"));
        }
        if !(0.0..=1.0).contains(&self.contrast_level) {
            return Err(Error::config("contrast_level must be in [0, 1]"));
        }
        if self.size.0 < MIN_SIDE || self.size.1 < MIN_SIDE {
            return Err(Error::config(format!("synthetic size {:?} below {MIN_SIDE}", self.size)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        Ok(())
    }

    pub fn aux_per_class(&self) -> usize {
        self.aux_per_class.unwrap_or(self.per_class)
    }

    pub fn target_class_names(&self) -> Vec<String> {
        (0..self.class_count).map(|c| format!("cell_{c}")).collect()
    }

    pub fn aux_class_names(&self) -> Vec<String> {
        (0..self.aux_class_count).map(|c| format!("texture_{c}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpora {
    pub target: Dataset,
    pub auxiliary: Dataset,
}

pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<SyntheticCorpora> {
    spec.validate()?;
    let mut target = Vec::with_capacity(spec.class_count * spec.per_class);
    for class in 0..spec.class_count {
        for i in 0..spec.per_class {
            let mut rng = stream(spec.seed, "synthetic-target", &[split.index(), class as u64, i as u64]);
            let img = target_image(spec, class, &mut rng)?;
            target.push(LabeledImage::new(img, Some(class)));
        }
    }
    let mut auxiliary = Vec::with_capacity(spec.aux_class_count * spec.aux_per_class());
    for class in 0..spec.aux_class_count {
        for i in 0..spec.aux_per_class() {
            let mut rng = stream(spec.seed, "synthetic-aux", &[split.index(), class as u64, i as u64]);
            let img = aux_image(spec, class, &mut rng)?;
            auxiliary.push(LabeledImage::new(img, Some(class)));
        }
    }
    Ok(SyntheticCorpora {
        target: Dataset::in_memory(spec.target_class_names(), target),
        auxiliary: Dataset::in_memory(spec.aux_class_names(), auxiliary),
    })
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft disk mask: 1 inside `radius`, falling to 0 over `soft`.
fn disk(u: f64, v: f64, cu: f64, cv: f64, radius: f64, soft: f64) -> f64 {
    let d = ((u - cu).powi(2) + (v - cv).powi(2)).sqrt();
    1.0 - smoothstep(radius - soft, radius + soft, d)
}

const BACKGROUND: [f64; 3] = [0.86, 0.72, 0.78];
const CYTOPLASM: [f64; 3] = [0.74, 0.60, 0.80];
const NUCLEUS_DARKENING: [f64; 3] = [0.45, 0.55, 0.20];

fn target_image(spec: &SyntheticSpec, class: usize, rng: &mut StreamRng) -> Result<ImageTensor> {
    let (h, w) = spec.size;
    let lobes = class + 1;
    let ring = if lobes == 1 { 0.0 } else { 0.13 };
    let rotation = rng.random_range(0.0..2.0 * PI);
    let (jitter_u, jitter_v) = (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
    let centers: Vec<(f64, f64, f64)> = (0..lobes)
        .map(|k| {
            let angle = rotation + 2.0 * PI * k as f64 / lobes as f64;
            let radius = 0.15 / (lobes as f64).sqrt() * rng.random_range(0.9..1.1);
            (0.5 + jitter_u + ring * angle.cos(), 0.5 + jitter_v + ring * angle.sin(), radius)
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(format!("noise distribution: {e}")))?;

    let soft = 1.0 / h.min(w) as f64;
    let mut px = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let shading = 0.04 * (2.0 * PI * (u + v)).sin();
            let cell = disk(u, v, 0.5, 0.5, 0.36, 2.0 * soft);
            let nucleus = centers
                .iter()
                .map(|&(cu, cv, r)| disk(u, v, cu, cv, r, soft))
                .fold(0.0, f64::max);
            for c in 0..3 {
                let base = BACKGROUND[c] + shading;
                let value = base + cell * (CYTOPLASM[c] - base)
                    - spec.contrast_level * nucleus * NUCLEUS_DARKENING[c];
                px[[c, y, x]] = value;
            }
        }
    }
    if spec.noise_std > 0.0 {
        px.mapv_inplace(|v: f64| v + noise.sample(rng));
    }
    Ok(ImageTensor::from_clamped(px))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn aux_image(spec: &SyntheticSpec, class: usize, rng: &mut StreamRng) -> Result<ImageTensor> {
    let (h, w) = spec.size;
    let k = spec.aux_class_count as f64;
    let hue = class as f64 / k + rng.random_range(-0.05..0.05);
    let orientation = PI * class as f64 / k + rng.random_range(-0.2..0.2);
    let frequency = (2.0 + (class % 4) as f64 * 1.5) * rng.random_range(0.8..1.25);
    let phase = rng.random_range(0.0..2.0 * PI);
    let light = hsv_to_rgb(hue, rng.random_range(0.4..0.9), rng.random_range(0.7..1.0));
    let dark = hsv_to_rgb(hue + 0.5, rng.random_range(0.3..0.9), rng.random_range(0.05..0.4));
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(3..=6))
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.25),
                hsv_to_rgb(rng.random_range(0.0..1.0), rng.random_range(0.2..1.0), rng.random_range(0.1..1.0)),
            )
        })
        .collect();

    let mut px = Array3::zeros((3, h, w));
    let (dir_u, dir_v) = (orientation.cos(), orientation.sin());
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let t = 0.5 + 0.5 * (2.0 * PI * frequency * (u * dir_u + v * dir_v) + phase).sin();
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = dark[c] + t * (light[c] - dark[c]);
            }
            for &(bu, bv, r, color) in &blobs {
                let m = 0.8 * disk(u, v, bu, bv, r, 0.03);
                for c in 0..3 {
                    rgb[c] += m * (color[c] - rgb[c]);
                }
            }
            for c in 0..3 {
                px[[c, y, x]] = rgb[c];
            }
        }
    }
    Ok(ImageTensor::from_clamped(px))
}

/// Mean pairwise Euclidean distance between images, in pixel space.
pub fn mean_pairwise_distance(samples: &[LabeledImage]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let a = samples[i].image.pixels();
            let b = samples[j].image.pixels();
            total += a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_contrast_collapses_to_template() {
        let mut spec = SyntheticSpec::new(4, 3, (16, 16), 0.0, 1);
        spec.aux_per_class = Some(1);
        let corpora = generate_synthetic(&spec, Split::Train).unwrap();
        let first = corpora.target.samples[0].image.pixels();
        for s in &corpora.target.samples {
            let max_diff = s
                .image
                .pixels()
                .iter()
                .zip(first.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            // noise std is 0.01; two independent draws stay well inside 10 sigma
            assert!(max_diff < 0.1, "{max_diff}");
        }
    }

    #[test]
    fn target_is_less_diverse_than_auxiliary() {
        let mut spec = SyntheticSpec::new(4, 5, (16, 16), 0.2, 2);
        spec.aux_per_class = Some(2);
        let corpora = generate_synthetic(&spec, Split::Train).unwrap();
        let t = mean_pairwise_distance(&corpora.target.samples);
        let a = mean_pairwise_distance(&corpora.auxiliary.samples);
        assert!(t < a, "target {t} vs auxiliary {a}");
    }

    #[test]
    fn deterministic_and_split_dependent() {
        let spec = SyntheticSpec::new(2, 2, (8, 8), 0.5, 3);
        let a = generate_synthetic(&spec, Split::Train).unwrap();
        let b = generate_synthetic(&spec, Split::Train).unwrap();
        let v = generate_synthetic(&spec, Split::Val).unwrap();
        assert_eq!(a.target.samples, b.target.samples);
        assert_eq!(a.auxiliary.samples, b.auxiliary.samples);
        assert_ne!(a.target.samples, v.target.samples);
    }

    #[test]
    fn single_class_is_rejected() {
        let spec = SyntheticSpec::new(1, 2, (8, 8), 0.5, 3);
        assert!(matches!(generate_synthetic(&spec, Split::Train), Err(Error::Config(_))));
    }
}
