use ndarray::{s, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted height or width.
pub const MIN_SIDE: usize = 8;

/// A `(channels, height, width)` raster with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c == 0 {
            return Err(Error::invalid("image has no channels"));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image is {h}x{w}, minimum side is {MIN_SIDE}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    /// Clamps into `[0, 1]` instead of rejecting. Shape must already be valid.
    pub(crate) fn from_clamped(mut pixels: Array3<f64>) -> Self {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        debug_assert!(pixels.dim().1 >= MIN_SIDE && pixels.dim().2 >= MIN_SIDE);
        Self { pixels }
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            pixels: self.pixels.slice(s![.., .., ..;-1]).to_owned(),
        }
    }
}

/// An image with an optional class index. Labels are never read during
/// pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: Option<usize>,
}

impl LabeledImage {
    pub fn new(image: ImageTensor, label: Option<usize>) -> Self {
        Self { image, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub(crate) fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

/// Stacks equally shaped images into an `(n, c, h, w)` batch.
pub fn stack_images<'a, I>(images: I) -> Result<Array4<f64>>
where
    I: IntoIterator<Item = &'a ImageTensor>,
{
    let views: Vec<_> = images.into_iter().map(|img| img.pixels.view()).collect();
    if views.is_empty() {
        return Err(Error::invalid("cannot stack an empty batch"));
    }
    ndarray::stack(Axis(0), &views)
        .map_err(|e| Error::invalid(format!("images in a batch differ in shape: {e}")))
}

/// Splits an `(n, c, h, w)` batch back into images.
pub fn unstack_images(batch: &Array4<f64>) -> Result<Vec<ImageTensor>> {
    batch
        .axis_iter(Axis(0))
        .map(|img| ImageTensor::new(img.to_owned()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_small_images() {
        assert!(ImageTensor::filled(3, 8, 8, 1.5).is_err());
        assert!(ImageTensor::filled(3, 7, 8, 0.5).is_err());
        assert!(ImageTensor::new(Array3::from_elem((3, 8, 8), f64::NAN)).is_err());
        assert!(ImageTensor::filled(3, 8, 8, 0.0).is_ok());
    }

    #[test]
    fn flip_mirrors_columns() {
        let px = Array3::from_shape_fn((1, 8, 8), |(_, _, x)| x as f64 / 10.0);
        let img = ImageTensor::new(px).unwrap();
        let flipped = img.flip_horizontal();
        assert_eq!(flipped.pixels()[[0, 3, 0]], 0.7);
        assert_eq!(flipped.flip_horizontal(), img);
    }

    #[test]
    fn stack_round_trips() {
        let a = ImageTensor::filled(3, 8, 8, 0.25).unwrap();
        let b = ImageTensor::filled(3, 8, 8, 0.75).unwrap();
        let batch = stack_images([&a, &b]).unwrap();
        assert_eq!(batch.dim(), (2, 3, 8, 8));
        assert_eq!(unstack_images(&batch).unwrap(), vec![a, b]);
    }
}
