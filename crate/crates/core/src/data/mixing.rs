//! Cross-domain mix-up and pretraining batch assembly.

use ndarray::{Array3, Array4, Zip};
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentationSpec};
use super::image::{stack_images, ImageTensor, LabeledImage};
use super::lambda::{uniform_index, LambdaSampler};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Stream tag for target augmentation, keyed by `[batch_index, sample]`.
pub const TARGET_STREAM: &str = "target-augment";
/// Stream tag for auxiliary choice then augmentation, keyed by
/// `[batch_index, sample]`. The first draw picks the auxiliary index.
pub const AUX_STREAM: &str = "auxiliary";
/// Stream tags for the two contrastive views of each mixed sample.
pub const VIEW_STREAMS: [&str; 2] = ["view-a", "view-b"];

/// `(1 - lambda) * target + lambda * aux`, pixelwise.
///
/// The result is clamped to the per-pixel interval spanned by the inputs so
/// that rounding never leaves the convex hull; `lambda = 0` and `lambda = 1`
/// return the inputs exactly.
pub fn mix(target: &ImageTensor, aux: &ImageTensor, lambda: f64) -> Result<ImageTensor> {
    if target.shape() != aux.shape() {
        return Err(Error::invalid(format!(
            "cannot mix images of shape {:?} and {:?}",
            target.shape(),
            aux.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(ImageTensor::from_clamped(mix_pixels(target.pixels(), aux.pixels(), lambda)))
}

fn mix_pixels(target: &Array3<f64>, aux: &Array3<f64>, lambda: f64) -> Array3<f64> {
    let mut out = Array3::zeros(target.dim());
    Zip::from(&mut out)
        .and(target)
        .and(aux)
        .for_each(|o, &t, &a| {
            let v = (1.0 - lambda) * t + lambda * a;
            *o = v.clamp(t.min(a), t.max(a));
        });
    out
}

/// A batch of mixed inputs together with the supervision for the pretext
/// tasks. Arrays are `(batch, channels, height, width)`.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub mixed: Array4<f64>,
    /// Augmented targets exactly as they entered the mix; the
    /// reconstruction ground truth.
    pub target: Array4<f64>,
    pub lambda: Vec<f64>,
    /// Index into the auxiliary pool for each sample.
    pub aux_index: Vec<usize>,
    /// Class of the mixed-in auxiliary image, when every chosen auxiliary
    /// image carries a label.
    pub aux_label: Option<Vec<usize>>,
    /// Two independently augmented views of each mixed sample.
    pub views: Option<(Array4<f64>, Array4<f64>)>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// Builds a batch directly from already prepared images.
    pub fn from_parts(
        targets: &[ImageTensor],
        auxiliaries: &[ImageTensor],
        lambda: &[f64],
    ) -> Result<Self> {
        if targets.len() != auxiliaries.len() || targets.len() != lambda.len() || targets.is_empty() {
            return Err(Error::invalid("targets, auxiliaries and lambda must have equal non-zero length"));
        }
        let mixed = targets
            .iter()
            .zip(auxiliaries)
            .zip(lambda)
            .map(|((t, a), &l)| mix(t, a, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mixed: stack_images(&mixed)?,
            target: stack_images(targets)?,
            lambda: lambda.to_vec(),
            aux_index: (0..targets.len()).collect(),
            aux_label: None,
            views: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub target_augment: AugmentationSpec,
    /// Auxiliary augmentation; `None` reuses `target_augment`.
    pub aux_augment: Option<AugmentationSpec>,
    /// When set, two views of every mixed sample are produced with this
    /// augmentation (contrastive objective).
    pub view_augment: Option<AugmentationSpec>,
    pub seed: u64,
}

impl BatchSpec {
    pub fn aux_spec(&self) -> &AugmentationSpec {
        self.aux_augment.as_ref().unwrap_or(&self.target_augment)
    }
}

/// Assembles the mixed batch for `targets`.
///
/// Every target is augmented once and paired with an auxiliary image chosen
/// uniformly at random (with replacement) and augmented independently. All
/// randomness comes from streams keyed by `(spec.seed, batch_index, sample)`
/// and the sampler's own `(seed, batch_index)` stream.
pub fn make_pretrain_batch(
    targets: &[&LabeledImage],
    auxiliaries: &[LabeledImage],
    spec: &BatchSpec,
    sampler: &LambdaSampler,
    batch_index: u64,
) -> Result<MixedBatch> {
    if targets.is_empty() {
        return Err(Error::config("pretraining batch has no target images"));
    }
    if auxiliaries.is_empty() {
        return Err(Error::config("auxiliary dataset is empty"));
    }
    let lambda = sampler.sample(targets.len(), batch_index)?;

    let mut target_imgs = Vec::with_capacity(targets.len());
    let mut mixed_imgs = Vec::with_capacity(targets.len());
    let mut aux_index = Vec::with_capacity(targets.len());
    let mut aux_labels = Vec::with_capacity(targets.len());
    for (i, (sample, &l)) in targets.iter().zip(&lambda).enumerate() {
        let key = [batch_index, i as u64];
        let target = augment(
            &sample.image,
            &spec.target_augment,
            &mut stream(spec.seed, TARGET_STREAM, &key),
        )?;
        let mut aux_rng = stream(spec.seed, AUX_STREAM, &key);
        let idx = uniform_index(&mut aux_rng, auxiliaries.len());
        let aux = augment(&auxiliaries[idx].image, spec.aux_spec(), &mut aux_rng)?;
        mixed_imgs.push(mix(&target, &aux, l)?);
        target_imgs.push(target);
        aux_index.push(idx);
        aux_labels.push(auxiliaries[idx].label);
    }

    let views = match &spec.view_augment {
        Some(view_spec) => {
            let view = |tag: &str| -> Result<Array4<f64>> {
                let imgs = mixed_imgs
                    .iter()
                    .enumerate()
                    .map(|(i, m)| augment(m, view_spec, &mut stream(spec.seed, tag, &[batch_index, i as u64])))
                    .collect::<Result<Vec<_>>>()?;
                stack_images(&imgs)
            };
            Some((view(VIEW_STREAMS[0])?, view(VIEW_STREAMS[1])?))
        }
        None => None,
    };

    Ok(MixedBatch {
        mixed: stack_images(&mixed_imgs)?,
        target: stack_images(&target_imgs)?,
        lambda,
        aux_index,
        aux_label: aux_labels.into_iter().collect(),
        views,
    })
}
