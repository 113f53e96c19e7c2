use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis, Ix1, Ix2};
use serde::{Deserialize, Serialize};

use super::{epoch_batches, final_dir, apply_step, OptimizerSpec, StepLogger, TrainState};
use crate::checkpoint::{epoch_dir, save_checkpoint};
use crate::data::{augment, stack_images, AugmentationSpec, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::{Layer, Linear};
use crate::objectives::{classification_loss_and_grads, probe_loss_and_grads, LossReport};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Frozen encoder, only the classifier head is trained.
    #[serde(alias = "probe")]
    LinearProbe,
    /// Encoder and classifier are trained together.
    #[default]
    Full,
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe" | "linear-probe" | "linear_probe" => Ok(FinetuneMode::LinearProbe),
            "full" => Ok(FinetuneMode::Full),
            other => Err(Error::config(format!("unknown fine-tune mode {other:?} (expected probe or full)"))),
        }
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneMode::LinearProbe => "linear-probe",
            FinetuneMode::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub optimizer: OptimizerSpec,
    /// `None` feeds images unchanged. A probe without augmentation encodes
    /// the data once and trains on cached features.
    pub augmentation: Option<AugmentationSpec>,
    /// Probe only: train on z-scored features, then fold the scaling into
    /// the classifier so it still consumes raw encoder output.
    #[serde(default = "yes")]
    pub standardize_features: bool,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl FinetuneConfig {
    pub fn new(mode: FinetuneMode, optimizer: OptimizerSpec, seed: u64) -> Self {
        Self { mode, optimizer, augmentation: None, standardize_features: true, seed }
    }
}

/// Encodes images in chunks to bound peak memory.
pub fn encode_batched(bundle: &ModelBundle, samples: &[LabeledImage], chunk: usize) -> Result<Array2<f64>> {
    let mut parts = Vec::new();
    for c in samples.chunks(chunk.max(1)) {
        parts.push(bundle.encode(&stack_images(c.iter().map(|s| &s.image))?)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))
}

/// Per-dimension mean and scale of training features. Constant dimensions
/// keep unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl FeatureStats {
    pub fn fit(features: &Array2<f64>) -> Self {
        let mean = features.mean_axis(Axis(0)).expect("non-empty features");
        let scale = features.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Self { mean, scale }
    }

    pub fn apply(&self, features: &Array2<f64>) -> Array2<f64> {
        (features - &self.mean) / &self.scale
    }

    /// Rewrites a linear layer trained on standardized inputs so that it
    /// gives the same logits on raw inputs.
    fn fold_into(&self, layer: &mut Linear) {
        let mut w = layer.weight.view_mut().into_dimensionality::<Ix2>().expect("2d weight");
        for mut row in w.rows_mut() {
            row /= &self.scale;
        }
        let shift = w.dot(&self.mean);
        let mut b = layer.bias.view_mut().into_dimensionality::<Ix1>().expect("1d bias");
        b -= &shift;
    }
}

fn ce_report(loss: f64) -> LossReport {
    LossReport {
        total: loss,
        extras: [("cross_entropy".to_string(), loss)].into_iter().collect(),
        ..LossReport::default()
    }
}

fn fold_classifier(mut bundle: ModelBundle, stats: &FeatureStats) -> ModelBundle {
    let head = bundle.classifier.as_mut().expect("classifier attached");
    match head.layers.as_mut_slice() {
        [Layer::Linear(linear)] => stats.fold_into(linear),
        _ => unreachable!("classifier head is a single linear layer"),
    }
    bundle
}

/// Supervised training of a classifier head, optionally with the encoder.
/// Pretext heads are dropped from the returned bundle.
pub fn finetune(
    mut bundle: ModelBundle,
    data: &Dataset,
    cfg: &FinetuneConfig,
    checkpoint_dir: Option<&Path>,
    log_path: Option<&Path>,
) -> Result<TrainState> {
    cfg.optimizer.validate()?;
    if data.is_empty() {
        return Err(Error::config("fine-tuning dataset is empty"));
    }
    let labels = data.labels()?;
    let classes = data.class_count();
    if let Some(k) = labels.iter().max().filter(|&&k| k >= classes) {
        return Err(Error::config(format!("label {k} exceeds the {classes} declared classes")));
    }
    match bundle.config.class_count.filter(|_| bundle.classifier.is_some()) {
        Some(k) if k != classes => {
            return Err(Error::config(format!("checkpoint classifier has {k} classes, data has {classes}")));
        }
        Some(_) => {}
        None => bundle.attach_classifier(classes, cfg.seed)?,
    }
    if let Some(aug) = &cfg.augmentation {
        aug.validate()?;
    }
    bundle.decoder = None;
    bundle.transparency = None;
    bundle.projection = None;
    bundle.aux_label = None;
    let heads = &mut bundle.config.heads;
    heads.decoder = false;
    heads.transparency = false;
    heads.projection = false;
    heads.aux_label = false;

    let mut state = TrainState::new(bundle, cfg.seed);
    let mut logger = log_path.map(|p| StepLogger::create(p, false)).transpose()?;
    let probe = cfg.mode == FinetuneMode::LinearProbe;
    let raw = if probe && (cfg.standardize_features || cfg.augmentation.is_none()) {
        Some(encode_batched(&state.bundle, &data.samples, 64)?)
    } else {
        None
    };
    let stats = raw.as_ref().filter(|_| cfg.standardize_features).map(FeatureStats::fit);
    let standardize = |f: Array2<f64>| match &stats {
        Some(s) => s.apply(&f),
        None => f,
    };
    let cached = raw.filter(|_| cfg.augmentation.is_none()).map(standardize);
    let meta = serde_json::json!({ "stage": "finetune", "config": cfg });
    for epoch in 1..=cfg.optimizer.epochs {
        for idx in epoch_batches(data.len(), cfg.optimizer.batch_size, cfg.seed, "finetune-shuffle", epoch, 1) {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = match &cached {
                Some(features) => probe_loss_and_grads(&state.bundle, &features.select(Axis(0), &idx), &y)?,
                None => {
                    let images: Vec<_> = idx
                        .iter()
                        .enumerate()
                        .map(|(slot, &i)| match &cfg.augmentation {
                            Some(aug) => augment(
                                &data.samples[i].image,
                                aug,
                                &mut stream(cfg.seed, "finetune-augment", &[state.global_step, slot as u64]),
                            ),
                            None => Ok(data.samples[i].image.clone()),
                        })
                        .collect::<Result<_>>()?;
                    let x = stack_images(&images)?;
                    if probe {
                        let features = standardize(state.bundle.encode(&x)?);
                        probe_loss_and_grads(&state.bundle, &features, &y)?
                    } else {
                        classification_loss_and_grads(&state.bundle, &x, &y, true)?
                    }
                }
            };
            let report = apply_step(&mut state, ce_report(loss), &grads, &cfg.optimizer, &[])?;
            if let Some(l) = logger.as_mut() {
                l.log(state.global_step, &report)?;
            }
        }
        state.epoch = epoch;
        if let Some(l) = logger.as_mut() {
            l.flush()?;
        }
        if let Some(root) = checkpoint_dir {
            let snapshot = match &stats {
                Some(s) => &fold_classifier(state.bundle.clone(), s),
                None => &state.bundle,
            };
            save_checkpoint(&epoch_dir(root, epoch), snapshot, &state.meta(meta.clone()), None)?;
        }
    }
    if let Some(s) = &stats {
        state.bundle = fold_classifier(state.bundle, s);
    }
    if let Some(root) = checkpoint_dir {
        save_checkpoint(&final_dir(root), &state.bundle, &state.meta(meta), None)?;
    }
    Ok(state)
}
