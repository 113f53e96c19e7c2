//! Two-stage protocol: self-supervised pretraining on mixed batches, then
//! supervised fine-tuning or linear probing.

mod finetune;
mod optimizer;

pub use finetune::{encode_batched, finetune, FeatureStats, FinetuneConfig, FinetuneMode};
pub use optimizer::{AdamW, OptimizerSpec};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{epoch_dir, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::data::{make_pretrain_batch, AugmentationSpec, BatchSpec, Dataset, LabeledImage, LambdaMode, LambdaSampler, MixedBatch};
use crate::error::{Error, Result};
use crate::model::{build_models, Gradients, ModelBundle, ModelConfig};
use crate::objectives::{pretext_loss, LossReport, LossWeights, Pretext, PretextSet, StepLog, DEFAULT_TEMPERATURE};
use crate::rng::stream;

#[derive(Debug, Clone)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub rng_seed: u64,
    /// Reports of the steps run by this process, in order.
    pub loss_history: Vec<LossReport>,
}

impl TrainState {
    pub fn new(bundle: ModelBundle, seed: u64) -> Self {
        Self {
            bundle,
            optimizer: AdamW::new(),
            epoch: 0,
            global_step: 0,
            rng_seed: seed,
            loss_history: Vec::new(),
        }
    }

    fn meta(&self, training: serde_json::Value) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.epoch,
            global_step: self.global_step,
            seed: self.rng_seed,
            training,
        }
    }
}

/// Augmentation applied per pretraining stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainAugmentation {
    pub target: AugmentationSpec,
    /// `None` reuses the target policy.
    pub auxiliary: Option<AugmentationSpec>,
    /// Used to draw the two views of the contrastive objective.
    pub views: AugmentationSpec,
}

impl PretrainAugmentation {
    pub fn pretraining(size: (usize, usize)) -> Self {
        Self {
            target: AugmentationSpec::pretraining(size),
            auxiliary: None,
            views: AugmentationSpec::pretraining(size),
        }
    }

    pub fn identity(size: (usize, usize)) -> Self {
        Self {
            target: AugmentationSpec::identity(size),
            auxiliary: None,
            views: AugmentationSpec::basic(size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerSpec,
    pub weights: LossWeights,
    pub selection: PretextSet,
    pub lambda_alpha: f64,
    pub lambda_mode: LambdaMode,
    pub augmentation: PretrainAugmentation,
    pub temperature: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn toy(model: ModelConfig, seed: u64) -> Self {
        let size = model.image_size;
        Self {
            model,
            optimizer: OptimizerSpec::toy(),
            weights: LossWeights::default(),
            selection: PretextSet::mixssl(),
            lambda_alpha: 1.0,
            lambda_mode: LambdaMode::PerBatch,
            augmentation: PretrainAugmentation::pretraining(size),
            temperature: DEFAULT_TEMPERATURE,
            seed,
        }
    }

    /// Model configuration with exactly the heads the selection needs.
    pub fn resolved_model(&self, aux_class_count: Option<usize>) -> ModelConfig {
        let mut m = self.model.clone();
        m.heads.decoder = self.selection.contains(Pretext::Reconstruction);
        m.heads.transparency = self.selection.contains(Pretext::Transparency);
        m.heads.projection = self.selection.contains(Pretext::Contrastive);
        m.heads.aux_label = self.selection.contains(Pretext::AuxLabel);
        m.heads.classifier = false;
        m.class_count = None;
        if m.heads.aux_label {
            m.aux_class_count = aux_class_count.or(m.aux_class_count);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        LossWeights::new(self.weights.gamma)?;
        LambdaSampler::new(self.lambda_alpha, self.lambda_mode, self.seed)?;
        if self.selection.contains(Pretext::Contrastive) {
            if self.optimizer.batch_size < 2 {
                return Err(Error::config("the contrastive objective needs batch_size >= 2"));
            }
            if !(self.temperature > 0.0) {
                return Err(Error::config("contrastive temperature must be positive"));
            }
        }
        for spec in [Some(&self.augmentation.target), self.augmentation.auxiliary.as_ref(), Some(&self.augmentation.views)]
            .into_iter()
            .flatten()
        {
            spec.validate()?;
            if spec.output_size != self.model.image_size {
                return Err(Error::config(format!(
                    "augmentation output size {:?} differs from model input {:?}",
                    spec.output_size, self.model.image_size
                )));
            }
        }
        Ok(())
    }

    fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            target_augment: self.augmentation.target.clone(),
            aux_augment: self.augmentation.auxiliary.clone(),
            view_augment: self.selection.contains(Pretext::Contrastive).then(|| self.augmentation.views.clone()),
            seed: self.seed,
        }
    }
}

/// Appends one JSON line per step.
pub struct StepLogger {
    out: BufWriter<File>,
}

impl StepLogger {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn log(&mut self, step: u64, report: &LossReport) -> Result<()> {
        let line = serde_json::to_string(&StepLog { step, report: report.clone() })?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a JSON-lines training log.
pub fn read_step_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Applies one optimizer update from precomputed gradients and records the
/// report. Non-finite losses or gradients abort before any parameter moves.
pub fn apply_step(
    state: &mut TrainState,
    report: LossReport,
    grads: &Gradients,
    spec: &OptimizerSpec,
    lambdas: &[f64],
) -> Result<LossReport> {
    if !report.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.global_step + 1,
            components: report.describe(),
            lambdas: lambdas.to_vec(),
        });
    }
    state.optimizer.update(&mut state.bundle, grads, spec)?;
    state.global_step += 1;
    state.loss_history.push(report.clone());
    Ok(report)
}

/// One pretraining update on a mixed batch.
pub fn training_step(
    state: &mut TrainState,
    batch: &MixedBatch,
    weights: &LossWeights,
    selection: &PretextSet,
    spec: &OptimizerSpec,
) -> Result<LossReport> {
    training_step_with(state, batch, weights, selection, spec, DEFAULT_TEMPERATURE)
}

fn training_step_with(
    state: &mut TrainState,
    batch: &MixedBatch,
    weights: &LossWeights,
    selection: &PretextSet,
    spec: &OptimizerSpec,
    temperature: f64,
) -> Result<LossReport> {
    let (report, grads) = pretext_loss(&state.bundle, batch, weights, selection, temperature, true)?;
    apply_step(state, report, &grads.expect("gradients requested"), spec, &batch.lambda)
}

/// Splits a shuffled epoch into batches. Partial final batches are kept,
/// except that a lone trailing sample joins the previous batch when
/// `min_batch` is 2.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64, tag: &str, epoch: usize, min_batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, tag, &[epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < min_batch) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

pub struct PretrainOutputs<'a> {
    /// Root for `epoch_NNN/` and `final/` checkpoints.
    pub checkpoint_dir: Option<&'a Path>,
    pub log_path: Option<&'a Path>,
}

impl PretrainOutputs<'_> {
    pub const NONE: PretrainOutputs<'static> = PretrainOutputs { checkpoint_dir: None, log_path: None };
}

fn check_corpora(target: &Dataset, aux: &Dataset) -> Result<()> {
    if target.is_empty() {
        return Err(Error::config("target dataset is empty"));
    }
    if aux.is_empty() {
        return Err(Error::config("auxiliary dataset is empty"));
    }
    Ok(())
}

fn training_meta(cfg: &PretrainConfig) -> serde_json::Value {
    serde_json::json!({ "stage": "pretrain", "config": cfg })
}

/// Self-supervised pretraining of the selected objectives.
pub fn pretrain(target: &Dataset, aux: &Dataset, cfg: &PretrainConfig, out: &PretrainOutputs) -> Result<TrainState> {
    cfg.validate()?;
    check_corpora(target, aux)?;
    let aux_classes = (!aux.class_names.is_empty()).then(|| aux.class_count());
    let model = cfg.resolved_model(aux_classes);
    let state = TrainState::new(build_models(&model, cfg.seed)?, cfg.seed);
    let logger = out.log_path.map(|p| StepLogger::create(p, false)).transpose()?;
    run_pretrain(state, target, aux, cfg, out.checkpoint_dir, logger)
}

/// Continues pretraining from an epoch checkpoint up to `cfg.optimizer.epochs`.
/// The configuration stored in the checkpoint is used unless `epochs`
/// overrides the total.
pub fn resume(checkpoint: &Path, target: &Dataset, aux: &Dataset, epochs: Option<usize>, out: &PretrainOutputs) -> Result<TrainState> {
    let ck = load_checkpoint(checkpoint, None)?;
    let stored = ck
        .manifest
        .training
        .get("config")
        .cloned()
        .ok_or_else(|| Error::config("checkpoint was not written by pretraining"))?;
    let mut cfg: PretrainConfig = serde_json::from_value(stored)?;
    if let Some(e) = epochs {
        cfg.optimizer.epochs = e;
    }
    cfg.validate()?;
    check_corpora(target, aux)?;
    let optimizer = ck
        .optimizer
        .map(AdamW::from_groups)
        .transpose()?
        .ok_or_else(|| Error::config("checkpoint carries no optimizer state to resume from"))?;
    let state = TrainState {
        bundle: ck.bundle,
        optimizer,
        epoch: ck.manifest.epoch,
        global_step: ck.manifest.global_step,
        rng_seed: ck.manifest.seed,
        loss_history: Vec::new(),
    };
    let logger = out.log_path.map(|p| StepLogger::create(p, true)).transpose()?;
    run_pretrain(state, target, aux, &cfg, out.checkpoint_dir, logger)
}

fn run_pretrain(
    mut state: TrainState,
    target: &Dataset,
    aux: &Dataset,
    cfg: &PretrainConfig,
    checkpoint_dir: Option<&Path>,
    mut logger: Option<StepLogger>,
) -> Result<TrainState> {
    let sampler = LambdaSampler::new(cfg.lambda_alpha, cfg.lambda_mode, cfg.seed)?;
    let spec = cfg.batch_spec();
    let min_batch = if cfg.selection.contains(Pretext::Contrastive) { 2 } else { 1 };
    let meta = training_meta(cfg);
    while state.epoch < cfg.optimizer.epochs {
        let epoch = state.epoch + 1;
        for idx in epoch_batches(target.len(), cfg.optimizer.batch_size, cfg.seed, "pretrain-shuffle", epoch, min_batch) {
            let members: Vec<&LabeledImage> = idx.iter().map(|&i| &target.samples[i]).collect();
            let batch = make_pretrain_batch(&members, &aux.samples, &spec, &sampler, state.global_step)?;
            let report = training_step_with(&mut state, &batch, &cfg.weights, &cfg.selection, &cfg.optimizer, cfg.temperature)?;
            if let Some(l) = logger.as_mut() {
                l.log(state.global_step, &report)?;
            }
        }
        state.epoch = epoch;
        if let Some(l) = logger.as_mut() {
            l.flush()?;
        }
        log::info!(
            "pretrain epoch {epoch}/{} step {} loss {:.5}",
            cfg.optimizer.epochs,
            state.global_step,
            state.loss_history.last().map_or(f64::NAN, |r| r.total)
        );
        if let Some(root) = checkpoint_dir {
            let groups = state.optimizer.to_groups();
            save_checkpoint(&epoch_dir(root, epoch), &state.bundle, &state.meta(meta.clone()), Some(&groups))?;
        }
    }
    if let Some(root) = checkpoint_dir {
        let groups = state.optimizer.to_groups();
        save_checkpoint(&final_dir(root), &state.bundle, &state.meta(meta), Some(&groups))?;
    }
    Ok(state)
}

/// `<root>/final`
pub fn final_dir(root: &Path) -> PathBuf {
    root.join("final")
}
