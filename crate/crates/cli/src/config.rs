//! Run configuration: built-in reference defaults, a desk-scale preset, a TOML
//! file and command-line overrides, in increasing precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mixssl::data::{AugmentationSpec, LambdaMode, SyntheticSpec};
use mixssl::evaluation::TaskConfig;
use mixssl::model::{DecoderPreset, EncoderPreset, ModelConfig, RESNET50_STAGES, BOTTLENECK_EXPANSION};
use mixssl::objectives::{LossWeights, PretextSet, DEFAULT_TEMPERATURE};
use mixssl::training::{FinetuneConfig, FinetuneMode, OptimizerSpec, PretrainAugmentation, PretrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "MIXSSL_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// ResNet-50-style encoder on 224x224 images, batch 64.
    #[default]
    Reference,
    /// Small conv encoder on 32x32 images, batch 16.
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugPreset {
    Identity,
    /// Crop and flip.
    Basic,
    /// Crop, flip, color jitter, grayscale and blur.
    Pretraining,
}

impl AugPreset {
    pub fn spec(self, size: (usize, usize)) -> AugmentationSpec {
        match self {
            AugPreset::Identity => AugmentationSpec::identity(size),
            AugPreset::Basic => AugmentationSpec::basic(size),
            AugPreset::Pretraining => AugmentationSpec::pretraining(size),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory with `train/` and `val/` class folders.
    pub target_root: Option<PathBuf>,
    /// Directory with a `train/` split of auxiliary images.
    pub aux_root: Option<PathBuf>,
    /// Generator parameters, used when roots are absent and by `synth`.
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub selection: PretextSet,
    pub gamma: f64,
    pub lambda_alpha: f64,
    pub lambda_mode: LambdaMode,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSection {
    pub pretrain_target: AugPreset,
    /// Absent: same policy as the target.
    pub pretrain_auxiliary: Option<AugPreset>,
    pub contrastive_views: AugPreset,
    /// Absent: fine-tune on unmodified images.
    pub finetune: Option<AugPreset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub mode: FinetuneMode,
    /// Pretrained checkpoint; absent means a randomly initialized encoder.
    pub checkpoint: Option<PathBuf>,
    /// Unset fields fall back to the `[optimizer]` section.
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub standardize_features: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub selections: Vec<PretextSet>,
    /// Row the others are compared against; defaults to `R,T` when listed.
    pub baseline: Option<PretextSet>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            selections: ["T", "R", "R,T", "R,C", "R,A"]
                .iter()
                .map(|s| s.parse().expect("valid selection"))
                .collect(),
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelConfig,
    pub optimizer: OptimizerSpec,
    pub objective: ObjectiveSection,
    pub augmentation: AugmentationSection,
    pub finetune: FinetuneSection,
    pub eval: TaskConfig,
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let reference = Self::reference();
        match preset {
            Preset::Reference => reference,
            Preset::Toy => Self {
                preset,
                model: ModelConfig::default(),
                optimizer: OptimizerSpec::toy(),
                ..reference
            },
        }
    }

    /// Full-scale defaults: 50-layer residual encoder at 224x224, batch 64, 20 epochs.
    fn reference() -> Self {
        let mut model = ModelConfig::toy(RESNET50_STAGES[3].1 * BOTTLENECK_EXPANSION, (224, 224));
        model.encoder = EncoderPreset::Resnet50Like;
        model.decoder = DecoderPreset::ResnetGeneratorLike;
        Self {
            preset: Preset::Reference,
            seed: 0,
            output_dir: None,
            data: DataSection::default(),
            model,
            optimizer: OptimizerSpec::default(),
            objective: ObjectiveSection {
                selection: PretextSet::mixssl(),
                gamma: 1.0,
                lambda_alpha: 1.0,
                lambda_mode: LambdaMode::PerBatch,
                temperature: DEFAULT_TEMPERATURE,
            },
            augmentation: AugmentationSection {
                pretrain_target: AugPreset::Pretraining,
                pretrain_auxiliary: None,
                contrastive_views: AugPreset::Pretraining,
                finetune: None,
            },
            finetune: FinetuneSection {
                mode: FinetuneMode::Full,
                checkpoint: None,
                learning_rate: None,
                weight_decay: None,
                batch_size: None,
                epochs: None,
                standardize_features: true,
            },
            eval: TaskConfig::default(),
            ablation: AblationSection::default(),
        }
    }

    /// Parses TOML text over the defaults of the preset it names.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let file: toml::Table = text.parse().map_err(|e| CliError::Config(format!("config is not valid TOML: {e}")))?;
        let preset = match file.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| CliError::Config(format!("preset: {e}")))?,
            None => Preset::default(),
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).expect("defaults serialize");
        merge(&mut base, file);
        Self::deserialize(base).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> CliResult<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                let mut cfg = Self::from_toml(&text)?;
                if let Some(preset) = preset.filter(|&pr| pr != cfg.preset) {
                    let mut base = toml::Table::try_from(Self::preset(preset)).expect("defaults serialize");
                    let mut file: toml::Table = text.parse().expect("parsed above");
                    file.remove("preset");
                    merge(&mut base, file);
                    cfg = Self::deserialize(base).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
                }
                Ok(cfg)
            }
            None => Ok(Self::preset(preset.unwrap_or_default())),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        if i64::try_from(self.seed).is_err() {
            return Err(CliError::Config("seed must fit in a signed 64-bit integer".into()));
        }
        self.model.validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().optimizer.validate()?;
        LossWeights::new(self.objective.gamma)?;
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
            if s.size != self.model.image_size {
                return Err(CliError::Config(format!(
                    "synthetic image size {:?} differs from model input {:?}",
                    s.size, self.model.image_size
                )));
            }
        }
        if self.ablation.selections.is_empty() {
            return Err(CliError::Config("ablation.selections must not be empty".into()));
        }
        Ok(())
    }

    /// Validation for commands that read training data.
    pub fn validate_data_sources(&self) -> CliResult<()> {
        let generatable = self.data.synthetic.is_some();
        if !generatable && (self.data.target_root.is_none() || self.data.aux_root.is_none()) {
            return Err(CliError::Config(
                "data needs target_root and aux_root, or a [data.synthetic] section".into(),
            ));
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let size = self.model.image_size;
        PretrainConfig {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            weights: LossWeights { gamma: self.objective.gamma },
            selection: self.objective.selection.clone(),
            lambda_alpha: self.objective.lambda_alpha,
            lambda_mode: self.objective.lambda_mode,
            augmentation: PretrainAugmentation {
                target: self.augmentation.pretrain_target.spec(size),
                auxiliary: self.augmentation.pretrain_auxiliary.map(|a| a.spec(size)),
                views: self.augmentation.contrastive_views.spec(size),
            },
            temperature: self.objective.temperature,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        let o = &self.optimizer;
        FinetuneConfig {
            mode: f.mode,
            optimizer: OptimizerSpec {
                learning_rate: f.learning_rate.unwrap_or(o.learning_rate),
                weight_decay: f.weight_decay.unwrap_or(o.weight_decay),
                batch_size: f.batch_size.unwrap_or(o.batch_size),
                epochs: f.epochs.unwrap_or(o.epochs),
                ..o.clone()
            },
            augmentation: self.augmentation.finetune.map(|a| a.spec(self.model.image_size)),
            standardize_features: f.standardize_features,
            seed: self.seed,
        }
    }

    /// Explicit flag, then the config file, then `$MIXSSL_OUTPUT_ROOT/<command>`,
    /// then `runs/<command>`.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    }

    /// Every resolved setting that differs from the reference defaults, plus the
    /// deviations no setting can remove.
    pub fn deviations(&self) -> Vec<String> {
        let mut out = vec![
            "initialization: random (reference: ImageNet-pretrained weights)".to_string(),
            "arithmetic: 64-bit floating point throughout".to_string(),
        ];
        let reference = flatten(&serde_json::to_value(Self::reference()).expect("serializes"));
        let ours = flatten(&serde_json::to_value(self).expect("serializes"));
        let tracked = ["model.", "optimizer.", "objective.", "augmentation.", "finetune."];
        let skipped = ["objective.selection", "finetune.checkpoint"];
        let keys: std::collections::BTreeSet<&String> = reference.keys().chain(ours.keys()).collect();
        for key in keys {
            if !tracked.iter().any(|t| key.starts_with(t)) || skipped.contains(&key.as_str()) {
                continue;
            }
            let (a, b) = (reference.get(key), ours.get(key));
            if a != b {
                let show = |v: Option<&String>| v.cloned().unwrap_or_else(|| "unset".into());
                out.push(format!("{key}: {} (reference: {})", show(b), show(a)));
            }
        }
        out
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::reference()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn flatten(v: &serde_json::Value) -> BTreeMap<String, String> {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            serde_json::Value::Null => {}
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub pretext: Option<PretextSet>,
    pub gamma: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub mode: Option<FinetuneMode>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.pretext {
            cfg.objective.selection = p.clone();
        }
        if let Some(g) = self.gamma {
            cfg.objective.gamma = g;
        }
        if let Some(e) = self.epochs {
            cfg.optimizer.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.optimizer.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            cfg.optimizer.learning_rate = lr;
        }
        if let Some(m) = self.mode {
            cfg.finetune.mode = m;
        }
        if let Some(c) = &self.checkpoint {
            cfg.finetune.checkpoint = Some(c.clone());
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = Some(o.clone());
        }
    }
}
