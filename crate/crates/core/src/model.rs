//! Encoder, decoder and pretext/downstream heads with their shape contracts.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, Array4, Ix2, Ix4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{column, Conv2d, Init, Layer, Linear, Residual, Sequential, Tensor};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderPreset {
    /// Four plain conv blocks and global average pooling.
    Toy,
    /// Stem plus three residual stages.
    Small,
    /// Bottleneck residual network with the 50-layer stage layout.
    #[serde(rename = "resnet50-like")]
    Resnet50Like,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderPreset {
    /// Linear-to-spatial reshape then three upsampling conv blocks.
    Toy,
    /// Residual blocks at 1/32 resolution followed by five upsampling stages.
    ResnetGeneratorLike,
}

/// `(blocks, bottleneck width)` per stage of the 50-layer layout.
pub const RESNET50_STAGES: [(usize, usize); 4] = [(3, 64), (4, 128), (6, 256), (3, 512)];
pub const BOTTLENECK_EXPANSION: usize = 4;

impl EncoderPreset {
    /// Feature width this preset produces, if fixed by the architecture.
    pub fn fixed_feature_dim(self) -> Option<usize> {
        match self {
            EncoderPreset::Resnet50Like => Some(RESNET50_STAGES[3].1 * BOTTLENECK_EXPANSION),
            _ => None,
        }
    }
}

impl DecoderPreset {
    /// Input height and width must be multiples of this.
    pub fn spatial_divisor(self) -> usize {
        match self {
            DecoderPreset::Toy => 8,
            DecoderPreset::ResnetGeneratorLike => 32,
        }
    }
}

/// Which optional components a bundle carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSet {
    pub decoder: bool,
    pub transparency: bool,
    pub projection: bool,
    pub aux_label: bool,
    pub classifier: bool,
}

impl Default for HeadSet {
    fn default() -> Self {
        Self {
            decoder: true,
            transparency: true,
            projection: false,
            aux_label: false,
            classifier: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderPreset,
    pub feature_dim: usize,
    pub image_size: (usize, usize),
    pub channels: usize,
    pub decoder: DecoderPreset,
    pub transparency_hidden: usize,
    pub projection_dim: usize,
    pub class_count: Option<usize>,
    pub aux_class_count: Option<usize>,
    pub heads: HeadSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(TOY_FEATURE_DIM, (32, 32))
    }
}

/// Feature width of the desk-scale preset.
pub const TOY_FEATURE_DIM: usize = 128;

impl ModelConfig {
    pub fn toy(feature_dim: usize, image_size: (usize, usize)) -> Self {
        Self {
            encoder: EncoderPreset::Toy,
            feature_dim,
            image_size,
            channels: 3,
            decoder: DecoderPreset::Toy,
            transparency_hidden: 128,
            projection_dim: 32,
            class_count: None,
            aux_class_count: None,
            heads: HeadSet::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.transparency_hidden == 0 || self.projection_dim == 0 {
            return Err(Error::config("feature_dim, transparency_hidden and projection_dim must be >= 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be >= 1"));
        }
        if let Some(fixed) = self.encoder.fixed_feature_dim() {
            if fixed != self.feature_dim {
                return Err(Error::config(format!(
                    "{:?} encoder produces {fixed} features, config asks for {}",
                    self.encoder, self.feature_dim
                )));
            }
        }
        let (h, w) = self.image_size;
        if h < crate::data::image::MIN_SIDE || w < crate::data::image::MIN_SIDE {
            return Err(Error::config(format!("image_size {:?} is too small", self.image_size)));
        }
        if self.heads.decoder {
            let d = self.decoder.spatial_divisor();
            if h % d != 0 || w % d != 0 {
                return Err(Error::config(format!(
                    "{:?} decoder needs image sides divisible by {d}, got {h}x{w}",
                    self.decoder
                )));
            }
        }
        if self.heads.classifier && !matches!(self.class_count, Some(c) if c >= 1) {
            return Err(Error::config("classifier head requested without class_count"));
        }
        if self.heads.aux_label && !matches!(self.aux_class_count, Some(c) if c >= 1) {
            return Err(Error::config("auxiliary-label head requested without aux_class_count"));
        }
        Ok(())
    }

    /// Whether a checkpoint built for `other` can serve this configuration:
    /// the encoder and input contract must agree.
    pub fn backbone_matches(&self, other: &ModelConfig) -> bool {
        self.encoder == other.encoder
            && self.feature_dim == other.feature_dim
            && self.image_size == other.image_size
            && self.channels == other.channels
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Decoder,
    Transparency,
    Projection,
    AuxLabel,
    Classifier,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Encoder,
        Component::Decoder,
        Component::Transparency,
        Component::Projection,
        Component::AuxLabel,
        Component::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::Transparency => "transparency",
            Component::Projection => "projection",
            Component::AuxLabel => "aux_label",
            Component::Classifier => "classifier",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    fn init_index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-component parameter gradients, ordered like `Sequential::params`.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    groups: BTreeMap<Component, Vec<Tensor>>,
}

impl Gradients {
    pub fn zeros(bundle: &ModelBundle, components: &[Component]) -> Self {
        let groups = components
            .iter()
            .filter_map(|&c| bundle.component(c).map(|net| (c, net.zero_grads())))
            .collect();
        Self { groups }
    }

    pub fn get(&self, c: Component) -> Option<&[Tensor]> {
        self.groups.get(&c).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, c: Component) -> Option<&mut [Tensor]> {
        self.groups.get_mut(&c).map(Vec::as_mut_slice)
    }

    pub fn components(&self) -> impl Iterator<Item = Component> + '_ {
        self.groups.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Component, &[Tensor])> {
        self.groups.iter().map(|(c, g)| (*c, g.as_slice()))
    }

    pub fn is_finite(&self) -> bool {
        self.groups.values().flatten().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub encoder: Sequential,
    pub decoder: Option<Sequential>,
    pub transparency: Option<Sequential>,
    pub projection: Option<Sequential>,
    pub aux_label: Option<Sequential>,
    pub classifier: Option<Sequential>,
}

fn conv(rng: &mut crate::rng::StreamRng, i: usize, o: usize, k: usize, s: usize, init: Init) -> Layer {
    Layer::Conv2d(Conv2d::new(rng, i, o, k, s, k / 2, init))
}

fn build_encoder(config: &ModelConfig, seed: u64) -> Sequential {
    let mut rng = stream(seed, "init", &[Component::Encoder.init_index()]);
    let c = config.channels;
    let fd = config.feature_dim;
    let mut seq = Sequential::default();
    match config.encoder {
        EncoderPreset::Toy => {
            for (i, o, s) in [(c, 8, 1), (8, 16, 2), (16, 32, 2), (32, fd, 2)] {
                seq.push(conv(&mut rng, i, o, 3, s, Init::He)).push(Layer::Relu);
            }
        }
        EncoderPreset::Small => {
            seq.push(conv(&mut rng, c, 16, 3, 1, Init::He)).push(Layer::Relu);
            for (i, o) in [(16, 32), (32, 64), (64, fd)] {
                let branch = Sequential::new(vec![
                    conv(&mut rng, i, o, 3, 2, Init::He),
                    Layer::Relu,
                    conv(&mut rng, o, o, 3, 1, Init::Scaled(0.5)),
                ]);
                let shortcut = Sequential::new(vec![conv(&mut rng, i, o, 1, 2, Init::LeCun)]);
                seq.push(Layer::Residual(Box::new(Residual {
                    branch,
                    shortcut: Some(shortcut),
                })))
                .push(Layer::Relu);
            }
        }
        EncoderPreset::Resnet50Like => {
            seq.push(conv(&mut rng, c, 64, 7, 2, Init::He))
                .push(Layer::Relu)
                .push(Layer::MaxPool2d {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                });
            let mut in_ch = 64;
            for (stage, &(blocks, width)) in RESNET50_STAGES.iter().enumerate() {
                let out_ch = width * BOTTLENECK_EXPANSION;
                for block in 0..blocks {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    let branch = Sequential::new(vec![
                        conv(&mut rng, in_ch, width, 1, 1, Init::He),
                        Layer::Relu,
                        conv(&mut rng, width, width, 3, stride, Init::He),
                        Layer::Relu,
                        conv(&mut rng, width, out_ch, 1, 1, Init::Scaled(0.2)),
                    ]);
                    let shortcut = (in_ch != out_ch || stride != 1)
                        .then(|| Sequential::new(vec![conv(&mut rng, in_ch, out_ch, 1, stride, Init::LeCun)]));
                    seq.push(Layer::Residual(Box::new(Residual { branch, shortcut })))
                        .push(Layer::Relu);
                    in_ch = out_ch;
                }
            }
        }
    }
    seq.push(Layer::GlobalAvgPool);
    seq
}

fn build_decoder(config: &ModelConfig, seed: u64) -> Sequential {
    let mut rng = stream(seed, "init", &[Component::Decoder.init_index()]);
    let (h, w) = config.image_size;
    let div = config.decoder.spatial_divisor();
    let (bh, bw) = (h / div, w / div);
    let fd = config.feature_dim;
    let c = config.channels;
    let mut seq = Sequential::default();
    match config.decoder {
        DecoderPreset::Toy => {
            let base = 32;
            seq.push(Layer::Linear(Linear::new(&mut rng, fd, base * bh * bw, Init::He)))
                .push(Layer::Relu)
                .push(Layer::Reshape(vec![base, bh, bw]));
            for (i, o) in [(base, 16), (16, 16)] {
                seq.push(Layer::Upsample2x)
                    .push(conv(&mut rng, i, o, 3, 1, Init::He))
                    .push(Layer::Relu);
            }
            seq.push(Layer::Upsample2x).push(conv(&mut rng, 16, c, 3, 1, Init::LeCun));
        }
        DecoderPreset::ResnetGeneratorLike => {
            let base = 256;
            seq.push(Layer::Linear(Linear::new(&mut rng, fd, base * bh * bw, Init::He)))
                .push(Layer::Relu)
                .push(Layer::Reshape(vec![base, bh, bw]));
            for _ in 0..2 {
                let branch = Sequential::new(vec![
                    conv(&mut rng, base, base, 3, 1, Init::He),
                    Layer::Relu,
                    conv(&mut rng, base, base, 3, 1, Init::Scaled(0.2)),
                ]);
                seq.push(Layer::Residual(Box::new(Residual { branch, shortcut: None })));
            }
            let mut ch = base;
            for _ in 0..5 {
                let next = (ch / 2).max(16);
                seq.push(Layer::Upsample2x)
                    .push(conv(&mut rng, ch, next, 3, 1, Init::He))
                    .push(Layer::Relu);
                ch = next;
            }
            seq.push(conv(&mut rng, ch, c, 7, 1, Init::LeCun));
        }
    }
    seq.push(Layer::Sigmoid);
    seq
}

fn build_head(component: Component, config: &ModelConfig, seed: u64) -> Sequential {
    let mut rng = stream(seed, "init", &[component.init_index()]);
    let fd = config.feature_dim;
    let linear = |rng: &mut crate::rng::StreamRng, i, o, init| Layer::Linear(Linear::new(rng, i, o, init));
    match component {
        Component::Transparency => Sequential::new(vec![
            linear(&mut rng, fd, config.transparency_hidden, Init::He),
            Layer::Relu,
            linear(&mut rng, config.transparency_hidden, 1, Init::LeCun),
            Layer::Sigmoid,
        ]),
        Component::Projection => Sequential::new(vec![
            linear(&mut rng, fd, fd, Init::He),
            Layer::Relu,
            linear(&mut rng, fd, config.projection_dim, Init::LeCun),
        ]),
        Component::AuxLabel => Sequential::new(vec![linear(
            &mut rng,
            fd,
            config.aux_class_count.unwrap_or(1),
            Init::LeCun,
        )]),
        Component::Classifier => Sequential::new(vec![linear(&mut rng, fd, config.class_count.unwrap_or(1), Init::LeCun)]),
        Component::Encoder => build_encoder(config, seed),
        Component::Decoder => build_decoder(config, seed),
    }
}

/// Builds every component the configuration asks for. Each component draws
/// its initial weights from its own stream, so adding a head never changes
/// the others.
pub fn build_models(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let heads = config.heads;
    let head = |on: bool, c: Component| on.then(|| build_head(c, config, seed));
    Ok(ModelBundle {
        config: config.clone(),
        encoder: build_encoder(config, seed),
        decoder: head(heads.decoder, Component::Decoder),
        transparency: head(heads.transparency, Component::Transparency),
        projection: head(heads.projection, Component::Projection),
        aux_label: head(heads.aux_label, Component::AuxLabel),
        classifier: head(heads.classifier, Component::Classifier),
    })
}

fn features_in(features: &Array2<f64>, dim: usize) -> Result<()> {
    if features.ncols() != dim || features.nrows() == 0 {
        return Err(Error::invalid(format!(
            "features have shape {:?}, expected (batch, {dim})",
            features.dim()
        )));
    }
    Ok(())
}

impl ModelBundle {
    pub fn component(&self, c: Component) -> Option<&Sequential> {
        match c {
            Component::Encoder => Some(&self.encoder),
            Component::Decoder => self.decoder.as_ref(),
            Component::Transparency => self.transparency.as_ref(),
            Component::Projection => self.projection.as_ref(),
            Component::AuxLabel => self.aux_label.as_ref(),
            Component::Classifier => self.classifier.as_ref(),
        }
    }

    pub fn component_mut(&mut self, c: Component) -> Option<&mut Sequential> {
        match c {
            Component::Encoder => Some(&mut self.encoder),
            Component::Decoder => self.decoder.as_mut(),
            Component::Transparency => self.transparency.as_mut(),
            Component::Projection => self.projection.as_mut(),
            Component::AuxLabel => self.aux_label.as_mut(),
            Component::Classifier => self.classifier.as_mut(),
        }
    }

    /// Components present in this bundle, in canonical order.
    pub fn components(&self) -> Vec<Component> {
        Component::ALL
            .into_iter()
            .filter(|c| self.component(*c).is_some())
            .collect()
    }

    pub fn check_images(&self, images: &Array4<f64>) -> Result<()> {
        let (n, c, h, w) = images.dim();
        let cfg = &self.config;
        if n == 0 || c != cfg.channels || (h, w) != cfg.image_size {
            return Err(Error::invalid(format!(
                "images have shape {:?}, expected (batch, {}, {}, {})",
                images.dim(),
                cfg.channels,
                cfg.image_size.0,
                cfg.image_size.1
            )));
        }
        Ok(())
    }

    pub fn check_features(&self, features: &Array2<f64>) -> Result<()> {
        features_in(features, self.config.feature_dim)
    }

    fn head(&self, c: Component) -> Result<&Sequential> {
        self.component(c)
            .ok_or_else(|| Error::config(format!("model has no {c} head")))
    }

    /// `(batch, c, h, w)` images to `(batch, feature_dim)` features.
    pub fn encode(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_images(images)?;
        let out = self.encoder.infer(&images.clone().into_dyn());
        Ok(out.into_dimensionality::<Ix2>().expect("encoder emits 2d features"))
    }

    /// Features to `(batch, c, h, w)` images in `[0, 1]`.
    pub fn decode(&self, features: &Array2<f64>) -> Result<Array4<f64>> {
        self.check_features(features)?;
        let out = self.head(Component::Decoder)?.infer(&features.clone().into_dyn());
        Ok(out.into_dimensionality::<Ix4>().expect("decoder emits 4d images"))
    }

    /// One predicted mixing ratio in `[0, 1]` per sample.
    pub fn predict_transparency(&self, features: &Array2<f64>) -> Result<Array1<f64>> {
        self.check_features(features)?;
        let out = self.head(Component::Transparency)?.infer(&features.clone().into_dyn());
        Ok(column(&out))
    }

    /// `(batch, class_count)` logits.
    pub fn classify(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_features(features)?;
        let out = self.head(Component::Classifier)?.infer(&features.clone().into_dyn());
        Ok(out.into_dimensionality::<Ix2>().expect("2d logits"))
    }

    pub fn project(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_features(features)?;
        let out = self.head(Component::Projection)?.infer(&features.clone().into_dyn());
        Ok(out.into_dimensionality::<Ix2>().expect("2d embeddings"))
    }

    pub fn aux_logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_features(features)?;
        let out = self.head(Component::AuxLabel)?.infer(&features.clone().into_dyn());
        Ok(out.into_dimensionality::<Ix2>().expect("2d logits"))
    }

    /// Adds (or replaces) a linear classifier over the encoder features.
    pub fn attach_classifier(&mut self, class_count: usize, seed: u64) -> Result<()> {
        if class_count == 0 {
            return Err(Error::config("class_count must be >= 1"));
        }
        self.config.class_count = Some(class_count);
        self.config.heads.classifier = true;
        self.classifier = Some(build_head(Component::Classifier, &self.config, seed));
        Ok(())
    }

    /// Replaces encoder weights with externally supplied tensors, e.g. from a
    /// pretrained model. Tensors must match `encoder.params()` in order and
    /// shape.
    pub fn import_encoder_weights(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let params = self.encoder.params_mut();
        if params.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "encoder has {} parameter tensors, got {}",
                params.len(),
                tensors.len()
            )));
        }
        if let Some((p, t)) = params.iter().zip(&tensors).find(|(p, t)| p.shape() != t.shape()) {
            return Err(Error::invalid(format!("shape {:?} does not match {:?}", t.shape(), p.shape())));
        }
        for (p, t) in params.into_iter().zip(tensors) {
            *p = t;
        }
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of a component's parameters.
    pub fn parameter_hash(&self, c: Component) -> Option<String> {
        let net = self.component(c)?;
        let mut hasher = Sha256::new();
        for p in net.params() {
            for v in p.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        Some(hex::encode(hasher.finalize()))
    }

    pub fn scalar_count(&self) -> usize {
        self.components()
            .into_iter()
            .filter_map(|c| self.component(c))
            .map(Sequential::scalar_count)
            .sum()
    }
}
