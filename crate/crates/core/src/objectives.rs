//! Pretext losses and their gradients.
//!
//! Every loss comes in two flavours: a plain value function and a `*_grad`
//! variant that also returns the gradient with respect to its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis, Ix2};
use serde::{Deserialize, Serialize};

use crate::data::MixedBatch;
use crate::error::{Error, Result};
use crate::model::{Component, Gradients, ModelBundle};
use crate::nn::{Sequential, Tensor, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the auxiliary objective (transparency, or its contrastive
    /// and auxiliary-label alternatives) relative to reconstruction.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be a finite non-negative number, got {gamma}")));
        }
        Ok(Self { gamma })
    }
}

/// The four candidate pretext objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pretext {
    /// R: reconstruct the target image from the mixed input.
    #[serde(rename = "R")]
    Reconstruction,
    /// T: regress the mixing ratio.
    #[serde(rename = "T")]
    Transparency,
    /// C: contrast two augmented views of each mixed sample.
    #[serde(rename = "C")]
    Contrastive,
    /// A: classify the auxiliary image that was mixed in.
    #[serde(rename = "A")]
    AuxLabel,
}

impl Pretext {
    pub const ALL: [Pretext; 4] = [
        Pretext::Reconstruction,
        Pretext::Transparency,
        Pretext::Contrastive,
        Pretext::AuxLabel,
    ];

    pub fn letter(self) -> char {
        match self {
            Pretext::Reconstruction => 'R',
            Pretext::Transparency => 'T',
            Pretext::Contrastive => 'C',
            Pretext::AuxLabel => 'A',
        }
    }
}

/// A non-empty set of pretext objectives, written like `R,T`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PretextSet(BTreeSet<Pretext>);

impl PretextSet {
    pub fn new(items: impl IntoIterator<Item = Pretext>) -> Result<Self> {
        let set: BTreeSet<_> = items.into_iter().collect();
        if set.is_empty() {
            return Err(Error::config("pretext selection must not be empty"));
        }
        Ok(Self(set))
    }

    /// Reconstruction plus transparency.
    pub fn mixssl() -> Self {
        Self([Pretext::Reconstruction, Pretext::Transparency].into_iter().collect())
    }

    pub fn contains(&self, p: Pretext) -> bool {
        self.0.contains(&p)
    }

    pub fn iter(&self) -> impl Iterator<Item = Pretext> + '_ {
        self.0.iter().copied()
    }

    /// Components whose parameters these objectives train.
    pub fn trained_components(&self) -> Vec<Component> {
        let mut out = vec![Component::Encoder];
        for (p, c) in [
            (Pretext::Reconstruction, Component::Decoder),
            (Pretext::Transparency, Component::Transparency),
            (Pretext::Contrastive, Component::Projection),
            (Pretext::AuxLabel, Component::AuxLabel),
        ] {
            if self.contains(p) {
                out.push(c);
            }
        }
        out
    }
}

impl fmt::Display for PretextSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letters: Vec<String> = self.0.iter().map(|p| p.letter().to_string()).collect();
        f.write_str(&letters.join(","))
    }
}

impl FromStr for PretextSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let items = s
            .split(|c: char| c == ',' || c == '+' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| match t.to_ascii_uppercase().as_str() {
                "R" => Ok(Pretext::Reconstruction),
                "T" => Ok(Pretext::Transparency),
                "C" => Ok(Pretext::Contrastive),
                "A" => Ok(Pretext::AuxLabel),
                other => Err(Error::config(format!("unknown pretext objective {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }
}

impl TryFrom<String> for PretextSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PretextSet> for String {
    fn from(p: PretextSet) -> String {
        p.to_string()
    }
}

/// Per-objective losses for one step. Inactive objectives are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transparency: Option<f64>,
    pub total: f64,
    #[serde(default)]
    pub extras: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.reconstruction.is_none_or(f64::is_finite)
            && self.transparency.is_none_or(f64::is_finite)
            && self.extras.values().all(|v| v.is_finite())
    }

    pub fn describe(&self) -> String {
        let mut parts = vec![format!("total={}", self.total)];
        if let Some(r) = self.reconstruction {
            parts.push(format!("reconstruction={r}"));
        }
        if let Some(t) = self.transparency {
            parts.push(format!("transparency={t}"));
        }
        parts.extend(self.extras.iter().map(|(k, v)| format!("{k}={v}")));
        parts.join(", ")
    }
}

/// One training-log line: `{step, reconstruction, transparency, total, extras}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
}

pub fn reconstruction_loss(reconstructed: &Array4<f64>, target: &Array4<f64>) -> Result<f64> {
    reconstruction_loss_grad(reconstructed, target).map(|(l, _)| l)
}

/// Mean squared error over batch and pixels, with its gradient with respect
/// to `reconstructed`.
pub fn reconstruction_loss_grad(reconstructed: &Array4<f64>, target: &Array4<f64>) -> Result<(f64, Array4<f64>)> {
    if reconstructed.dim() != target.dim() || target.is_empty() {
        return Err(Error::invalid(format!(
            "reconstruction {:?} and target {:?} differ in shape",
            reconstructed.dim(),
            target.dim()
        )));
    }
    let n = target.len() as f64;
    let diff = reconstructed - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

pub fn transparency_loss(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    transparency_loss_grad(predicted, actual).map(|(l, _)| l)
}

/// Mean absolute error between predicted and true mixing ratios. The
/// subgradient at equality is zero.
pub fn transparency_loss_grad(predicted: &[f64], actual: &[f64]) -> Result<(f64, Array1<f64>)> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ratios",
            predicted.len(),
            actual.len()
        )));
    }
    let n = predicted.len() as f64;
    let loss = predicted.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / n;
    let grad = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| {
            if p > a {
                1.0 / n
            } else if p < a {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, grad))
}

fn log_softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    log_softmax_rows(&logits.view()).mapv(f64::exp)
}

pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    cross_entropy_grad(logits, labels).map(|(l, _)| l)
}

/// Mean cross-entropy of integer labels under row-wise softmax, with the
/// gradient with respect to the logits.
pub fn cross_entropy_grad(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if n != labels.len() || n == 0 {
        return Err(Error::invalid(format!("{n} logit rows for {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let log_p = log_softmax_rows(&logits.view());
    let loss = -labels.iter().enumerate().map(|(i, &l)| log_p[[i, l]]).sum::<f64>() / n as f64;
    let mut grad = log_p.mapv(f64::exp);
    for (i, &l) in labels.iter().enumerate() {
        grad[[i, l]] -= 1.0;
    }
    grad /= n as f64;
    Ok((loss, grad))
}

/// Cross-entropy on the class of the auxiliary image mixed into each sample.
pub fn aux_label_loss(logits: &Array2<f64>, aux_labels: &[usize]) -> Result<f64> {
    cross_entropy(logits, aux_labels)
}

pub fn contrastive_loss(a: &Array2<f64>, b: &Array2<f64>, temperature: f64) -> Result<f64> {
    contrastive_loss_grad(a, b, temperature).map(|(l, _, _)| l)
}

fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let z = x / &norms.view().insert_axis(Axis(1));
    (z, norms)
}

fn normalize_backward(z: &Array2<f64>, norms: &Array1<f64>, dz: &Array2<f64>) -> Array2<f64> {
    let mut dx = dz.clone();
    for ((mut row, z_row), &norm) in dx.rows_mut().into_iter().zip(z.rows()).zip(norms) {
        let proj = z_row.dot(&row);
        row.zip_mut_with(&z_row, |d, &zv| *d = (*d - zv * proj) / norm);
    }
    dx
}

/// Symmetric normalized-temperature cross-entropy between two embedding
/// sets. Row `i` of `a` and row `i` of `b` are positives; every other row
/// of the opposite set is a negative. Returns the loss and its gradients
/// with respect to `a` and `b`.
pub fn contrastive_loss_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("embedding shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    let n = a.nrows();
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let (za, na) = l2_normalize_rows(a);
    let (zb, nb) = l2_normalize_rows(b);
    let sim = za.dot(&zb.t()) / temperature;

    let log_rows = log_softmax_rows(&sim.view());
    let log_cols = log_softmax_rows(&sim.t());
    let nf = n as f64;
    let loss_ab = -(0..n).map(|i| log_rows[[i, i]]).sum::<f64>() / nf;
    let loss_ba = -(0..n).map(|i| log_cols[[i, i]]).sum::<f64>() / nf;
    let loss = 0.5 * (loss_ab + loss_ba);

    let mut d_rows = log_rows.mapv(f64::exp);
    let mut d_cols = log_cols.mapv(f64::exp);
    for i in 0..n {
        d_rows[[i, i]] -= 1.0;
        d_cols[[i, i]] -= 1.0;
    }
    let d_sim = (d_rows + d_cols.t()) * (0.5 / nf);
    let dza = d_sim.dot(&zb) / temperature;
    let dzb = d_sim.t().dot(&za) / temperature;
    Ok((loss, normalize_backward(&za, &na, &dza), normalize_backward(&zb, &nb, &dzb)))
}

/// Temperature for the contrastive alternative.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

fn require<'a>(bundle: &'a ModelBundle, c: Component, why: Pretext) -> Result<&'a Sequential> {
    bundle
        .component(c)
        .ok_or_else(|| Error::config(format!("objective {} needs a {c} head", why.letter())))
}

fn as_dyn(x: &Array4<f64>) -> Tensor {
    x.clone().into_dyn()
}

fn to2(t: Tensor) -> Array2<f64> {
    t.into_dimensionality::<Ix2>().expect("2d activations")
}

/// Forward pass of the selected objectives on a mixed batch, optionally
/// followed by the backward pass.
pub fn pretext_loss(
    bundle: &ModelBundle,
    batch: &MixedBatch,
    weights: &LossWeights,
    selection: &PretextSet,
    temperature: f64,
    want_grads: bool,
) -> Result<(LossReport, Option<Gradients>)> {
    bundle.check_images(&batch.mixed)?;
    if batch.target.dim() != batch.mixed.dim() || batch.lambda.len() != batch.mixed.dim().0 {
        return Err(Error::invalid("mixed batch fields disagree in shape"));
    }
    let gamma = weights.gamma;
    let mut report = LossReport::default();
    let mut grads = want_grads.then(|| Gradients::zeros(bundle, &selection.trained_components()));

    let uses_mixed = selection.contains(Pretext::Reconstruction)
        || selection.contains(Pretext::Transparency)
        || selection.contains(Pretext::AuxLabel);
    if uses_mixed {
        let (feat, enc_trace) = bundle.encoder.forward(&as_dyn(&batch.mixed));
        let mut d_feat = Tensor::zeros(feat.raw_dim());

        let mut head = |c: Component, grad_out: Tensor, trace: &Trace, net: &Sequential, grads: &mut Option<Gradients>| {
            if let Some(g) = grads.as_mut() {
                d_feat += &net.backward(trace, &grad_out, g.get_mut(c).expect("head gradient slots"));
            }
        };

        if selection.contains(Pretext::Reconstruction) {
            let net = require(bundle, Component::Decoder, Pretext::Reconstruction)?;
            let (recon, trace) = net.forward(&feat);
            let recon = recon.into_dimensionality().expect("4d reconstruction");
            let (loss, g) = reconstruction_loss_grad(&recon, &batch.target)?;
            report.reconstruction = Some(loss);
            report.total += loss;
            head(Component::Decoder, g.into_dyn(), &trace, net, &mut grads);
        }
        if selection.contains(Pretext::Transparency) {
            let net = require(bundle, Component::Transparency, Pretext::Transparency)?;
            let (pred, trace) = net.forward(&feat);
            let pred: Vec<f64> = pred.iter().copied().collect();
            let (loss, g) = transparency_loss_grad(&pred, &batch.lambda)?;
            report.transparency = Some(loss);
            report.total += gamma * loss;
            let g = (g * gamma).into_shape_with_order((pred.len(), 1)).expect("column").into_dyn();
            head(Component::Transparency, g, &trace, net, &mut grads);
        }
        if selection.contains(Pretext::AuxLabel) {
            let net = require(bundle, Component::AuxLabel, Pretext::AuxLabel)?;
            let labels = batch
                .aux_label
                .as_ref()
                .ok_or_else(|| Error::config("objective A needs labeled auxiliary images"))?;
            let (logits, trace) = net.forward(&feat);
            let (loss, g) = cross_entropy_grad(&to2(logits), labels)?;
            report.extras.insert("aux_label".into(), loss);
            report.total += gamma * loss;
            head(Component::AuxLabel, (g * gamma).into_dyn(), &trace, net, &mut grads);
        }
        if let Some(g) = grads.as_mut() {
            bundle
                .encoder
                .backward(&enc_trace, &d_feat, g.get_mut(Component::Encoder).expect("encoder slots"));
        }
    }

    if selection.contains(Pretext::Contrastive) {
        let net = require(bundle, Component::Projection, Pretext::Contrastive)?;
        let (va, vb) = batch
            .views
            .as_ref()
            .ok_or_else(|| Error::config("objective C needs two augmented views per sample"))?;
        let (fa, ta) = bundle.encoder.forward(&as_dyn(va));
        let (fb, tb) = bundle.encoder.forward(&as_dyn(vb));
        let (pa, pta) = net.forward(&fa);
        let (pb, ptb) = net.forward(&fb);
        let (loss, ga, gb) = contrastive_loss_grad(&to2(pa), &to2(pb), temperature)?;
        report.extras.insert("contrastive".into(), loss);
        report.total += gamma * loss;
        if let Some(g) = grads.as_mut() {
            for (grad, proj_trace, enc_trace) in [(ga, &pta, &ta), (gb, &ptb, &tb)] {
                let grad = (grad * gamma).into_dyn();
                let d_feat = net.backward(proj_trace, &grad, g.get_mut(Component::Projection).expect("projection slots"));
                bundle
                    .encoder
                    .backward(enc_trace, &d_feat, g.get_mut(Component::Encoder).expect("encoder slots"));
            }
        }
    }
    Ok((report, grads))
}

/// `L = [R] reconstruction + gamma * ([T] transparency + [C] contrastive + [A] aux_label)`
/// on one mixed batch.
pub fn pretrain_loss(
    bundle: &ModelBundle,
    batch: &MixedBatch,
    weights: &LossWeights,
    selection: &PretextSet,
) -> Result<LossReport> {
    pretext_loss(bundle, batch, weights, selection, DEFAULT_TEMPERATURE, false).map(|(r, _)| r)
}

/// Same as [`pretrain_loss`], plus gradients for every trained component.
pub fn pretrain_loss_and_grads(
    bundle: &ModelBundle,
    batch: &MixedBatch,
    weights: &LossWeights,
    selection: &PretextSet,
) -> Result<(LossReport, Gradients)> {
    let (report, grads) = pretext_loss(bundle, batch, weights, selection, DEFAULT_TEMPERATURE, true)?;
    Ok((report, grads.expect("gradients requested")))
}

/// Classification cross-entropy through encoder and classifier. With
/// `train_encoder = false` only classifier gradients are produced.
pub fn classification_loss_and_grads(
    bundle: &ModelBundle,
    images: &Array4<f64>,
    labels: &[usize],
    train_encoder: bool,
) -> Result<(f64, Gradients)> {
    bundle.check_images(images)?;
    let classifier = bundle
        .classifier
        .as_ref()
        .ok_or_else(|| Error::config("model has no classifier head"))?;
    let components: &[Component] = if train_encoder {
        &[Component::Encoder, Component::Classifier]
    } else {
        &[Component::Classifier]
    };
    let mut grads = Gradients::zeros(bundle, components);
    let (feat, enc_trace) = bundle.encoder.forward(&as_dyn(images));
    let (logits, trace) = classifier.forward(&feat);
    let (loss, g) = cross_entropy_grad(&to2(logits), labels)?;
    let d_feat = classifier.backward(&trace, &g.into_dyn(), grads.get_mut(Component::Classifier).expect("slots"));
    if train_encoder {
        bundle
            .encoder
            .backward(&enc_trace, &d_feat, grads.get_mut(Component::Encoder).expect("slots"));
    }
    Ok((loss, grads))
}

/// Classification cross-entropy on precomputed features (frozen encoder).
pub fn probe_loss_and_grads(bundle: &ModelBundle, features: &Array2<f64>, labels: &[usize]) -> Result<(f64, Gradients)> {
    bundle.check_features(features)?;
    let classifier = bundle
        .classifier
        .as_ref()
        .ok_or_else(|| Error::config("model has no classifier head"))?;
    let mut grads = Gradients::zeros(bundle, &[Component::Classifier]);
    let (logits, trace) = classifier.forward(&features.clone().into_dyn());
    let (loss, g) = cross_entropy_grad(&to2(logits), labels)?;
    classifier.backward(&trace, &g.into_dyn(), grads.get_mut(Component::Classifier).expect("slots"));
    Ok((loss, grads))
}
