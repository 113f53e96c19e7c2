use std::collections::BTreeMap;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorGroups;
use crate::error::{Error, Result};
use crate::model::{Component, Gradients, ModelBundle};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerSpec {
    /// Reference defaults with the desk-scale batch size.
    pub fn toy() -> Self {
        Self { batch_size: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::config("betas must lie in [0, 1) and epsilon must be positive"));
        }
        Ok(())
    }
}

/// Adam moments with decoupled weight decay. Decay is scaled by the learning
/// rate, so a zero learning rate leaves parameters bitwise unchanged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    pub step: u64,
    moments: BTreeMap<Component, (Vec<Tensor>, Vec<Tensor>)>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bundle: &mut ModelBundle, grads: &Gradients, spec: &OptimizerSpec) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - spec.beta1.powi(t);
        let bias2 = 1.0 - spec.beta2.powi(t);
        let lr = spec.learning_rate;
        let shrink = 1.0 - lr * spec.weight_decay;
        for (c, g) in grads.iter() {
            let net = bundle
                .component_mut(c)
                .ok_or_else(|| Error::invalid(format!("gradients for absent component {c}")))?;
            let params = net.params_mut();
            if params.len() != g.len() {
                return Err(Error::invalid(format!("{c}: {} gradients for {} parameters", g.len(), params.len())));
            }
            let (m, v) = self.moments.entry(c).or_insert_with(|| {
                let zeros: Vec<Tensor> = g.iter().map(|t| Tensor::zeros(t.raw_dim())).collect();
                (zeros.clone(), zeros)
            });
            for (((p, g), m), v) in params.into_iter().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                ndarray::Zip::from(p)
                    .and(g)
                    .and(m)
                    .and(v)
                    .for_each(|p, &g, m, v| {
                        *m = spec.beta1 * *m + (1.0 - spec.beta1) * g;
                        *v = spec.beta2 * *v + (1.0 - spec.beta2) * g * g;
                        let m_hat = *m / bias1;
                        let v_hat = *v / bias2;
                        *p = *p * shrink - lr * m_hat / (v_hat.sqrt() + spec.epsilon);
                    });
            }
        }
        Ok(())
    }

    pub fn to_groups(&self) -> TensorGroups {
        let mut groups = TensorGroups::new();
        groups.insert("step".into(), vec![Tensor::from_elem(IxDyn(&[1]), self.step as f64)]);
        for (c, (m, v)) in &self.moments {
            groups.insert(format!("m/{}", c.name()), m.clone());
            groups.insert(format!("v/{}", c.name()), v.clone());
        }
        groups
    }

    pub fn from_groups(mut groups: TensorGroups) -> Result<Self> {
        let bad = |msg: String| Error::CheckpointCorrupt(format!("optimizer state: {msg}"));
        let step = groups
            .remove("step")
            .and_then(|t| t.first().and_then(|t| t.iter().next().copied()))
            .ok_or_else(|| bad("missing step counter".into()))?;
        let mut moments = BTreeMap::new();
        let names: Vec<String> = groups.keys().cloned().collect();
        for name in names.iter().filter(|n| n.starts_with("m/")) {
            let comp = &name[2..];
            let c = Component::from_name(comp).ok_or_else(|| bad(format!("unknown component {comp}")))?;
            let m = groups.remove(name).expect("listed key");
            let v = groups
                .remove(&format!("v/{comp}"))
                .ok_or_else(|| bad(format!("missing second moment for {comp}")))?;
            moments.insert(c, (m, v));
        }
        if let Some(extra) = groups.keys().next() {
            return Err(bad(format!("unexpected group {extra}")));
        }
        Ok(Self { step: step as u64, moments })
    }
}
