use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Whether one mixing ratio is shared by the whole batch or drawn per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    #[default]
    PerBatch,
    PerSample,
}

/// Draws mixing ratios from a symmetric `Beta(alpha, alpha)`.
///
/// `lambda` weights the auxiliary image: a mixed sample is
/// `(1 - lambda) * target + lambda * auxiliary`, so it is the opacity of the
/// auxiliary content and the regression target of transparency prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSampler {
    alpha: f64,
    mode: LambdaMode,
    seed: u64,
}

impl LambdaSampler {
    pub fn new(alpha: f64, mode: LambdaMode, seed: u64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("beta shape alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha, mode, seed })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mode(&self) -> LambdaMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Ratios for batch `batch_index`. The result depends only on
    /// `(seed, batch_index)` and `batch_size`.
    pub fn sample(&self, batch_size: usize, batch_index: u64) -> Result<Vec<f64>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        let beta = Beta::new(self.alpha, self.alpha)
            .map_err(|e| Error::config(format!("beta distribution: {e}")))?;
        let mut rng = stream(self.seed, "lambda", &[batch_index]);
        let mut draw = || beta.sample(&mut rng).clamp(0.0, 1.0);
        Ok(match self.mode {
            LambdaMode::PerBatch => vec![draw(); batch_size],
            LambdaMode::PerSample => (0..batch_size).map(|_| draw()).collect(),
        })
    }
}

/// Uniform index helper used by the batch builder.
pub(crate) fn uniform_index<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    rng.random_range(0..n)
}
