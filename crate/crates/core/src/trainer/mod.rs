//! Surrogate model training: MLP, SGD with exponential decay, feature maps for
//! direct and autoregressive prediction, validation and checkpoints.

pub mod checkpoint;
pub mod features;
pub mod mlp;
pub mod normalize;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use features::{FeatureMap, ModelMode, ValidationSet};
pub use mlp::{Activation, Grads, Layer, Mlp};
pub use normalize::{Normalizer, Scheme};

use crate::buffer::Sample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid trainer config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr0: f64,
    /// Per-step multiplicative decay, `0 < γ ≤ 1`.
    pub decay_gamma: f64,
    pub batch_size: usize,
    pub max_batches: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            decay_gamma: 0.99995,
            batch_size: 32,
            max_batches: 10_000,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(TrainError::Config(format!(
                "decay_gamma must be in (0, 1], got {}",
                self.decay_gamma
            )));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(TrainError::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// `lr(k) = lr0 · γ^k`.
    pub fn lr(&self, step: u64) -> f64 {
        self.lr0 * self.decay_gamma.powf(step as f64)
    }
}

/// `p ← p − lr(step)·g`. Nothing is written unless every updated parameter
/// is finite.
pub fn sgd_step(model: &mut Mlp, grads: &Grads, step: u64, cfg: &SgdConfig) -> Result<(), TrainError> {
    if grads.layers.len() != model.layers().len() {
        return Err(TrainError::Dimension("gradient layer count".into()));
    }
    let lr = cfg.lr(step);
    for (i, (l, g)) in model.layers().iter().zip(&grads.layers).enumerate() {
        if l.w.dim() != g.w.dim() || l.b.len() != g.b.len() {
            return Err(TrainError::Dimension(format!("gradient shape of layer {i}")));
        }
        let bad = l
            .w
            .iter()
            .zip(g.w.iter())
            .chain(l.b.iter().zip(g.b.iter()))
            .position(|(p, g)| !(p - lr * g).is_finite());
        if let Some(pos) = bad {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("layer {i} parameter {pos} (lr {lr:e}, max |grad| {:e})", grads.max_abs()),
            });
        }
    }
    for (l, g) in model.layers_mut().iter_mut().zip(&grads.layers) {
        l.w.scaled_add(-lr, &g.w);
        l.b.scaled_add(-lr, &g.b);
    }
    Ok(())
}

/// Result of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    /// Mean squared error in normalized target units, before the update.
    pub loss: f64,
    /// The same error in physical units.
    pub mse_physical: f64,
}

/// One model replica with its feature map and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Mlp,
    features: FeatureMap,
    cfg: SgdConfig,
    step: u64,
}

impl Trainer {
    pub fn new(model: Mlp, features: FeatureMap, cfg: SgdConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if model.in_dim() != features.input_dim() || model.out_dim() != features.output_dim() {
            return Err(TrainError::Dimension(format!(
                "model is {}→{}, features need {}→{}",
                model.in_dim(),
                model.out_dim(),
                features.input_dim(),
                features.output_dim()
            )));
        }
        Ok(Self {
            model,
            features,
            cfg,
            step: 0,
        })
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// Number of SGD steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn into_model(self) -> Mlp {
        self.model
    }

    /// Normalized `(inputs, targets)` for a batch of buffer samples.
    pub fn build_batch(&self, samples: &[Sample]) -> Result<(Array2<f64>, Array2<f64>), TrainError> {
        self.features.batch(samples)
    }

    /// Builds pairs from `samples` and takes one SGD step.
    pub fn train_on_batch(&mut self, samples: &[Sample]) -> Result<StepReport, TrainError> {
        let (x, t) = self.build_batch(samples)?;
        self.train_on_arrays(x.view(), t.view())
    }

    /// One backward pass and one SGD step on already normalized arrays.
    pub fn train_on_arrays(
        &mut self,
        x: ArrayView2<'_, f64>,
        t: ArrayView2<'_, f64>,
    ) -> Result<StepReport, TrainError> {
        if x.nrows() == 0 {
            return Err(TrainError::EmptyBatch);
        }
        if x.ncols() != self.model.in_dim() || t.ncols() != self.model.out_dim() || x.nrows() != t.nrows() {
            return Err(TrainError::Dimension(format!(
                "batch {}×{} → {}×{} for model {}→{}",
                x.nrows(),
                x.ncols(),
                t.nrows(),
                t.ncols(),
                self.model.in_dim(),
                self.model.out_dim()
            )));
        }
        let pass = self.model.backward_batch(x, t);
        if !pass.loss.is_finite() || !pass.grads.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                detail: format!("loss {} or gradients not finite", pass.loss),
            });
        }
        let step = self.step;
        sgd_step(&mut self.model, &pass.grads, step, &self.cfg)?;
        self.step += 1;
        let scales: Vec<f64> = self.features.target_norm().schemes().iter().map(Scheme::scale).collect();
        let mut sq = 0.0;
        for (orow, trow) in pass.outputs.rows().into_iter().zip(t.rows()) {
            for ((o, tv), s) in orow.iter().zip(trow.iter()).zip(&scales) {
                let d = (o - tv) * s;
                sq += d * d;
            }
        }
        Ok(StepReport {
            step,
            lr: self.cfg.lr(step),
            loss: pass.loss,
            mse_physical: sq / pass.outputs.len() as f64,
        })
    }

    /// RMSE in physical units over a held-out set.
    pub fn validate(&self, set: &ValidationSet) -> f64 {
        set.rmse(&self.model, &self.features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.lr(0), 1e-3);
        for k in 1..50 {
            let ratio = cfg.lr(k) / cfg.lr(k - 1);
            assert!((ratio - cfg.decay_gamma).abs() < 1e-15);
            assert!(cfg.lr(k) < cfg.lr(k - 1));
        }
        let flat = SgdConfig {
            decay_gamma: 1.0,
            ..cfg
        };
        assert_eq!(flat.lr(12345), 1e-3);
    }

    #[test]
    fn gamma_outside_range_is_rejected() {
        for g in [0.0, -0.5, 1.01, f64::NAN] {
            let cfg = SgdConfig {
                decay_gamma: g,
                ..SgdConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn zero_grads_leave_model_bitwise_unchanged() {
        let mut m = Mlp::new(&[3, 4, 2], Activation::Relu, 1);
        let before = m.clone();
        let zero = Grads {
            layers: m
                .layers()
                .iter()
                .map(|l| Layer::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        };
        sgd_step(&mut m, &zero, 7, &SgdConfig::default()).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn nan_update_is_refused_without_writing() {
        let mut m = Mlp::new(&[2, 3, 1], Activation::Silu, 5);
        let before = m.clone();
        let mut g = Grads {
            layers: m
                .layers()
                .iter()
                .map(|l| Layer::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        };
        g.layers[0].w[[0, 0]] = 1.0;
        g.layers[1].b[0] = f64::NAN;
        let err = sgd_step(&mut m, &g, 0, &SgdConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }));
        assert_eq!(m, before);
    }
}
