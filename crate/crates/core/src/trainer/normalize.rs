use serde::{Deserialize, Serialize};

use super::TrainError;

/// Per-feature affine scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    Identity,
    /// Maps `lo → 0` and `hi → 1`.
    MinMax { lo: f64, hi: f64 },
    /// Maps `mean → 0` and `mean + std → 1`.
    Standardize { mean: f64, std: f64 },
}

impl Scheme {
    pub fn minmax(lo: f64, hi: f64) -> Result<Self, TrainError> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(TrainError::Config(format!("MinMax needs hi > lo, got [{lo}, {hi}]")));
        }
        Ok(Self::MinMax { lo, hi })
    }

    pub fn standardize(mean: f64, std: f64) -> Result<Self, TrainError> {
        if !(mean.is_finite() && std.is_finite() && std > 0.0) {
            return Err(TrainError::Config(format!("Standardize needs std > 0, got {std}")));
        }
        Ok(Self::Standardize { mean, std })
    }

    /// Mean and population standard deviation of `values`; a constant
    /// feature falls back to `std = 1` so it maps to zero.
    pub fn fit_standardize<I: IntoIterator<Item = f64>>(values: I) -> Result<Self, TrainError> {
        let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
        for v in values {
            n += 1;
            let d = v - mean;
            mean += d / n as f64;
            m2 += d * (v - mean);
        }
        if n == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let std = (m2 / n as f64).sqrt();
        Self::standardize(mean, if std > 0.0 { std } else { 1.0 })
    }

    #[inline]
    pub fn forward(&self, v: f64) -> f64 {
        match *self {
            Self::Identity => v,
            Self::MinMax { lo, hi } => (v - lo) / (hi - lo),
            Self::Standardize { mean, std } => (v - mean) / std,
        }
    }

    /// Physical size of one normalized unit.
    pub fn scale(&self) -> f64 {
        match *self {
            Self::Identity => 1.0,
            Self::MinMax { lo, hi } => hi - lo,
            Self::Standardize { std, .. } => std,
        }
    }

    #[inline]
    pub fn inverse(&self, v: f64) -> f64 {
        match *self {
            Self::Identity => v,
            Self::MinMax { lo, hi } => lo + v * (hi - lo),
            Self::Standardize { mean, std } => mean + v * std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    schemes: Vec<Scheme>,
}

impl Normalizer {
    pub fn new(schemes: Vec<Scheme>) -> Self {
        Self { schemes }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(vec![Scheme::Identity; dim])
    }

    pub fn dim(&self) -> usize {
        self.schemes.len()
    }

    pub fn schemes(&self) -> &[Scheme] {
        &self.schemes
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, v), s) in out.iter_mut().zip(x).zip(&self.schemes) {
            *o = s.forward(*v);
        }
    }

    pub fn forward_in_place(&self, x: &mut [f64]) {
        for (v, s) in x.iter_mut().zip(&self.schemes) {
            *v = s.forward(*v);
        }
    }

    pub fn inverse_in_place(&self, x: &mut [f64]) {
        for (v, s) in x.iter_mut().zip(&self.schemes) {
            *v = s.inverse(*v);
        }
    }
}
