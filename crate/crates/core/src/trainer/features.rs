//! Turns buffer samples into normalized `(input, target)` rows.
//!
//! Direct mode maps `λ ‖ t/n_steps` to the field `u_t`. Autoregressive mode
//! maps `λ ‖ u_t` to `u_{t+1}`. Only the parameters listed in the feature map
//! enter the input, so an initial position carried in `λ` can be left out.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::normalize::{Normalizer, Scheme};
use super::TrainError;
use crate::buffer::{Sample, SampleUnit};
use crate::sampler::{ParamKind, ParamSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Direct,
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    mode: ModelMode,
    param_idx: Vec<usize>,
    n_steps: u32,
    field_len: usize,
    input_norm: Normalizer,
    target_norm: Normalizer,
}

/// Scaling for a parameter drawn from `kind`: bounded supports go to `[0, 1]`.
pub fn param_scheme(kind: &ParamKind) -> Scheme {
    match kind {
        ParamKind::Normal { mean, std } if *std > 0.0 => Scheme::Standardize {
            mean: *mean,
            std: *std,
        },
        ParamKind::Normal { mean, .. } | ParamKind::Fixed { value: mean } => Scheme::Standardize {
            mean: *mean,
            std: 1.0,
        },
        _ => match kind.support() {
            (Some(lo), Some(hi)) if hi > lo => Scheme::MinMax { lo, hi },
            (Some(v), _) => Scheme::Standardize { mean: v, std: 1.0 },
            _ => Scheme::Identity,
        },
    }
}

impl FeatureMap {
    pub fn new(
        mode: ModelMode,
        param_idx: Vec<usize>,
        n_steps: u32,
        field_len: usize,
        input_norm: Normalizer,
        target_norm: Normalizer,
    ) -> Result<Self, TrainError> {
        let map = Self {
            mode,
            param_idx,
            n_steps,
            field_len,
            input_norm,
            target_norm,
        };
        if map.input_norm.dim() != map.input_dim() || map.target_norm.dim() != field_len {
            return Err(TrainError::Dimension(format!(
                "normalizers are {}/{} wide, features need {}/{}",
                map.input_norm.dim(),
                map.target_norm.dim(),
                map.input_dim(),
                field_len
            )));
        }
        if mode == ModelMode::Direct && n_steps == 0 {
            return Err(TrainError::Config("direct mode needs n_steps > 0".into()));
        }
        Ok(map)
    }

    /// Builds the map for `space`, using the parameters named in `inputs`.
    /// Field scaling is fitted on `reference` trajectories: one shared
    /// standardization when `pooled`, otherwise one per component.
    pub fn fit(
        mode: ModelMode,
        space: &ParamSpace,
        inputs: &[&str],
        n_steps: u32,
        reference: &[Vec<Vec<f64>>],
        pooled: bool,
    ) -> Result<Self, TrainError> {
        let mut param_idx = Vec::with_capacity(inputs.len());
        let mut schemes = Vec::new();
        for name in inputs {
            let idx = space
                .index_of(name)
                .ok_or_else(|| TrainError::Config(format!("unknown input parameter `{name}`")))?;
            param_idx.push(idx);
            schemes.push(param_scheme(&space.entries()[idx].kind));
        }
        let field_len = reference
            .iter()
            .flat_map(|t| t.first())
            .map(Vec::len)
            .next()
            .ok_or(TrainError::EmptyDataset)?;
        let steps = || reference.iter().flatten();
        if steps().any(|f| f.len() != field_len) {
            return Err(TrainError::Dimension("reference fields differ in length".into()));
        }
        let target_schemes = if pooled {
            let s = Scheme::fit_standardize(steps().flatten().copied())?;
            vec![s; field_len]
        } else {
            (0..field_len)
                .map(|k| Scheme::fit_standardize(steps().map(|f| f[k])))
                .collect::<Result<_, _>>()?
        };
        match mode {
            ModelMode::Direct => schemes.push(Scheme::Identity),
            ModelMode::Autoregressive => schemes.extend_from_slice(&target_schemes),
        }
        Self::new(
            mode,
            param_idx,
            n_steps,
            field_len,
            Normalizer::new(schemes),
            Normalizer::new(target_schemes),
        )
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn param_indices(&self) -> &[usize] {
        &self.param_idx
    }

    pub fn input_norm(&self) -> &Normalizer {
        &self.input_norm
    }

    pub fn target_norm(&self) -> &Normalizer {
        &self.target_norm
    }

    pub fn field_len(&self) -> usize {
        self.field_len
    }

    pub fn input_dim(&self) -> usize {
        self.param_idx.len()
            + match self.mode {
                ModelMode::Direct => 1,
                ModelMode::Autoregressive => self.field_len,
            }
    }

    pub fn output_dim(&self) -> usize {
        self.field_len
    }

    /// Number of training rows `sample` expands to.
    pub fn rows_in(&self, sample: &Sample) -> usize {
        match (&sample.unit, self.mode) {
            (SampleUnit::FullTrajectory { fields }, ModelMode::Direct) => fields.len(),
            (SampleUnit::FullTrajectory { fields }, ModelMode::Autoregressive) => {
                fields.len().saturating_sub(1)
            }
            _ => 1,
        }
    }

    /// Calls `f(raw_input, raw_target)` for every pair in `sample`.
    pub fn for_each_pair<F>(&self, sample: &Sample, mut f: F) -> Result<(), TrainError>
    where
        F: FnMut(&[f64], &[f64]),
    {
        let params = sample.params.values();
        let mut input = Vec::with_capacity(self.input_dim());
        for &i in &self.param_idx {
            input.push(*params.get(i).ok_or_else(|| {
                TrainError::Dimension(format!("sample has {} parameters, need index {i}", params.len()))
            })?);
        }
        let np = input.len();
        let check = |field: &[f64]| {
            if field.len() == self.field_len {
                Ok(())
            } else {
                Err(TrainError::Dimension(format!(
                    "field has {} values, model predicts {}",
                    field.len(),
                    self.field_len
                )))
            }
        };
        let time = |t: usize| t as f64 / self.n_steps as f64;
        match (&sample.unit, self.mode) {
            (SampleUnit::SingleStep { t_index, field }, ModelMode::Direct) => {
                check(field)?;
                input.push(time(*t_index as usize));
                f(&input, field);
            }
            (SampleUnit::FullTrajectory { fields }, ModelMode::Direct) => {
                input.push(0.0);
                for (t, field) in fields.iter().enumerate() {
                    check(field)?;
                    input[np] = time(t);
                    f(&input, field);
                }
            }
            (SampleUnit::StepPair { input: u0, target, .. }, ModelMode::Autoregressive) => {
                check(u0)?;
                check(target)?;
                input.extend_from_slice(u0);
                f(&input, target);
            }
            (SampleUnit::FullTrajectory { fields }, ModelMode::Autoregressive) => {
                input.resize(np + self.field_len, 0.0);
                for w in fields.windows(2) {
                    check(&w[0])?;
                    check(&w[1])?;
                    input[np..].copy_from_slice(&w[0]);
                    f(&input, &w[1]);
                }
            }
            (unit, mode) => {
                let name = match unit {
                    SampleUnit::SingleStep { .. } => "single_step",
                    SampleUnit::StepPair { .. } => "step_pair",
                    SampleUnit::FullTrajectory { .. } => "full_trajectory",
                };
                return Err(TrainError::Config(format!("{name} samples cannot train a {mode:?} model")));
            }
        }
        Ok(())
    }

    /// Normalized input and target matrices, one row per pair.
    pub fn batch(&self, samples: &[Sample]) -> Result<(Array2<f64>, Array2<f64>), TrainError> {
        let rows: usize = samples.iter().map(|s| self.rows_in(s)).sum();
        if rows == 0 {
            return Err(TrainError::EmptyBatch);
        }
        let mut x = Array2::zeros((rows, self.input_dim()));
        let mut t = Array2::zeros((rows, self.output_dim()));
        let mut r = 0;
        for s in samples {
            self.for_each_pair(s, |inp, tgt| {
                self.input_norm
                    .forward_into(inp, x.row_mut(r).into_slice().expect("standard layout"));
                self.target_norm
                    .forward_into(tgt, t.row_mut(r).into_slice().expect("standard layout"));
                r += 1;
            })?;
        }
        debug_assert_eq!(r, rows);
        Ok((x, t))
    }

    /// Model prediction in physical units for one raw input row.
    pub fn predict(&self, model: &Mlp, raw_input: &[f64]) -> Vec<f64> {
        let mut x = raw_input.to_vec();
        self.input_norm.forward_in_place(&mut x);
        let mut y = model.forward(&x);
        self.target_norm.inverse_in_place(&mut y);
        y
    }
}

/// Held-out pairs: normalized inputs and raw targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    inputs: Array2<f64>,
    targets: Array2<f64>,
}

impl ValidationSet {
    pub fn new(features: &FeatureMap, samples: &[Sample]) -> Result<Self, TrainError> {
        let rows: usize = samples.iter().map(|s| features.rows_in(s)).sum();
        if rows == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let mut inputs = Array2::zeros((rows, features.input_dim()));
        let mut targets = Array2::zeros((rows, features.output_dim()));
        let mut r = 0;
        for s in samples {
            features.for_each_pair(s, |inp, tgt| {
                features
                    .input_norm
                    .forward_into(inp, inputs.row_mut(r).into_slice().expect("standard layout"));
                targets.row_mut(r).as_slice_mut().expect("standard layout").copy_from_slice(tgt);
                r += 1;
            })?;
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    /// RMSE over every component of every pair, in physical units.
    pub fn rmse(&self, model: &Mlp, features: &FeatureMap) -> f64 {
        const CHUNK: usize = 512;
        let mut sum = 0.0;
        let mut start = 0;
        while start < self.len() {
            let end = (start + CHUNK).min(self.len());
            let mut y = model.forward_batch(self.inputs.slice(ndarray::s![start..end, ..]));
            for mut row in y.rows_mut() {
                features
                    .target_norm
                    .inverse_in_place(row.as_slice_mut().expect("standard layout"));
            }
            let t = self.targets.slice(ndarray::s![start..end, ..]);
            sum += y.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            start = end;
        }
        (sum / self.targets.len() as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::ParamEntry;
    use crate::trainer::mlp::{Activation, Layer};

    fn lorenz_space() -> ParamSpace {
        ParamSpace::new(vec![ParamEntry::uniform("rho", 0.0, 100.0)]).unwrap()
    }

    fn traj() -> Vec<Vec<f64>> {
        (0..5).map(|t| vec![t as f64, 2.0 * t as f64, -(t as f64)]).collect()
    }

    #[test]
    fn lorenz_autoregressive_dims() {
        let fm = FeatureMap::fit(ModelMode::Autoregressive, &lorenz_space(), &["rho"], 2000, &[traj()], false)
            .unwrap();
        assert_eq!(fm.input_dim(), 4);
        assert_eq!(fm.output_dim(), 3);
        let s = Sample::trajectory(1, lorenz_space().vector(vec![100.0]).unwrap(), traj()).unwrap();
        let (x, t) = fm.batch(&[s]).unwrap();
        assert_eq!(x.dim(), (4, 4));
        assert_eq!(t.dim(), (4, 3));
        // rho = 100 under MinMax over [0, 100].
        assert_eq!(x[[0, 0]], 1.0);
    }

    #[test]
    fn heat_direct_dims() {
        let names = ["T_ic", "T_x1", "T_x2", "T_y1", "T_y2"];
        let space = ParamSpace::new(names.iter().map(|n| ParamEntry::uniform(n, 100.0, 500.0)).collect()).unwrap();
        let reference = vec![vec![vec![300.0; 16], vec![200.0; 16]]];
        let fm = FeatureMap::fit(ModelMode::Direct, &space, &names, 100, &reference, true).unwrap();
        assert_eq!(fm.input_dim(), 6);
        assert_eq!(fm.output_dim(), 16);
        let p = space.vector(vec![100.0, 500.0, 300.0, 300.0, 300.0]).unwrap();
        let (x, _) = fm.batch(&[Sample::single_step(0, p, 50, vec![1.0; 16])]).unwrap();
        assert_eq!(x.row(0).to_vec(), vec![0.0, 1.0, 0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn mismatched_unit_is_an_error() {
        let fm = FeatureMap::fit(ModelMode::Autoregressive, &lorenz_space(), &["rho"], 2000, &[traj()], false)
            .unwrap();
        let s = Sample::single_step(0, lorenz_space().vector(vec![1.0]).unwrap(), 0, vec![0.0; 3]);
        assert!(fm.batch(&[s]).is_err());
        let short = Sample::trajectory(0, lorenz_space().vector(vec![1.0]).unwrap(), vec![vec![0.0; 2]; 3]).unwrap();
        assert!(matches!(fm.batch(&[short]), Err(TrainError::Dimension(_))));
    }

    #[test]
    fn zero_model_rmse_is_constant_target() {
        let fm = FeatureMap::new(
            ModelMode::Direct,
            vec![0],
            10,
            2,
            Normalizer::identity(2),
            Normalizer::identity(2),
        )
        .unwrap();
        let s = Sample::trajectory(0, lorenz_space().vector(vec![3.0]).unwrap(), vec![vec![-2.5, -2.5]; 4]).unwrap();
        let set = ValidationSet::new(&fm, &[s]).unwrap();
        let zero = Mlp::from_layers(vec![Layer::zeros(2, 2)], Activation::Relu).unwrap();
        assert_eq!(set.rmse(&zero, &fm), 2.5);
    }
}
