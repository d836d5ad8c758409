//! The classic workflow: train on a stored dataset presented over epochs.
//!
//! Uses the same per-shard training core as the server, so metrics, NaN
//! handling and checkpoints are identical; only the batch source differs.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::dataset::Dataset;
use super::{shuffle_seed, HarnessError};
use crate::artifacts::ArtifactSink;
use crate::buffer::{Sample, SampleUnit};
use crate::sampler::ParamVector;
use crate::server::shard::{ShardParts, ShardTrainer};
use crate::server::{SampleUnitKind, TrainingSetup};
use crate::trainer::{Mlp, ModelMode, Trainer, ValidationSet};

#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    pub model: Mlp,
    pub loss_trace: Vec<f64>,
    /// Training samples in the dataset.
    pub samples: usize,
    pub steps_per_epoch: u64,
    pub epochs_started: u64,
    pub final_val_rmse: f64,
    /// The final model on the whole training set, in the same units.
    pub final_train_rmse: f64,
}

/// Buffer-style samples for a dataset: single steps (direct), step pairs
/// (autoregressive), or whole trajectories.
pub fn dataset_samples(
    ds: &Dataset,
    names: Arc<[String]>,
    mode: ModelMode,
    unit: SampleUnitKind,
) -> Result<Vec<Sample>, HarnessError> {
    let stride = ds.manifest.subsample_every;
    let mut out = Vec::new();
    for t in &ds.trajectories {
        if t.params.len() != names.len() {
            return Err(HarnessError::Dataset(format!(
                "sim {} has {} parameters, the config names {}",
                t.sim_id,
                t.params.len(),
                names.len()
            )));
        }
        let params = ParamVector::new(Arc::clone(&names), t.params.clone());
        match (unit, mode) {
            (SampleUnitKind::FullTrajectory, _) => out.push(
                Sample::trajectory(t.sim_id, params, t.fields.clone())
                    .map_err(|e| HarnessError::Dataset(e.to_string()))?,
            ),
            (SampleUnitKind::SingleStep, ModelMode::Direct) => {
                for (i, f) in t.fields.iter().enumerate() {
                    out.push(Sample::single_step(t.sim_id, params.clone(), i as u32 * stride, f.clone()));
                }
            }
            (SampleUnitKind::SingleStep, ModelMode::Autoregressive) => {
                for (i, w) in t.fields.windows(2).enumerate() {
                    out.push(Sample {
                        sim_id: t.sim_id,
                        params: params.clone(),
                        unit: SampleUnit::StepPair {
                            t_index: i as u32 * stride,
                            input: w[0].clone(),
                            target: w[1].clone(),
                        },
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Trains for `trainer.max_batches` batches, reshuffling the dataset at the
/// start of every epoch. A metrics row is written every `validate_every`
/// batches and at every epoch boundary; its `epoch` column is the 1-based
/// epoch the step belongs to.
pub fn offline_train(
    cfg: &RunConfig,
    setup: TrainingSetup,
    ds: &Dataset,
    sink: &dyn ArtifactSink,
) -> Result<OfflineOutcome, HarnessError> {
    let field_len: usize = ds.manifest.field_shape.iter().map(|&d| d as usize).product();
    if field_len != setup.features.field_len() {
        return Err(HarnessError::Dataset(format!(
            "dataset fields have {field_len} values, the model expects {}",
            setup.features.field_len()
        )));
    }
    let space = cfg.param_space()?;
    let samples = dataset_samples(ds, space.names(), cfg.trainer.mode, cfg.sample_unit)?;
    if samples.is_empty() {
        return Err(crate::trainer::TrainError::EmptyDataset.into());
    }
    let b = cfg.trainer.batch_size;
    let steps_per_epoch = samples.len().div_ceil(b) as u64;
    let trainer = Trainer::new(setup.model, setup.features, cfg.sgd())?;
    let mut st = ShardTrainer::new(ShardParts {
        index: 0,
        trainer,
        seed: cfg.seeds.master,
        validation: Arc::new(setup.validation),
        validate_every: cfg.trainer.validate_every,
        checkpoint_every: cfg.trainer.checkpoint_every,
        log_stats: cfg.trainer.log_batch_stats,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seeds.master));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut batch = Vec::with_capacity(b);
    let mut epoch = 0;
    'outer: while !st.done() {
        epoch += 1;
        st.epoch = epoch;
        order.shuffle(&mut rng);
        for chunk in order.chunks(b) {
            if st.done() {
                break 'outer;
            }
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i].clone()));
            if let Err(e) = st.train(&batch, sink) {
                return Err(e.into());
            }
        }
        st.metrics_row(sink);
    }
    st.finish(sink)?;
    let train_set = ValidationSet::new(st.features(), &samples)?;
    let final_train_rmse = train_set.rmse(st.model(), st.features());
    Ok(OfflineOutcome {
        final_train_rmse,
        final_val_rmse: st.last_val.unwrap_or(f64::NAN),
        model: st.model().clone(),
        loss_trace: std::mem::take(&mut st.loss_trace),
        samples: samples.len(),
        steps_per_epoch,
        epochs_started: epoch,
    })
}
