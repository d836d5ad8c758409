use std::sync::{Arc, Mutex, MutexGuard};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts::ArtifactSink;
use crate::buffer::{Sample, SharedBuffer};
use crate::stats::{batch_stats, BatchStatsRow};
use crate::trainer::checkpoint::encode_checkpoint;
use crate::trainer::{FeatureMap, Mlp, TrainError, Trainer, ValidationSet};

pub const METRICS_HEADER: &str = "step,lr,train_loss,train_rmse,val_rmse,epoch\n";

pub fn metrics_name(shard: usize) -> String {
    format!("metrics_shard{shard}.csv")
}

pub fn checkpoint_name(shard: usize) -> String {
    format!("checkpoint_shard{shard}.bin")
}

pub fn batch_stats_name(shard: usize) -> String {
    format!("batch_stats_shard{shard}.csv")
}

/// Training side of one shard: model replica, batch RNG and metric state.
pub(crate) struct ShardTrainer {
    pub index: usize,
    pub trainer: Trainer,
    pub rng: ChaCha8Rng,
    validation: Arc<ValidationSet>,
    validate_every: u64,
    checkpoint_every: u64,
    log_stats: bool,
    acc_loss: f64,
    acc_mse: f64,
    acc_n: u64,
    last_row_step: Option<u64>,
    pub loss_trace: Vec<f64>,
    pub stats: Vec<BatchStatsRow>,
    pub last_val: Option<f64>,
    /// Written in the metrics `epoch` column; online runs leave it at 0.
    pub epoch: u64,
}

pub(crate) struct ShardParts {
    pub index: usize,
    pub trainer: Trainer,
    pub seed: u64,
    pub validation: Arc<ValidationSet>,
    pub validate_every: u64,
    pub checkpoint_every: u64,
    pub log_stats: bool,
}

impl ShardTrainer {
    pub fn new(p: ShardParts) -> Self {
        Self {
            index: p.index,
            trainer: p.trainer,
            rng: ChaCha8Rng::seed_from_u64(p.seed),
            validation: p.validation,
            validate_every: p.validate_every,
            checkpoint_every: p.checkpoint_every,
            log_stats: p.log_stats,
            acc_loss: 0.0,
            acc_mse: 0.0,
            acc_n: 0,
            last_row_step: None,
            loss_trace: Vec::new(),
            stats: Vec::new(),
            last_val: None,
            epoch: 0,
        }
    }

    pub fn done(&self) -> bool {
        self.trainer.step() >= self.trainer.config().max_batches
    }

    pub fn model(&self) -> &Mlp {
        self.trainer.model()
    }

    pub fn features(&self) -> &FeatureMap {
        self.trainer.features()
    }

    /// One SGD step plus the periodic validation and checkpoint.
    pub fn train(&mut self, samples: &[Sample], sink: &dyn ArtifactSink) -> Result<(), TrainError> {
        let (x, t) = self.trainer.build_batch(samples)?;
        if self.log_stats {
            let row = batch_stats(x.view(), self.trainer.step());
            if self.stats.is_empty() {
                let _ = sink.append(
                    &batch_stats_name(self.index),
                    BatchStatsRow::csv_header(x.ncols()).as_bytes(),
                );
            }
            let _ = sink.append(&batch_stats_name(self.index), row.csv_line().as_bytes());
            self.stats.push(row);
        }
        let rep = match self.trainer.train_on_arrays(x.view(), t.view()) {
            Ok(r) => r,
            Err(e) => {
                // The update was refused, so the stored model is the last good one.
                let _ = self.checkpoint(sink);
                return Err(e);
            }
        };
        self.loss_trace.push(rep.loss);
        self.acc_loss += rep.loss;
        self.acc_mse += rep.mse_physical;
        self.acc_n += 1;
        let step = self.trainer.step();
        if self.validate_every > 0 && step % self.validate_every == 0 {
            self.metrics_row(sink);
        }
        if self.checkpoint_every > 0 && step % self.checkpoint_every == 0 {
            self.checkpoint(sink)
                .map_err(|e| TrainError::Config(format!("checkpoint write failed: {e}")))?;
        }
        Ok(())
    }

    /// Trains on every batch the buffer will currently give. Returns whether
    /// at least one step was taken.
    pub fn train_available(
        &mut self,
        buffer: &SharedBuffer<Sample>,
        sink: &dyn ArtifactSink,
    ) -> Result<bool, TrainError> {
        let b = self.trainer.config().batch_size as u32;
        let mut any = false;
        while !self.done() {
            let Some(batch) = buffer.try_get_batch(b, &mut self.rng) else {
                break;
            };
            self.train(&batch.samples, sink)?;
            any = true;
        }
        Ok(any)
    }

    /// Validates and appends one metrics row, unless one exists for this step.
    pub fn metrics_row(&mut self, sink: &dyn ArtifactSink) {
        let step = self.trainer.step();
        if self.last_row_step == Some(step) {
            return;
        }
        let val = self.trainer.validate(&self.validation);
        self.last_val = Some(val);
        let n = self.acc_n.max(1) as f64;
        let (loss, rmse) = if self.acc_n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (self.acc_loss / n, (self.acc_mse / n).sqrt())
        };
        if self.last_row_step.is_none() {
            let _ = sink.append(&metrics_name(self.index), METRICS_HEADER.as_bytes());
        }
        let lr = self.trainer.config().lr(step.saturating_sub(1));
        let line = format!("{step},{lr:?},{loss:?},{rmse:?},{val:?},{}\n", self.epoch);
        let _ = sink.append(&metrics_name(self.index), line.as_bytes());
        self.last_row_step = Some(step);
        self.acc_loss = 0.0;
        self.acc_mse = 0.0;
        self.acc_n = 0;
    }

    pub fn checkpoint(&self, sink: &dyn ArtifactSink) -> std::io::Result<()> {
        let bytes = encode_checkpoint(self.trainer.model(), self.trainer.config(), self.trainer.step());
        sink.replace(&checkpoint_name(self.index), &bytes)
    }

    /// Final metrics row and checkpoint.
    pub fn finish(&mut self, sink: &dyn ArtifactSink) -> std::io::Result<()> {
        self.metrics_row(sink);
        self.checkpoint(sink)
    }
}

pub(crate) struct Shard {
    pub index: usize,
    pub buffer: SharedBuffer<Sample>,
    pub trainer: Mutex<ShardTrainer>,
}

impl Shard {
    pub fn lock(&self) -> MutexGuard<'_, ShardTrainer> {
        self.trainer.lock().unwrap_or_else(|p| p.into_inner())
    }
}
