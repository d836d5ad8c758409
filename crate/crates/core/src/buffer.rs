//! Bounded sample store sitting between data reception and training.
//!
//! Three policies are available:
//!
//! * [`BufferPolicy::Fifo`]: a queue; a put on a full buffer evicts the oldest
//!   sample, reads pop from the head.
//! * [`BufferPolicy::ReservoirWeighted`]: a weighted reservoir of fixed size
//!   (Efraimidis–Spirakis keys `u^(1/w)`); reads draw without replacement in
//!   proportion to weight and do not remove anything.
//! * [`BufferPolicy::ReadOnceRandom`]: puts only fill free slots, every read
//!   removes what it returns, and no batch is produced while fewer than
//!   `watermark` samples are present. Each accepted sample is trained on
//!   exactly once.
//!
//! A buffer can be *closed* once no more data will arrive. A closed buffer
//! ignores the watermark and yields trailing partial batches so it can be
//! drained to empty. A closed reservoir yields nothing.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::ParamVector;

pub const DEFAULT_CAPACITY: u32 = 256;

/// Default watermark for a given batch size.
pub fn default_watermark(batch_size: u32) -> u32 {
    4 * batch_size
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleUnit {
    SingleStep {
        t_index: u32,
        field: Vec<f64>,
    },
    /// Two successive steps `(u_t, u_{t+1})`, for autoregressive training.
    StepPair {
        t_index: u32,
        input: Vec<f64>,
        target: Vec<f64>,
    },
    FullTrajectory {
        fields: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sim_id: u64,
    pub params: ParamVector,
    pub unit: SampleUnit,
}

impl Sample {
    pub fn single_step(sim_id: u64, params: ParamVector, t_index: u32, field: Vec<f64>) -> Self {
        Self {
            sim_id,
            params,
            unit: SampleUnit::SingleStep { t_index, field },
        }
    }

    /// Builds a trajectory sample, checking that every step has the same length.
    pub fn trajectory(
        sim_id: u64,
        params: ParamVector,
        fields: Vec<Vec<f64>>,
    ) -> Result<Self, BufferError> {
        if let Some(first) = fields.first() {
            if fields.iter().any(|f| f.len() != first.len()) {
                return Err(BufferError::RaggedTrajectory);
            }
        }
        Ok(Self {
            sim_id,
            params,
            unit: SampleUnit::FullTrajectory { fields },
        })
    }

    pub fn t_count(&self) -> u32 {
        match &self.unit {
            SampleUnit::SingleStep { .. } => 1,
            SampleUnit::StepPair { .. } => 2,
            SampleUnit::FullTrajectory { fields } => fields.len() as u32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum BufferPolicy {
    Fifo,
    ReservoirWeighted,
    ReadOnceRandom { watermark: u32 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BufferError {
    #[error("capacity must be at least 1")]
    ZeroCapacity,
    #[error("watermark {watermark} exceeds capacity {capacity}")]
    WatermarkAboveCapacity { watermark: u32, capacity: u32 },
    #[error("reservoir weight must be finite and > 0, got {0}")]
    InvalidWeight(f64),
    #[error("trajectory steps have different lengths")]
    RaggedTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Occupancy {
    pub count: u32,
    pub capacity: u32,
    pub free: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BufferCounters {
    pub accepted: u64,
    pub rejected: u64,
    pub evicted: u64,
    pub yielded: u64,
    pub batches: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T = Sample> {
    pub samples: Vec<T>,
    pub assembled_at_step: u64,
}

#[derive(Debug)]
struct Resident<T> {
    log_key: f64,
    weight: f64,
    item: T,
}

#[derive(Debug)]
enum Store<T> {
    Fifo(VecDeque<T>),
    Reservoir(Vec<Resident<T>>),
    ReadOnce(Vec<T>),
}

/// Single-threaded buffer core; see [`SharedBuffer`] for the synchronized form.
#[derive(Debug)]
pub struct MemoryBuffer<T = Sample> {
    policy: BufferPolicy,
    capacity: u32,
    store: Store<T>,
    key_rng: ChaCha8Rng,
    closed: bool,
    counters: BufferCounters,
}

impl<T: Clone> MemoryBuffer<T> {
    /// `seed` drives the reservoir keys; other policies draw randomness only
    /// from the generator passed to [`MemoryBuffer::try_get_batch`].
    pub fn new(policy: BufferPolicy, capacity: u32, seed: u64) -> Result<Self, BufferError> {
        if capacity == 0 {
            return Err(BufferError::ZeroCapacity);
        }
        let cap = capacity as usize;
        let store = match policy {
            BufferPolicy::Fifo => Store::Fifo(VecDeque::with_capacity(cap)),
            BufferPolicy::ReservoirWeighted => Store::Reservoir(Vec::with_capacity(cap)),
            BufferPolicy::ReadOnceRandom { watermark } => {
                if watermark > capacity {
                    return Err(BufferError::WatermarkAboveCapacity {
                        watermark,
                        capacity,
                    });
                }
                Store::ReadOnce(Vec::with_capacity(cap))
            }
        };
        Ok(Self {
            policy,
            capacity,
            store,
            key_rng: ChaCha8Rng::seed_from_u64(seed),
            closed: false,
            counters: BufferCounters::default(),
        })
    }

    pub fn policy(&self) -> BufferPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        match &self.store {
            Store::Fifo(q) => q.len(),
            Store::Reservoir(r) => r.len(),
            Store::ReadOnce(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn occupancy(&self) -> Occupancy {
        let count = self.len() as u32;
        Occupancy {
            count,
            capacity: self.capacity,
            free: self.capacity - count,
        }
    }

    pub fn counters(&self) -> BufferCounters {
        self.counters
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// True once closed and nothing more can be read.
    pub fn is_drained(&self) -> bool {
        self.closed && (self.is_empty() || matches!(self.store, Store::Reservoir(_)))
    }

    pub fn put(&mut self, item: T) -> bool {
        self.put_weighted(item, 1.0)
            .expect("unit weight is always valid")
    }

    /// Weighted insertion; the weight only matters for the reservoir policy.
    pub fn put_weighted(&mut self, item: T, weight: f64) -> Result<bool, BufferError> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(BufferError::InvalidWeight(weight));
        }
        let cap = self.capacity as usize;
        let accepted = match &mut self.store {
            Store::Fifo(q) => {
                if q.len() == cap {
                    q.pop_front();
                    self.counters.evicted += 1;
                }
                q.push_back(item);
                true
            }
            Store::ReadOnce(v) => {
                if v.len() < cap {
                    v.push(item);
                    true
                } else {
                    false
                }
            }
            Store::Reservoir(r) => {
                // log(u^(1/w)) = ln(u)/w; u is drawn from the open interval (0,1).
                let u: f64 = self.key_rng.random_range(f64::MIN_POSITIVE..1.0);
                let log_key = u.ln() / weight;
                let resident = Resident {
                    log_key,
                    weight,
                    item,
                };
                if r.len() < cap {
                    r.push(resident);
                    true
                } else {
                    let (min_idx, min_key) = r
                        .iter()
                        .enumerate()
                        .map(|(i, x)| (i, x.log_key))
                        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
                    if log_key > min_key {
                        r[min_idx] = resident;
                        self.counters.evicted += 1;
                        true
                    } else {
                        false
                    }
                }
            }
        };
        if accepted {
            self.counters.accepted += 1;
        } else {
            self.counters.rejected += 1;
        }
        Ok(accepted)
    }

    /// Returns a batch or `None` when the policy says not ready.
    pub fn try_get_batch<R: Rng + ?Sized>(
        &mut self,
        batch_size: u32,
        rng: &mut R,
    ) -> Option<Batch<T>> {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        let b = batch_size as usize;
        let closed = self.closed;
        let samples = match &mut self.store {
            Store::Fifo(q) => {
                let take = if q.len() >= b {
                    b
                } else if closed && !q.is_empty() {
                    q.len()
                } else {
                    return None;
                };
                q.drain(..take).collect::<Vec<_>>()
            }
            Store::ReadOnce(v) => {
                let BufferPolicy::ReadOnceRandom { watermark } = self.policy else {
                    unreachable!()
                };
                let threshold = (watermark as usize).max(b);
                let take = if v.len() >= threshold {
                    b
                } else if closed && !v.is_empty() {
                    b.min(v.len())
                } else {
                    return None;
                };
                let picked = index::sample(rng, v.len(), take).into_vec();
                let mut order: Vec<usize> = (0..take).collect();
                order.sort_by(|&a, &c| picked[c].cmp(&picked[a]));
                let mut out: Vec<Option<T>> = (0..take).map(|_| None).collect();
                // Remove highest indices first so swap_remove never disturbs a pending pick.
                for k in order {
                    out[k] = Some(v.swap_remove(picked[k]));
                }
                out.into_iter().map(Option::unwrap).collect()
            }
            Store::Reservoir(r) => {
                if closed || r.len() < b {
                    return None;
                }
                let mut keyed: Vec<(f64, usize)> = r
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                        (u.ln() / x.weight, i)
                    })
                    .collect();
                keyed.sort_by(|a, c| c.0.total_cmp(&a.0).then(a.1.cmp(&c.1)));
                keyed[..b].iter().map(|&(_, i)| r[i].item.clone()).collect()
            }
        };
        let batch = Batch {
            assembled_at_step: self.counters.batches,
            samples,
        };
        self.counters.batches += 1;
        self.counters.yielded += batch.samples.len() as u64;
        Some(batch)
    }

    /// Read-only view of the current contents (order is policy specific).
    pub fn snapshot(&self) -> Vec<T> {
        match &self.store {
            Store::Fifo(q) => q.iter().cloned().collect(),
            Store::Reservoir(r) => r.iter().map(|x| x.item.clone()).collect(),
            Store::ReadOnce(v) => v.clone(),
        }
    }
}

/// Multi-producer, single-consumer wrapper: any thread may `put`, one
/// training thread reads batches. Waiting is condition-variable based.
#[derive(Debug)]
pub struct SharedBuffer<T = Sample> {
    inner: Mutex<MemoryBuffer<T>>,
    changed: Condvar,
}

impl<T: Clone> SharedBuffer<T> {
    pub fn new(buffer: MemoryBuffer<T>) -> Self {
        Self {
            inner: Mutex::new(buffer),
            changed: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, MemoryBuffer<T>> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn put(&self, item: T) -> bool {
        let ok = self.lock().put(item);
        if ok {
            self.changed.notify_all();
        }
        ok
    }

    pub fn put_weighted(&self, item: T, weight: f64) -> Result<bool, BufferError> {
        let ok = self.lock().put_weighted(item, weight)?;
        if ok {
            self.changed.notify_all();
        }
        Ok(ok)
    }

    /// Retries a rejected put until it is accepted, the buffer is closed or
    /// `stop` is raised. This is where backpressure happens: the caller stops
    /// draining its socket while blocked here. Returns the item back on abort.
    pub fn put_blocking(&self, item: T, stop: &AtomicBool) -> Result<(), T> {
        let mut guard = self.lock();
        let mut item = Some(item);
        loop {
            if guard.is_closed() || stop.load(Ordering::Acquire) {
                return Err(item.take().unwrap());
            }
            let bounded = matches!(guard.policy, BufferPolicy::ReadOnceRandom { .. });
            if !bounded || guard.occupancy().free > 0 {
                guard.put(item.take().unwrap());
                drop(guard);
                self.changed.notify_all();
                return Ok(());
            }
            guard = self
                .changed
                .wait_timeout(guard, Duration::from_millis(20))
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    pub fn try_get_batch<R: Rng + ?Sized>(&self, batch_size: u32, rng: &mut R) -> Option<Batch<T>> {
        let out = self.lock().try_get_batch(batch_size, rng);
        if out.is_some() {
            self.changed.notify_all();
        }
        out
    }

    /// Waits up to `timeout` for a batch to become available.
    pub fn wait_batch<R: Rng + ?Sized>(
        &self,
        batch_size: u32,
        rng: &mut R,
        timeout: Duration,
    ) -> Option<Batch<T>> {
        let mut guard = self.lock();
        if let Some(b) = guard.try_get_batch(batch_size, rng) {
            drop(guard);
            self.changed.notify_all();
            return Some(b);
        }
        if guard.is_drained() {
            return None;
        }
        guard = self
            .changed
            .wait_timeout(guard, timeout)
            .unwrap_or_else(|p| p.into_inner())
            .0;
        let out = guard.try_get_batch(batch_size, rng);
        drop(guard);
        if out.is_some() {
            self.changed.notify_all();
        }
        out
    }

    pub fn close(&self) {
        self.lock().close();
        self.changed.notify_all();
    }

    /// Wakes every waiter, e.g. after a stop flag was raised.
    pub fn notify(&self) {
        self.changed.notify_all();
    }

    pub fn is_drained(&self) -> bool {
        self.lock().is_drained()
    }

    pub fn occupancy(&self) -> Occupancy {
        self.lock().occupancy()
    }

    pub fn counters(&self) -> BufferCounters {
        self.lock().counters()
    }

    pub fn policy(&self) -> BufferPolicy {
        self.lock().policy()
    }
}
