//! Per-connection handlers for the data and control ports.

use std::net::TcpStream;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use super::{SampleUnitKind, Shared};
use crate::buffer::{BufferPolicy, Sample, SampleUnit};
use crate::sampler::ParamVector;
use crate::trainer::ModelMode;
use crate::wire::{FrameReader, MsgType, ReadError, ReadOutcome, WireMessage, EMPTY_TRAJECTORY};

/// The simulation currently streaming on a connection.
struct SimStream {
    sim_id: u64,
    params: ParamVector,
    seen: Vec<bool>,
    distinct: u32,
    prev: Option<(u32, Vec<f64>)>,
    steps: Vec<Option<Vec<f64>>>,
}

impl SimStream {
    fn mark(&mut self, t: u32) {
        let t = t as usize;
        if self.seen.len() <= t {
            self.seen.resize(t + 1, false);
        }
        if !self.seen[t] {
            self.seen[t] = true;
            self.distinct += 1;
        }
    }
}

enum Violation {
    Close(String),
}

struct DataConn<'a> {
    shared: &'a Shared,
    shard: usize,
    sim: Option<SimStream>,
}

impl DataConn<'_> {
    fn insert(&self, sample: Sample) {
        let sh = self.shared;
        let shard = &sh.shards[self.shard];
        if sh.cfg.serialized {
            let bounded = matches!(shard.buffer.policy(), BufferPolicy::ReadOnceRandom { .. });
            if bounded && shard.buffer.occupancy().free == 0 {
                let mut t = shard.lock();
                if let Err(e) = t.train_available(&shard.buffer, sh.sink.as_ref()) {
                    sh.fail(format!("shard {}: {e}", self.shard));
                }
            }
        }
        if shard.buffer.put_blocking(sample, &sh.stop).is_err() && !sh.stopping() {
            sh.counters.dropped_after_close.fetch_add(1, Ordering::AcqRel);
        }
        if sh.cfg.serialized {
            let mut t = shard.lock();
            if let Err(e) = t.train_available(&shard.buffer, sh.sink.as_ref()) {
                sh.fail(format!("shard {}: {e}", self.shard));
            }
        }
    }

    fn abandon_current(&mut self) {
        if let Some(s) = self.sim.take() {
            if s.distinct > 0 {
                log::info!("sim {} ended without Bye after {} timesteps", s.sim_id, s.distinct);
                self.shared.counters.incomplete.fetch_add(1, Ordering::AcqRel);
            }
        }
    }

    fn handle(&mut self, msg: WireMessage) -> Result<(), Violation> {
        let sh = self.shared;
        match msg {
            WireMessage::Hello {
                sim_id,
                params,
                field_shape,
                ..
            } => {
                let len: u64 = field_shape.iter().map(|&d| d as u64).product();
                if field_shape.is_empty() || len != sh.field_len as u64 {
                    return Err(Violation::Close(format!(
                        "sim {sim_id}: field shape {field_shape:?} does not match the model ({} values)",
                        sh.field_len
                    )));
                }
                let params = sh
                    .cfg
                    .param_space
                    .vector(params)
                    .map_err(|e| Violation::Close(format!("sim {sim_id}: {e}")))?;
                self.abandon_current();
                self.sim = Some(SimStream {
                    sim_id,
                    params,
                    seen: Vec::new(),
                    distinct: 0,
                    prev: None,
                    steps: Vec::new(),
                });
                sh.notify_launcher(&WireMessage::Heartbeat {
                    sender_id: sim_id,
                    wallclock_ms: 0,
                });
            }
            WireMessage::Timestep {
                sim_id,
                t_index,
                values,
            } => {
                let Some(sim) = self.sim.as_mut() else {
                    return Err(Violation::Close(format!("timestep for sim {sim_id} before Hello")));
                };
                if sim.sim_id != sim_id {
                    return Err(Violation::Close(format!(
                        "timestep for sim {sim_id} on a stream announced as sim {}",
                        sim.sim_id
                    )));
                }
                if values.len() != sh.field_len || t_index == EMPTY_TRAJECTORY {
                    return Err(Violation::Close(format!(
                        "sim {sim_id} t={t_index}: {} values, expected {}",
                        values.len(),
                        sh.field_len
                    )));
                }
                sh.counters.samples_received.fetch_add(1, Ordering::AcqRel);
                sim.mark(t_index);
                let fresh = sh.dedup.lock().unwrap().insert(sim_id, t_index);
                if !fresh {
                    sh.counters.duplicates_dropped.fetch_add(1, Ordering::AcqRel);
                }
                let sample = match (sh.cfg.sample_unit, sh.mode) {
                    (SampleUnitKind::FullTrajectory, _) => {
                        let t = t_index as usize;
                        if sim.steps.len() <= t {
                            sim.steps.resize(t + 1, None);
                        }
                        sim.steps[t] = Some(values);
                        None
                    }
                    (SampleUnitKind::SingleStep, ModelMode::Direct) => {
                        fresh.then(|| Sample::single_step(sim_id, sim.params.clone(), t_index, values))
                    }
                    (SampleUnitKind::SingleStep, ModelMode::Autoregressive) => {
                        let pair = match &sim.prev {
                            Some((pt, prev)) if fresh && t_index > 0 && *pt == t_index - 1 => Some(Sample {
                                sim_id,
                                params: sim.params.clone(),
                                unit: SampleUnit::StepPair {
                                    t_index: *pt,
                                    input: prev.clone(),
                                    target: values.clone(),
                                },
                            }),
                            _ => None,
                        };
                        sim.prev = Some((t_index, values));
                        pair
                    }
                };
                if let Some(s) = sample {
                    self.insert(s);
                }
            }
            WireMessage::Bye { sim_id, last_t } => {
                let Some(sim) = self.sim.take() else {
                    return Err(Violation::Close(format!("Bye for sim {sim_id} before Hello")));
                };
                if sim.sim_id != sim_id {
                    return Err(Violation::Close(format!("Bye for sim {sim_id} on sim {}", sim.sim_id)));
                }
                if last_t == EMPTY_TRAJECTORY {
                    log::info!("sim {sim_id} finished with an empty trajectory");
                    sh.counters.empty.fetch_add(1, Ordering::AcqRel);
                    return Ok(());
                }
                let complete = sim.distinct as u64 == last_t as u64 + 1 && sim.seen.len() == last_t as usize + 1;
                if !complete {
                    log::warn!(
                        "sim {sim_id}: Bye at t={last_t} but {} distinct timesteps received; discarded as a gap",
                        sim.distinct
                    );
                    sh.counters.gaps.fetch_add(1, Ordering::AcqRel);
                    return Ok(());
                }
                if sh.cfg.sample_unit == SampleUnitKind::FullTrajectory {
                    let first = sh.registry.lock().unwrap().trajectories_inserted.insert(sim_id);
                    if first {
                        let fields: Vec<Vec<f64>> = sim.steps.into_iter().map(|s| s.expect("gap-free")).collect();
                        match Sample::trajectory(sim_id, sim.params, fields) {
                            Ok(s) => self.insert(s),
                            Err(e) => return Err(Violation::Close(e.to_string())),
                        }
                    }
                }
                sh.registry.lock().unwrap().completed.insert(sim_id);
                sh.plan.lock().unwrap().mark_completed(sim_id);
                sh.notify_launcher(&WireMessage::Bye { sim_id, last_t });
            }
            WireMessage::Heartbeat { sender_id, wallclock_ms } => {
                sh.notify_launcher(&WireMessage::Heartbeat {
                    sender_id,
                    wallclock_ms,
                });
            }
            other => {
                return Err(Violation::Close(format!(
                    "{:?} is not valid on the data channel",
                    other.msg_type()
                )));
            }
        }
        Ok(())
    }
}

/// Serialized mode: connections are handled one at a time, in accept order,
/// so the buffers see the same sequence on every run.
struct Turn<'a> {
    shared: &'a Shared,
}

impl<'a> Turn<'a> {
    fn wait(shared: &'a Shared, ticket: u64) -> Option<Self> {
        let mut turn = shared.turn.lock().unwrap_or_else(|p| p.into_inner());
        while *turn != ticket {
            if shared.stopping() {
                return None;
            }
            turn = shared
                .turn_changed
                .wait_timeout(turn, shared.cfg.poll_interval)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
        Some(Self { shared })
    }
}

impl Drop for Turn<'_> {
    fn drop(&mut self) {
        *self.shared.turn.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.shared.turn_changed.notify_all();
    }
}

pub(crate) fn data(shared: Arc<Shared>, stream: TcpStream, shard: usize, ticket: u64) {
    let turn = if shared.cfg.serialized {
        match Turn::wait(&shared, ticket) {
            Some(t) => Some(t),
            None => {
                shared.active_data.fetch_sub(1, Ordering::AcqRel);
                return;
            }
        }
    } else {
        None
    };
    let _ = stream.set_read_timeout(Some(shared.cfg.poll_interval));
    let mut reader = FrameReader::new(stream);
    let mut conn = DataConn {
        shared: &shared,
        shard,
        sim: None,
    };
    while !shared.stopping() {
        match reader.poll() {
            Ok(ReadOutcome::Message(m)) => {
                if let Err(Violation::Close(why)) = conn.handle(m) {
                    log::warn!("protocol violation, closing connection: {why}");
                    shared.counters.protocol_errors.fetch_add(1, Ordering::AcqRel);
                    break;
                }
            }
            Ok(ReadOutcome::Idle) => {}
            Ok(ReadOutcome::Eof) => break,
            Err(ReadError::Wire(e)) => {
                log::warn!("undecodable frame, closing connection: {e}");
                shared.counters.protocol_errors.fetch_add(1, Ordering::AcqRel);
                break;
            }
            Err(e) => {
                log::debug!("data connection closed: {e}");
                break;
            }
        }
    }
    conn.abandon_current();
    shared.active_data.fetch_sub(1, Ordering::AcqRel);
    drop(turn);
}

pub(crate) fn control(shared: Arc<Shared>, stream: TcpStream) {
    let _ = stream.set_read_timeout(Some(shared.cfg.poll_interval));
    match stream.try_clone() {
        Ok(w) => *shared.control_out.lock().unwrap() = Some(w),
        Err(e) => log::warn!("cannot clone control stream: {e}"),
    }
    let mut reader = FrameReader::new(stream);
    while !shared.stopping() {
        let msg = match reader.poll() {
            Ok(ReadOutcome::Message(m)) => m,
            Ok(ReadOutcome::Idle) => continue,
            Ok(ReadOutcome::Eof) => break,
            Err(e) => {
                log::warn!("control channel error: {e}");
                break;
            }
        };
        match msg {
            WireMessage::ParamRequest { count } => {
                let assigned = shared.plan.lock().unwrap().assign(count);
                match assigned {
                    Ok(list) => {
                        for (sim_id, params) in list {
                            shared.notify_launcher(&WireMessage::ParamAssign {
                                sim_id,
                                params: params.values().to_vec(),
                            });
                        }
                    }
                    Err(e) => log::error!("parameter assignment failed: {e}"),
                }
                shared.notify_launcher(&WireMessage::Ack {
                    ref_msg_type: MsgType::ParamRequest as u16,
                });
            }
            WireMessage::Shutdown => {
                log::info!("shutdown requested by launcher");
                shared.shutdown_requested.store(true, Ordering::Release);
                shared.notify_launcher(&WireMessage::Ack {
                    ref_msg_type: MsgType::Shutdown as u16,
                });
            }
            WireMessage::Heartbeat { .. } => {}
            other => {
                log::warn!("unexpected {:?} on control channel", other.msg_type());
                shared.counters.protocol_errors.fetch_add(1, Ordering::AcqRel);
                break;
            }
        }
    }
    if shared.launcher_conns.fetch_sub(1, Ordering::AcqRel) == 1 {
        *shared.control_out.lock().unwrap() = None;
        if !shared.stopping() {
            log::warn!("launcher disconnected");
            shared.launcher_lost.store(true, Ordering::Release);
        }
    }
}
