mod common;

use std::io::Read;
use std::net::TcpStream;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use olts::artifacts::RecordingSink;
use olts::launcher::ControlLink;
use olts::server::{checkpoint_name, metrics_name, SampleUnitKind, StopReason, METRICS_HEADER, REPORT_NAME};
use olts::wire::{self, WireMessage, EMPTY_TRAJECTORY};

const LONG: Duration = Duration::from_secs(30);

#[test]
fn zero_clients_and_zero_batches_exit_cleanly() {
    let mut cfg = lorenz_cfg();
    cfg.trainer.max_batches = 0;
    let (h, sink) = start(&cfg);
    let out = h.join().unwrap();
    let r = &out.report;
    assert_eq!(r.stop_reason, StopReason::MaxBatches);
    assert_eq!(
        (r.samples_received, r.unique_timesteps, r.duplicates_dropped, r.buffer_insertions, r.batches_trained),
        (0, 0, 0, 0, 0)
    );
    assert_eq!((r.gaps, r.protocol_errors, r.connections), (0, 0, 0));
    assert!(sink.get(REPORT_NAME).is_some());
}

#[test]
fn one_lorenz_client_delivers_2001_timesteps() {
    let cfg = lorenz_cfg();
    let (h, _) = start(&cfg);
    let p = lorenz_params(&cfg, 28.0);
    let fields = lorenz_trajectory(&cfg, &p);
    assert_eq!(fields.len(), 2001);
    stream(h.data_addr(), 0, &p, &fields, None);
    let r = h.join().unwrap().report;
    assert_eq!(r.stop_reason, StopReason::EnsembleComplete);
    assert_eq!(r.samples_received, 2001);
    assert_eq!(r.unique_timesteps, 2001);
    assert_eq!(r.buffer_insertions, 2001);
    assert_eq!(r.completed_sims, vec![0]);
    assert_eq!(r.gaps, 0);
}

#[test]
fn replayed_trajectory_is_deduplicated() {
    let mut cfg = lorenz_cfg();
    cfg.server.stop_on_ensemble = false;
    let (h, _) = start(&cfg);
    let p = lorenz_params(&cfg, 40.0);
    let fields = lorenz_trajectory(&cfg, &p);
    stream(h.data_addr(), 0, &p, &fields, None);
    stream(h.data_addr(), 0, &p, &fields, None);
    assert!(wait_until(LONG, || h.progress().active_connections == 0 && h.progress().unique_timesteps == 2001));
    h.drain();
    let r = h.join().unwrap().report;
    assert_eq!(r.samples_received, 4002);
    assert_eq!(r.duplicates_dropped, 2001);
    assert_eq!(r.buffer_insertions, 2001);
}

#[test]
fn single_duplicate_timestep_is_dropped() {
    let mut cfg = lorenz_cfg();
    cfg.server.stop_on_ensemble = false;
    let (h, _) = start(&cfg);
    let p = lorenz_params(&cfg, 20.0);
    let mut s = TcpStream::connect(h.data_addr()).unwrap();
    let hello = WireMessage::Hello {
        client_id: 0,
        sim_id: 7,
        params: p.values().to_vec(),
        field_shape: vec![3],
    };
    wire::write_message(&mut s, &hello).unwrap();
    for t in [0, 1, 2, 3, 3] {
        let ts = WireMessage::Timestep {
            sim_id: 7,
            t_index: t,
            values: vec![t as f64; 3],
        };
        wire::write_message(&mut s, &ts).unwrap();
    }
    wire::write_message(&mut s, &WireMessage::Bye { sim_id: 7, last_t: 3 }).unwrap();
    drop(s);
    assert!(wait_until(LONG, || h.progress().completed_sims == 1));
    h.drain();
    let r = h.join().unwrap().report;
    assert_eq!((r.samples_received, r.unique_timesteps, r.duplicates_dropped), (5, 4, 1));
}

#[test]
fn connections_are_assigned_round_robin() {
    let mut cfg = lorenz_cfg();
    cfg.shards = 2;
    cfg.server.stop_on_ensemble = false;
    let (h, _) = start(&cfg);
    let p = lorenz_params(&cfg, 0.0);
    let fields = lorenz_trajectory(&cfg, &p);
    for sim in 0..7u64 {
        stream(h.data_addr(), sim, &p, &fields, Some(3));
        assert!(wait_until(LONG, || h.progress().completed_sims == sim + 1));
    }
    h.drain();
    let r = h.join().unwrap().report;
    let per_shard: Vec<u64> = r.shards.iter().map(|s| s.connections).collect();
    // Six earlier connections split 3/3; the seventh (counter 6) lands on shard 0.
    assert_eq!(per_shard, vec![4, 3]);
}

#[test]
fn timestep_before_hello_closes_the_connection() {
    let mut cfg = lorenz_cfg();
    cfg.server.stop_on_ensemble = false;
    let (h, _) = start(&cfg);
    let mut s = TcpStream::connect(h.data_addr()).unwrap();
    let ts = WireMessage::Timestep {
        sim_id: 1,
        t_index: 0,
        values: vec![0.0; 3],
    };
    wire::write_message(&mut s, &ts).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let mut buf = [0u8; 16];
    assert_eq!(s.read(&mut buf).unwrap(), 0, "server should close");
    h.drain();
    let r = h.join().unwrap().report;
    assert_eq!(r.protocol_errors, 1);
    assert_eq!(r.unique_timesteps, 0);
}

#[test]
fn max_batches_stops_after_exactly_that_many_steps() {
    let mut cfg = lorenz_cfg();
    cfg.trainer.max_batches = 10;
    cfg.trainer.validate_every = 3;
    cfg.server.stop_on_ensemble = false;
    let (h, sink) = start(&cfg);
    let p = lorenz_params(&cfg, 60.0);
    let fields = lorenz_trajectory(&cfg, &p);
    stream(h.data_addr(), 0, &p, &fields, None);
    let out = h.join().unwrap();
    assert_eq!(out.report.stop_reason, StopReason::MaxBatches);
    assert_eq!(out.report.batches_trained, 10);
    assert_eq!(out.shards[0].loss_trace.len(), 10);

    let csv = String::from_utf8(sink.get(&metrics_name(0)).unwrap()).unwrap();
    assert!(csv.starts_with(METRICS_HEADER));
    let steps: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
    assert_eq!(steps.last(), Some(&10));
}

fn trajectory_cfg() -> olts::harness::RunConfig {
    let mut cfg = lorenz_cfg();
    cfg.sample_unit = SampleUnitKind::FullTrajectory;
    cfg.trainer.batch_size = 1;
    cfg.buffer.capacity = 4;
    cfg.buffer.watermark = Some(1);
    cfg.server.stop_on_ensemble = false;
    cfg
}

#[test]
fn full_trajectory_unit_arrives_whole() {
    let cfg = trajectory_cfg();
    let (h, _) = start(&cfg);
    let p = lorenz_params(&cfg, 28.0);
    let fields = lorenz_trajectory(&cfg, &p);
    let addr = h.data_addr();
    let mut s = olts::client_api::ClientSession::connect_with(&addr.to_string(), 3, p.clone(), vec![3], &quiet()).unwrap();
    for (t, f) in fields.iter().enumerate() {
        s.send_timestep(t as u32, f).unwrap();
    }
    // Every timestep is in, but no complete trajectory yet: nothing to train on.
    assert!(wait_until(LONG, || h.progress().unique_timesteps == 2001));
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(h.progress().batches, 0);
    s.finalize().unwrap();
    assert!(wait_until(LONG, || h.progress().batches >= 1));
    h.drain();
    let out = h.join().unwrap();
    assert_eq!(out.report.buffer_insertions, 1);
    assert_eq!(out.report.gaps, 0);
    let stats = &out.report.shards[0].buffer;
    assert_eq!(stats.accepted, 1);
}

#[test]
fn trajectory_with_a_gap_is_discarded() {
    let cfg = trajectory_cfg();
    let (h, _) = start(&cfg);
    let p = lorenz_params(&cfg, 28.0);
    let mut s = TcpStream::connect(h.data_addr()).unwrap();
    let hello = WireMessage::Hello {
        client_id: 0,
        sim_id: 4,
        params: p.values().to_vec(),
        field_shape: vec![3],
    };
    wire::write_message(&mut s, &hello).unwrap();
    for t in (0..10u32).filter(|&t| t != 5) {
        let ts = WireMessage::Timestep {
            sim_id: 4,
            t_index: t,
            values: vec![1.0; 3],
        };
        wire::write_message(&mut s, &ts).unwrap();
    }
    wire::write_message(&mut s, &WireMessage::Bye { sim_id: 4, last_t: 9 }).unwrap();
    drop(s);
    assert!(wait_until(LONG, || h.progress().active_connections == 0 && h.progress().unique_timesteps == 9));
    h.drain();
    let r = h.join().unwrap().report;
    assert_eq!(r.gaps, 1);
    assert_eq!(r.buffer_insertions, 0);
    assert!(r.completed_sims.is_empty());
}

#[test]
fn empty_trajectory_bye_is_not_a_gap() {
    let mut cfg = lorenz_cfg();
    cfg.server.stop_on_ensemble = false;
    let (h, _) = start(&cfg);
    let p = lorenz_params(&cfg, 28.0);
    let mut s = TcpStream::connect(h.data_addr()).unwrap();
    let hello = WireMessage::Hello {
        client_id: 0,
        sim_id: 9,
        params: p.values().to_vec(),
        field_shape: vec![3],
    };
    wire::write_message(&mut s, &hello).unwrap();
    wire::write_message(
        &mut s,
        &WireMessage::Bye {
            sim_id: 9,
            last_t: EMPTY_TRAJECTORY,
        },
    )
    .unwrap();
    drop(s);
    assert!(wait_until(LONG, || h.progress().active_connections == 0));
    std::thread::sleep(Duration::from_millis(50));
    h.drain();
    let r = h.join().unwrap().report;
    assert_eq!((r.empty_trajectories, r.gaps, r.protocol_errors), (1, 0, 0));
}

#[test]
fn param_requests_get_distinct_sim_ids() {
    let mut cfg = lorenz_cfg();
    cfg.ensemble_size = 5;
    let (h, _) = start(&cfg);
    let mut ctrl = ControlLink::connect(&h.ctrl_addr().to_string()).unwrap();
    let a = ctrl.request_params(2, LONG).unwrap();
    assert_eq!(a.len(), 2);
    assert_ne!(a[0].0, a[1].0);
    assert!(a.iter().all(|(_, p)| p.len() == 4));
    // Only three are left in the ensemble.
    let b = ctrl.request_params(10, LONG).unwrap();
    assert_eq!(b.len(), 3);
    assert!(ctrl.request_params(1, LONG).unwrap().is_empty());
    ctrl.shutdown(LONG).unwrap();
    assert_eq!(h.join().unwrap().report.stop_reason, StopReason::Shutdown);
}

/// Every f64 of every field, as the 8 bytes it would take on disk.
fn payload_needles(fields: &[Vec<f64>]) -> Vec<[u8; 8]> {
    fields
        .iter()
        .flatten()
        .filter(|v| v.fract() != 0.0)
        .map(|v| v.to_le_bytes())
        .collect()
}

#[test]
fn no_sample_payload_reaches_any_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = lorenz_cfg();
    cfg.trainer.validate_every = 20;
    cfg.trainer.checkpoint_every = 20;
    let sink = Arc::new(RecordingSink::new(olts::artifacts::DirSink::new(dir.path()).unwrap()));
    let h = start_with(&cfg, sink.clone());
    let p = lorenz_params(&cfg, 28.0);
    let fields = lorenz_trajectory(&cfg, &p);
    stream(h.data_addr(), 0, &p, &fields, None);
    let r = h.join().unwrap().report;
    assert_eq!(r.unique_timesteps, 2001);

    let records = sink.records();
    assert!(!records.is_empty());
    let needles = payload_needles(&fields);
    for rec in &records {
        assert!(
            [metrics_name(0), checkpoint_name(0), REPORT_NAME.to_string()].contains(&rec.name),
            "unexpected artifact {}",
            rec.name
        );
        for n in &needles {
            assert!(!rec.bytes.windows(8).any(|w| w == n), "payload bytes in {}", rec.name);
        }
    }
    // The directory holds exactly what went through the sink.
    let recorded: usize = records
        .iter()
        .filter(|r| r.append)
        .map(|r| r.bytes.len())
        .sum::<usize>();
    let on_disk: u64 = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().metadata().unwrap().len())
        .sum();
    let replaced_last: usize = {
        let mut last = std::collections::BTreeMap::new();
        for r in records.iter().filter(|r| !r.append) {
            last.insert(r.name.clone(), r.bytes.len());
        }
        last.values().sum()
    };
    assert_eq!(on_disk as usize, recorded + replaced_last);
}

#[test]
fn a_blocked_shard_does_not_stall_the_other() {
    let mut cfg = lorenz_cfg();
    cfg.shards = 2;
    cfg.trainer.max_batches = 20;
    cfg.buffer.capacity = 64;
    cfg.buffer.watermark = Some(32);
    cfg.server.stop_on_ensemble = false;
    let (h, _) = start(&cfg);
    let p = lorenz_params(&cfg, 28.0);
    let fields = lorenz_trajectory(&cfg, &p);

    // Shard 0 trains its 20 batches, then its buffer fills and reception stops.
    let addr = h.data_addr();
    let f0 = fields.clone();
    let p0 = p.clone();
    let blocked = std::thread::spawn(move || {
        let mut s = olts::client_api::ClientSession::connect_with(&addr.to_string(), 0, p0, vec![3], &quiet()).unwrap();
        for (t, f) in f0.iter().enumerate() {
            if s.send_timestep(t as u32, f).is_err() {
                return;
            }
        }
        let _ = s.finalize();
    });
    let mut last = 0;
    let stable = wait_until(LONG, || {
        let now = h.progress().unique_timesteps;
        let same = now == last && h.progress().batches == 20;
        last = now;
        std::thread::sleep(Duration::from_millis(100));
        same
    });
    assert!(stable, "shard 0 never stalled");
    let stalled_at = h.progress().unique_timesteps;
    assert!(stalled_at < 2001);

    // Shard 1 still receives and trains.
    stream(h.data_addr(), 1, &p, &fields, Some(300));
    assert!(wait_until(LONG, || h.progress().unique_timesteps == stalled_at + 300));
    assert!(wait_until(LONG, || h.progress().batches == 20 + 300 / 32));
    assert_eq!(h.progress().unique_timesteps, stalled_at + 300, "shard 0 must stay blocked");

    h.stop();
    let t0 = Instant::now();
    let r = h.join().unwrap().report;
    assert!(t0.elapsed() < Duration::from_secs(5));
    assert_eq!(r.shards[0].batches, 20);
    assert_eq!(r.shards[1].batches, 300 / 32);
    blocked.join().unwrap();
}

#[test]
fn stop_ends_a_server_whose_watermark_is_never_reached() {
    let mut cfg = lorenz_cfg();
    cfg.server.stop_on_ensemble = false;
    let (h, _) = start(&cfg);
    let p = lorenz_params(&cfg, 28.0);
    let fields = lorenz_trajectory(&cfg, &p);
    // 10 timesteps, watermark 128: no batch can ever be drawn.
    let addr = h.data_addr();
    let mut s = olts::client_api::ClientSession::connect_with(&addr.to_string(), 0, p, vec![3], &quiet()).unwrap();
    for (t, f) in fields.iter().take(10).enumerate() {
        s.send_timestep(t as u32, f).unwrap();
    }
    assert!(wait_until(LONG, || h.progress().unique_timesteps == 10));
    h.stop();
    let t0 = Instant::now();
    let r = h.join().unwrap().report;
    assert!(t0.elapsed() < Duration::from_secs(2), "{:?}", t0.elapsed());
    assert_eq!(r.batches_trained, 0);
    assert_eq!(r.stop_reason, StopReason::External);
    drop(s);
}
