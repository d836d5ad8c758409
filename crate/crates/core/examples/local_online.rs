//! A complete online run in one process: server, training thread and a pool
//! of client threads streaming a small Lorenz ensemble.
//!
//!     cargo run --release --example local_online -- [ensemble]

use std::sync::Arc;

use olts::artifacts::MemorySink;
use olts::harness::config::{Experiment, RunConfig};
use olts::harness::run_local;
use olts::server::metrics_name;

fn main() {
    let ensemble = std::env::args().nth(1).map_or(16, |s| s.parse().expect("ensemble is an integer"));
    let mut cfg = RunConfig::preset(Experiment::E2Lorenz, false);
    cfg.ensemble_size = ensemble;
    cfg.concurrency = 4;
    cfg.trainer.hidden = vec![64, 64];
    cfg.trainer.batch_size = 64;
    cfg.trainer.validate_every = 100;
    cfg.validation.trajectories = 2;

    let sink = Arc::new(MemorySink::new());
    let out = run_local(&cfg, sink.clone()).expect("run completes");
    let r = &out.report;
    println!(
        "{} sims, {} unique timesteps, {} batches, stop {:?}, {:.1}s",
        r.completed_sims.len(),
        r.unique_timesteps,
        r.batches_trained,
        r.stop_reason,
        r.wall_time_s
    );
    print!("{}", String::from_utf8(sink.get(&metrics_name(0)).unwrap_or_default()).unwrap());
}
