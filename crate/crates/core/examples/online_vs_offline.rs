//! Online against offline training on the heat ensemble, with the same
//! number of SGD steps: 500 streamed trajectories seen once against 50
//! stored trajectories revisited over epochs.
//!
//!     cargo run --release --example online_vs_offline -- [seed]

use std::sync::Arc;
use std::time::Instant;

use olts::artifacts::MemorySink;
use olts::harness::compare::parse_metrics;
use olts::harness::config::Experiment;
use olts::harness::{offline_generate, offline_train, run_local, training_setup, RunConfig};
use olts::sampler::SamplingStrategy;
use olts::server::metrics_name;

fn config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::preset(Experiment::E1Heat, false);
    cfg.seeds.master = seed;
    cfg.strategy = SamplingStrategy::MonteCarlo { seed };
    cfg
}

fn main() {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed is an integer"));
    let cfg = config(seed);

    let t0 = Instant::now();
    let online = run_local(&cfg, Arc::new(MemorySink::new())).expect("online run");
    let online_rmse = online.report.shards[0].final_val_rmse.unwrap_or(f64::NAN);
    println!(
        "online : {} trajectories, {} batches, val rmse {online_rmse:.4} ({:.1?})",
        online.report.completed_sims.len(),
        online.report.batches_trained,
        t0.elapsed()
    );

    let t0 = Instant::now();
    let ds = offline_generate(&cfg).expect("dataset");
    let sink = MemorySink::new();
    let offline = offline_train(&cfg, training_setup(&cfg).expect("setup"), &ds, &sink).expect("offline run");
    println!(
        "offline: {} trajectories, {} epochs, val rmse {:.4}, train-set rmse {:.4} ({:.1?})",
        ds.trajectories.len(),
        offline.epochs_started,
        offline.final_val_rmse,
        offline.final_train_rmse,
        t0.elapsed()
    );
    let csv = String::from_utf8(sink.get(&metrics_name(0)).unwrap_or_default()).unwrap();
    for row in parse_metrics(&csv).expect("metrics parse") {
        println!(
            "  step {:>6} epoch {:>3} train rmse {:.4} val rmse {:.4}",
            row.step, row.epoch, row.train_rmse, row.val_rmse
        );
    }
}
