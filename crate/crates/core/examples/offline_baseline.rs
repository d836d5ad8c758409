//! The offline baseline: generate a dataset from local solver runs, keep
//! every other timestep, train over epochs on both, and compare the two
//! validation curves.
//!
//!     cargo run --release --example offline_baseline

use olts::artifacts::MemorySink;
use olts::harness::config::{Experiment, RunConfig};
use olts::harness::{compare_runs, offline_generate, offline_train, subsample, training_setup, RunMetrics};
use olts::server::metrics_name;

fn main() {
    let mut cfg = RunConfig::preset(Experiment::E1Heat, false);
    cfg.offline.trajectories = 10;
    cfg.trainer.max_batches = 2_000;
    cfg.trainer.validate_every = 250;
    cfg.validation.trajectories = 2;

    let full = offline_generate(&cfg).expect("dataset");
    let half = subsample(&full, 2).unwrap();
    let mut runs = Vec::new();
    for (name, ds) in [("every step", &full), ("every 2nd step", &half)] {
        let sink = MemorySink::new();
        let r = offline_train(&cfg, training_setup(&cfg).unwrap(), ds, &sink).expect("trains");
        println!(
            "{name}: {} trajectories x {} steps, {} epochs, val rmse {:.4}",
            ds.trajectories.len(),
            ds.manifest.t_count,
            r.epochs_started,
            r.final_val_rmse
        );
        let csv = String::from_utf8(sink.get(&metrics_name(0)).unwrap()).unwrap();
        runs.push(RunMetrics::parse(name, &csv).unwrap());
    }
    print!("{}", compare_runs(&runs).unwrap().to_markdown());
}
