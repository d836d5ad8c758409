//! Streaming bias, measured: an ordered ρ sweep through a FIFO queue against
//! Monte Carlo sampling through the read-once random buffer.
//!
//! Prints the spread over training of the batch-mean normalized ρ for both.
//!
//!     cargo run --release --example bias_ablation -- [seed]

use std::sync::Arc;
use std::time::Instant;

use olts::artifacts::MemorySink;
use olts::harness::config::{Experiment, PolicyName};
use olts::harness::{run_local, RunConfig};
use olts::sampler::SamplingStrategy;
use olts::stats::summarize;

fn config(seed: u64, streaming: bool) -> RunConfig {
    let mut cfg = RunConfig::preset(Experiment::E2Lorenz, false);
    cfg.ensemble_size = 48;
    cfg.concurrency = 4;
    cfg.seeds.master = seed;
    cfg.trainer.max_batches = 1_000_000;
    cfg.trainer.validate_every = 1_000_000;
    cfg.trainer.log_batch_stats = true;
    cfg.validation.trajectories = 1;
    cfg.server.poll_ms = 5;
    if streaming {
        cfg.strategy = SamplingStrategy::OrderedSweep {
            axis: "rho".into(),
            seed,
        };
        cfg.buffer.policy = PolicyName::Fifo;
    } else {
        cfg.strategy = SamplingStrategy::MonteCarlo { seed };
        cfg.buffer.policy = PolicyName::ReadOnceRandom;
    }
    cfg
}

/// Standard deviation over training of the batch-mean normalized ρ.
pub fn rho_spread(cfg: &RunConfig) -> (f64, u64) {
    let out = run_local(cfg, Arc::new(MemorySink::new())).expect("run completes");
    let rows = &out.shards[0].batch_stats;
    (summarize(rows)[0].std_of_means, out.report.batches_trained)
}

fn main() {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed is an integer"));
    for (name, streaming) in [("ordered sweep + fifo", true), ("monte carlo + read-once", false)] {
        let t0 = Instant::now();
        let (spread, batches) = rho_spread(&config(seed, streaming));
        println!("{name:<26} std of batch-mean rho {spread:.4} over {batches} batches ({:.1?})", t0.elapsed());
    }
}
