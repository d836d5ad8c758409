//! Supervised run with real client processes, one of them killed midway and
//! restarted. Needs the `olts` binary:
//!
//!     cargo build --release --bin olts
//!     cargo run --release --example launch -- target/release/olts

use std::path::PathBuf;

use olts::harness::config::{Experiment, RunConfig};
use olts::launcher::{self, LaunchOptions, LocalProcess};

fn main() {
    let program = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/release/olts".into()));
    let out = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(Experiment::E2Lorenz, false);
    cfg.ensemble_size = 8;
    cfg.concurrency = 3;
    cfg.trainer.hidden = vec![32, 32];
    cfg.trainer.batch_size = 32;
    cfg.validation.trajectories = 1;
    cfg.launcher.step_delay_us = 200;
    cfg.faults.kill_clients = 1;
    cfg.out_dir = out.path().to_path_buf();

    let opts = LaunchOptions {
        program,
        out_dir: out.path().to_path_buf(),
    };
    let r = launcher::launch(&cfg, &opts, &mut LocalProcess).expect("launch");
    println!(
        "launched {}, done {}, restarted {}, abandoned {}, peak running {}, server exit {:?}",
        r.launched, r.done, r.restarted, r.abandoned, r.peak_running, r.server_exit
    );
    if let Some(s) = &r.server {
        println!("server: gaps {}, duplicates dropped {}, batches {}", s["gaps"], s["duplicates_dropped"], s["batches_trained"]);
    }
}
