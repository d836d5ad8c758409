//! Monte Carlo draws against an ordered sweep over the Lorenz ρ axis. Both
//! are pure in (seed, index), which is what lets a restarted client get the
//! same parameters back.
//!
//!     cargo run --example sampler

use olts::harness::config::{Experiment, RunConfig};
use olts::sampler::{Sampler, SamplingStrategy};

fn main() {
    let space = RunConfig::preset(Experiment::E2Lorenz, false).param_space().unwrap();
    for strategy in [
        SamplingStrategy::MonteCarlo { seed: 3 },
        SamplingStrategy::OrderedSweep { axis: "rho".into(), seed: 3 },
    ] {
        let sampler = Sampler::new(space.clone(), strategy.clone(), 12).unwrap();
        println!("{strategy:?}");
        for i in 0..12 {
            println!("  sim {i:>2}: {}", sampler.next_params(i).unwrap().to_kv_string());
        }
        assert_eq!(sampler.next_params(5).unwrap(), sampler.next_params(5).unwrap());
    }
}
