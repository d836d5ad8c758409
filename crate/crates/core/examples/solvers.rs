//! One trajectory from each built-in solver, with a few numbers a reader can
//! sanity check: heat stays within its boundary and initial temperatures,
//! advection conserves the mean, Lorenz stays bounded.
//!
//!     cargo run --release --example solvers

use olts::harness::config::{Experiment, RunConfig};
use olts::sampler::{Sampler, SamplingStrategy};
use olts::solvers::{Simulation, SolverSettings};

fn describe(name: &str, sim: &Simulation) {
    let traj = sim.trajectory().expect("solver runs");
    let (lo, hi) = traj
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mean = |u: &Vec<f64>| u.iter().sum::<f64>() / u.len() as f64;
    println!(
        "{name:<9} shape {:?}, {} steps, values in [{lo:.3}, {hi:.3}], mean first {:.4} last {:.4}",
        sim.field_shape(),
        traj.len(),
        mean(&traj[0]),
        mean(traj.last().unwrap())
    );
}

fn main() {
    for (name, experiment) in [
        ("heat", Experiment::E1Heat),
        ("lorenz", Experiment::E2Lorenz),
        ("advection", Experiment::Advection),
    ] {
        let cfg = RunConfig::preset(experiment, false);
        let sampler = Sampler::new(cfg.param_space().unwrap(), SamplingStrategy::MonteCarlo { seed: 1 }, 1).unwrap();
        let params = sampler.next_params(0).unwrap();
        println!("{name:<9} λ = {}", params.to_kv_string());
        describe(name, &Simulation::build(&cfg.solver, &params, 1).expect("valid parameters"));
    }
    // Explicit settings work too; a coarse heat grid is quick.
    let params = olts::sampler::ParamVector::new(
        Simulation::HEAT_PARAMS.iter().map(|s| s.to_string()).collect(),
        vec![100.0, 500.0, 100.0, 100.0, 100.0],
    );
    describe("heat 8x8", &Simulation::build(&SolverSettings::heat(8), &params, 0).unwrap());
}
