//! Instrumenting a solver by hand: an embedded server hands out parameters
//! over its control port, and each trajectory is pushed through a
//! `ClientSession` one timestep at a time.
//!
//!     cargo run --release --example client_session

use std::sync::Arc;
use std::time::Duration;

use olts::artifacts::MemorySink;
use olts::client_api::ClientSession;
use olts::harness::config::{Experiment, RunConfig};
use olts::harness::{sim_seed, training_setup};
use olts::launcher::ControlLink;
use olts::sampler::ParamVector;
use olts::server;
use olts::solvers::Simulation;

fn main() {
    let mut cfg = RunConfig::preset(Experiment::E2Lorenz, false);
    cfg.ensemble_size = 3;
    cfg.trainer.hidden = vec![32, 32];
    cfg.trainer.batch_size = 32;
    cfg.validation.trajectories = 1;

    let handle = server::start(
        cfg.server_config().unwrap(),
        training_setup(&cfg).unwrap(),
        Arc::new(MemorySink::new()),
    )
    .expect("server binds");
    let mut ctrl = ControlLink::connect(&handle.ctrl_addr().to_string()).unwrap();
    let assigned = ctrl.request_params(3, Duration::from_secs(10)).unwrap();
    let names = cfg.param_space().unwrap().names();

    for (sim_id, values) in assigned {
        let params = ParamVector::new(Arc::clone(&names), values);
        let sim = Simulation::build(&cfg.solver, &params, sim_seed(cfg.seeds.master, sim_id)).unwrap();
        let endpoint = handle.data_addr().to_string();
        let mut session = ClientSession::connect(&endpoint, sim_id, params.clone(), sim.field_shape()).unwrap();
        for (t, u) in sim.trajectory().unwrap().iter().enumerate() {
            session.send_timestep(t as u32, u).unwrap();
        }
        session.finalize().unwrap();
        println!("sim {sim_id} ({}): sent {} timesteps", params.to_kv_string(), session.sent_count());
    }

    let out = handle.join().expect("server finishes");
    let r = &out.report;
    println!(
        "server: stop {:?}, {} unique timesteps, {} batches, gaps {}, validation rmse {:?}",
        r.stop_reason, r.unique_timesteps, r.batches_trained, r.gaps, r.shards[0].final_val_rmse
    );
}
