use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};

use olts::artifacts::{ArtifactSink, DirSink};
use olts::client_api::{server_endpoint, ConnectOptions};
use olts::harness::{
    self, compare_runs, offline_generate, offline_train, read_dataset, run_client, run_local, subsample,
    training_setup, write_dataset, ClientJob, HarnessError, RunConfig, RunMetrics,
};
use olts::launcher::{self, LaunchOptions, LocalProcess};
use olts::sampler::{parse_kv, ParamVector};
use olts::server;
use olts::solvers::{SolverKind, SolverSettings};
use olts::stats::{parse_batch_stats, summarize};

#[derive(Parser)]
#[command(name = "olts", version, about = "Online training of neural surrogates from streamed solver ensembles")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Use the full-scale preset instead of the desk-scale one.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Start a server and supervise the client ensemble.
    Launch {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run clients as threads of this process instead of supervised processes.
        #[arg(long)]
        in_process: bool,
    },
    /// Run the training server; prints `READY data=<addr> ctrl=<addr>` once bound.
    Server {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data_port: Option<u16>,
        #[arg(long)]
        ctrl_port: Option<u16>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one solver instance and stream it to the server.
    Client {
        #[arg(long)]
        kind: SolverKind,
        #[arg(long)]
        sim_id: u64,
        /// Parameter vector, `name=value,...`, in the server's order.
        #[arg(long)]
        params: String,
        /// Solver settings overriding the kind's preset, `key=value,...`.
        #[arg(long, default_value = "")]
        solver: String,
        /// Server data endpoint; `OLTS_SERVER` takes precedence.
        #[arg(long, default_value = "127.0.0.1:7000")]
        server: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        step_delay_us: u64,
        /// 0 disables heartbeats.
        #[arg(long, default_value_t = 1000)]
        heartbeat_ms: u64,
        /// Exit with an error, without `Bye`, once this many steps were sent.
        #[arg(long)]
        fail_at_step: Option<u32>,
        #[arg(long, default_value_t = 0)]
        client_id: u64,
    },
    /// Generate an offline dataset with local solver runs.
    OfflineGenerate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trajectories: Option<u64>,
    },
    /// Train over epochs on a stored dataset.
    OfflineTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep every k-th step of every trajectory in a dataset.
    Subsample {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        every: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a batch statistics CSV.
    Stats {
        input: PathBuf,
    },
    /// Compare final validation RMSE of runs: `name=metrics.csv ...`, first is the baseline.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<String>,
        /// Also write compare.md and compare.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    RunConfig::load(&args.config, args.full_scale).map_err(|e| Failure::Config(e.to_string()))
}

fn dir_sink(dir: &Path) -> Result<Arc<dyn ArtifactSink>, Failure> {
    Ok(Arc::new(DirSink::new(dir).map_err(runtime)?))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Launch { cfg, out, in_process } => {
            let cfg = load(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            if in_process {
                let outcome = run_local(&cfg, dir_sink(&out)?)?;
                println!("{}", serde_json::to_string_pretty(&outcome.report).map_err(runtime)?);
                return Ok(());
            }
            let program = std::env::current_exe().map_err(runtime)?;
            let opts = LaunchOptions { program, out_dir: out };
            let report = launcher::launch(&cfg, &opts, &mut LocalProcess).map_err(runtime)?;
            println!(
                "launched {} done {} restarted {} abandoned {} in {:.1}s",
                report.launched, report.done, report.restarted, report.abandoned, report.wall_time_s
            );
            if report.server_exit != Some(0) {
                return Err(Failure::Runtime(format!("server exited with {:?}", report.server_exit)));
            }
        }
        Cmd::Server {
            cfg,
            data_port,
            ctrl_port,
            out,
        } => {
            let mut cfg = load(&cfg)?;
            if let Some(p) = data_port {
                cfg.server.data_port = p;
            }
            if let Some(p) = ctrl_port {
                cfg.server.ctrl_port = p;
            }
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let setup = training_setup(&cfg)?;
            let scfg = cfg.server_config().map_err(|e| Failure::Config(e.to_string()))?;
            let handle = server::start(scfg, setup, dir_sink(&out)?).map_err(runtime)?;
            let mut out = io::stdout();
            writeln!(out, "READY data={} ctrl={}", handle.data_addr(), handle.ctrl_addr())
                .and_then(|_| out.flush())
                .map_err(runtime)?;
            let outcome = handle.join().map_err(runtime)?;
            let r = &outcome.report;
            // The launcher may be gone by now; a closed stdout is not an error.
            let _ = writeln!(
                io::stdout(),
                "stopped ({:?}): {} timesteps received, {} duplicates, {} batches",
                r.stop_reason,
                r.samples_received,
                r.duplicates_dropped,
                r.batches_trained
            );
            if let server::StopReason::TrainingError(e) = &r.stop_reason {
                return Err(Failure::Runtime(e.clone()));
            }
        }
        Cmd::Client {
            kind,
            sim_id,
            params,
            solver,
            server,
            seed,
            step_delay_us,
            heartbeat_ms,
            fail_at_step,
            client_id,
        } => {
            let pairs = parse_kv(&params).map_err(Failure::Config)?;
            let names: Arc<[String]> = pairs.iter().map(|(k, _)| k.clone()).collect();
            let params = ParamVector::new(names, pairs.iter().map(|(_, v)| *v).collect());
            let mut settings = match kind {
                SolverKind::Heat => SolverSettings::heat(32),
                SolverKind::Lorenz => SolverSettings::lorenz(),
                SolverKind::Advection => SolverSettings::advection(64),
            };
            settings
                .apply_kv(&parse_kv(&solver).map_err(Failure::Config)?)
                .map_err(Failure::Config)?;
            let job = ClientJob {
                seed,
                step_delay: Duration::from_micros(step_delay_us),
                connect: ConnectOptions {
                    heartbeat: (heartbeat_ms > 0).then(|| Duration::from_millis(heartbeat_ms)),
                    client_id,
                    ..ConnectOptions::default()
                },
                fail_at_step,
                ..ClientJob::new(server_endpoint(&server), sim_id, params, settings)
            };
            let summary = run_client(&job).map_err(|e| match e {
                harness::ClientRunError::Solver(olts::solvers::SolverError::InvalidParams(m)) => Failure::Config(m),
                other => runtime(other),
            })?;
            log::info!("sim {sim_id}: {} steps in {:?}", summary.steps_emitted, summary.wall_time);
        }
        Cmd::OfflineGenerate { cfg, out, trajectories } => {
            let mut cfg = load(&cfg)?;
            if let Some(n) = trajectories {
                cfg.offline.trajectories = n;
            }
            let out = out.unwrap_or_else(|| cfg.offline.dataset.clone());
            let ds = offline_generate(&cfg)?;
            write_dataset(&out, &ds)?;
            println!("{} trajectories of {} steps written to {}", ds.manifest.count, ds.manifest.t_count, out.display());
        }
        Cmd::OfflineTrain { cfg, dataset, out } => {
            let cfg = load(&cfg)?;
            let ds = read_dataset(&dataset.unwrap_or_else(|| cfg.offline.dataset.clone()))?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let setup = training_setup(&cfg)?;
            let sink = dir_sink(&out)?;
            let r = offline_train(&cfg, setup, &ds, sink.as_ref())?;
            println!(
                "{} batches over {} epochs ({} per epoch), final validation RMSE {:.6e}",
                r.loss_trace.len(),
                r.epochs_started,
                r.steps_per_epoch,
                r.final_val_rmse
            );
        }
        Cmd::Subsample { dataset, every, out } => {
            let ds = subsample(&read_dataset(&dataset)?, every)?;
            write_dataset(&out, &ds)?;
            println!("{} trajectories of {} steps written to {}", ds.manifest.count, ds.manifest.t_count, out.display());
        }
        Cmd::Stats { input } => {
            let text = std::fs::read_to_string(&input).map_err(runtime)?;
            let rows = parse_batch_stats(&text).map_err(Failure::Config)?;
            println!("{} batches", rows.len());
            println!("feature,mean_of_means,std_of_means,mean_of_stds");
            for f in summarize(&rows) {
                println!("{},{:.6},{:.6},{:.6}", f.feature, f.mean_of_means, f.std_of_means, f.mean_of_stds);
            }
        }
        Cmd::Compare { runs, out } => {
            let mut metrics = Vec::new();
            for r in &runs {
                let (name, path) = r.split_once('=').unwrap_or((r.as_str(), r.as_str()));
                let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{path}: {e}")))?;
                metrics.push(RunMetrics::parse(name, &text)?);
            }
            let report = compare_runs(&metrics)?;
            print!("{}", report.to_markdown());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(runtime)?;
                std::fs::write(dir.join("compare.md"), report.to_markdown()).map_err(runtime)?;
                std::fs::write(dir.join("compare.csv"), report.to_csv()).map_err(runtime)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
