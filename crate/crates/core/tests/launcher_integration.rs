mod common;

use std::collections::BTreeMap;
use std::io::{self, Read};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use common::*;
use olts::launcher::{
    self, ClientState, ExitState, JobHandle, JobSpec, LaunchOptions, LocalProcess, Role, RunReport,
    SchedulerBackend,
};
use olts::server::{checkpoint_name, REPORT_NAME};

/// Wraps [`LocalProcess`], counting client jobs that have not been seen to
/// exit and remembering every client command line.
#[derive(Default)]
struct Watching {
    live: Vec<Arc<AtomicBool>>,
    max_live: usize,
    spawns: Arc<Mutex<Vec<(u64, Vec<String>)>>>,
}

struct Watched {
    inner: Box<dyn JobHandle>,
    exited: Arc<AtomicBool>,
}

impl JobHandle for Watched {
    fn id(&self) -> u32 {
        self.inner.id()
    }
    fn try_wait(&mut self) -> io::Result<Option<ExitState>> {
        let r = self.inner.try_wait()?;
        if r.is_some() {
            self.exited.store(true, Ordering::Release);
        }
        Ok(r)
    }
    fn kill(&mut self) -> io::Result<()> {
        self.inner.kill()
    }
    fn take_stdout(&mut self) -> Option<Box<dyn Read + Send>> {
        self.inner.take_stdout()
    }
}

impl SchedulerBackend for Watching {
    fn spawn(&mut self, spec: &JobSpec) -> io::Result<Box<dyn JobHandle>> {
        let inner = LocalProcess.spawn(spec)?;
        if spec.role == Role::Server {
            return Ok(inner);
        }
        self.live.retain(|e| !e.load(Ordering::Acquire));
        let exited = Arc::new(AtomicBool::new(false));
        self.live.push(Arc::clone(&exited));
        self.max_live = self.max_live.max(self.live.len());
        self.spawns
            .lock()
            .unwrap()
            .push((spec.sim_id.unwrap(), spec.args.clone()));
        Ok(Box::new(Watched { inner, exited }))
    }
}

fn run(cfg: &olts::harness::RunConfig, out: &Path) -> (RunReport, Watching) {
    let mut backend = Watching::default();
    let opts = LaunchOptions {
        program: olts_bin(),
        out_dir: out.to_path_buf(),
    };
    let report = launcher::launch(cfg, &opts, &mut backend).unwrap();
    (report, backend)
}

fn server_field(r: &RunReport, key: &str) -> u64 {
    r.server.as_ref().unwrap()[key].as_u64().unwrap()
}

#[test]
fn never_more_than_concurrency_clients() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = launch_cfg(dir.path(), 6, 3);
    let (r, b) = run(&cfg, dir.path());
    assert!(b.max_live <= 3, "{} live clients", b.max_live);
    assert!(r.peak_running <= 3);
    assert_eq!(r.done, 6);
    assert_eq!(r.launched, r.done + r.abandoned);
    assert_eq!(r.server_exit, Some(0));
    let sims: Vec<u64> = r.clients.iter().map(|c| c.sim_id).collect();
    assert_eq!(sims, (0..6).collect::<Vec<_>>());
    assert!(dir.path().join("run_report.json").exists());
}

#[test]
fn killed_client_restarts_with_the_same_sim_and_params() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = launch_cfg(dir.path(), 4, 2);
    cfg.faults.kill_clients = 1;
    cfg.faults.seed = 5;
    let (r, b) = run(&cfg, dir.path());
    assert_eq!(r.kills_injected, 1);
    assert_eq!(r.restarted, 1);
    assert_eq!(r.done, 4);

    let spawns = b.spawns.lock().unwrap().clone();
    let mut by_sim: BTreeMap<u64, Vec<Vec<String>>> = BTreeMap::new();
    for (sim, args) in spawns {
        by_sim.entry(sim).or_default().push(args);
    }
    let restarted: Vec<_> = by_sim.iter().filter(|(_, a)| a.len() == 2).collect();
    assert_eq!(restarted.len(), 1);
    let (_, attempts) = restarted[0];
    assert_eq!(attempts[0], attempts[1], "restart must reuse sim id, λ and seed");

    assert_eq!(server_field(&r, "gaps"), 0);
    assert!(server_field(&r, "duplicates_dropped") > 0);
    assert_eq!(r.server.as_ref().unwrap()["completed_sims"].as_array().unwrap().len(), 4);
}

#[test]
fn always_failing_client_is_abandoned() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = launch_cfg(dir.path(), 3, 3);
    cfg.launcher.max_retries = 1;
    cfg.launcher.step_delay_us = 0;
    cfg.faults.fail_always = vec![2];
    let (r, _) = run(&cfg, dir.path());
    assert_eq!(r.abandoned, 1);
    assert_eq!(r.done, 2);
    assert_eq!(r.launched, r.done + r.abandoned);
    let c = r.clients.iter().find(|c| c.sim_id == 2).unwrap();
    assert_eq!(c.state, ClientState::Abandoned);
    assert_eq!(c.retries_used, cfg.launcher.max_retries);
    assert_eq!(c.exit_codes.len(), 2);
    assert!(c.exit_codes.iter().all(|e| *e == Some(3)));
}

#[test]
fn server_checkpoints_after_the_launcher_dies() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = launch_cfg(dir.path(), 50, 2);
    cfg.launcher.step_delay_us = 500;
    let config = dir.path().join("in.toml");
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let out = dir.path().join("out");
    let mut launcher = Command::new(olts_bin())
        .args(["launch", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    // Let the server come up and the first clients start streaming.
    assert!(wait_until(Duration::from_secs(30), || out.join("run.toml").exists()));
    std::thread::sleep(Duration::from_millis(1500));
    launcher.kill().unwrap();
    launcher.wait().unwrap();

    let t0 = Instant::now();
    let done = wait_until(Duration::from_secs(60), || {
        out.join(REPORT_NAME).exists() && out.join(checkpoint_name(0)).exists()
    });
    assert!(done, "no checkpoint {:?} after the launcher died", t0.elapsed());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(REPORT_NAME)).unwrap()).unwrap();
    assert_eq!(report["stop_reason"], "launcher_lost");
    // The clients that were running finished their trajectories.
    assert!(!report["completed_sims"].as_array().unwrap().is_empty());
}
