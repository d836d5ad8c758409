//! Orchestration: starts the server, obtains λ assignments over the control
//! channel, runs at most `concurrency` clients at a time, restarts failed or
//! silent ones with the same sim id and λ, and finally asks the server to
//! drain and stop.

pub mod backend;
pub mod control;
pub mod supervisor;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use backend::{ExitState, JobHandle, JobSpec, LocalProcess, Role, SchedulerBackend};
pub use control::{ControlEvent, ControlLink};
pub use supervisor::{monitor_tick, Action, ClientState, ClientStatus, Policy};

use crate::client_api::SERVER_ENV;
use crate::harness::{sim_seed, RunConfig};
use crate::server::REPORT_NAME;

pub const RUN_REPORT_NAME: &str = "run_report.json";
/// Effective configuration handed to the server process.
pub const RUN_CONFIG_NAME: &str = "run.toml";

const CONTROL_TIMEOUT: Duration = Duration::from_secs(30);
/// How long a client that exited cleanly may wait for its `Bye` relay.
const BYE_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("server not ready: {0}")]
    ServerNotReady(String),
    #[error("cannot start {what}: {source}")]
    Spawn { what: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct LaunchOptions {
    /// The `olts` executable used for server and client jobs.
    pub program: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    /// Distinct sims started at least once.
    pub launched: u64,
    pub restarted: u64,
    pub abandoned: u64,
    pub done: u64,
    pub kills_injected: u64,
    /// Most clients seen running at once.
    pub peak_running: u32,
    pub wall_time_s: f64,
    pub server_exit: Option<i32>,
    pub clients: Vec<ClientStatus>,
    /// The server's own report, if it wrote one.
    pub server: Option<serde_json::Value>,
}

struct Slot {
    status: ClientStatus,
    handle: Option<Box<dyn JobHandle>>,
    exited_at: Option<Instant>,
    completed: bool,
    kill_at: Option<Instant>,
}

/// Parses the `READY data=<addr> ctrl=<addr>` line the server prints.
pub fn parse_ready_line(line: &str) -> Option<(String, String)> {
    let rest = line.trim().strip_prefix("READY ")?;
    let mut data = None;
    let mut ctrl = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("data=") {
            data = Some(v.to_string());
        } else if let Some(v) = part.strip_prefix("ctrl=") {
            ctrl = Some(v.to_string());
        }
    }
    Some((data?, ctrl?))
}

fn wait_ready(server: &mut dyn JobHandle, timeout: Duration) -> Result<(String, String), LaunchError> {
    let out = server
        .take_stdout()
        .ok_or_else(|| LaunchError::ServerNotReady("server stdout not captured".into()))?;
    let (tx, rx) = mpsc::channel();
    thread::Builder::new().name("server-stdout".into()).spawn(move || {
        let mut sent = false;
        for line in BufReader::new(out).lines() {
            let Ok(line) = line else { break };
            if !sent {
                if let Some(addrs) = parse_ready_line(&line) {
                    let _ = tx.send(addrs);
                    sent = true;
                    continue;
                }
            }
            log::info!("server: {line}");
        }
    })?;
    let deadline = Instant::now() + timeout;
    loop {
        match rx.recv_timeout(Duration::from_millis(50)) {
            Ok(addrs) => return Ok(addrs),
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return Err(LaunchError::ServerNotReady("server closed its output before READY".into()))
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
        }
        if let Some(s) = server.try_wait()? {
            return Err(LaunchError::ServerNotReady(format!("server exited early ({s:?})")));
        }
        if Instant::now() >= deadline {
            return Err(LaunchError::ServerNotReady(format!("no READY line within {timeout:?}")));
        }
    }
}

fn client_args(cfg: &RunConfig, status: &ClientStatus, data: &str, fail: bool) -> Vec<String> {
    let names = cfg.param_space.iter().map(|e| e.name.as_str());
    let params: Vec<String> = names.zip(&status.params).map(|(n, v)| format!("{n}={v:?}")).collect();
    let mut args = vec![
        "client".to_string(),
        "--kind".into(),
        cfg.solver.kind.to_string(),
        "--sim-id".into(),
        status.sim_id.to_string(),
        "--params".into(),
        params.join(","),
        "--solver".into(),
        cfg.solver.to_kv_string(),
        "--server".into(),
        data.into(),
        "--seed".into(),
        sim_seed(cfg.seeds.master, status.sim_id).to_string(),
        "--heartbeat-ms".into(),
        cfg.launcher.client_heartbeat_ms.to_string(),
        "--step-delay-us".into(),
        cfg.launcher.step_delay_us.to_string(),
    ];
    if fail {
        args.push("--fail-at-step".into());
        args.push((cfg.solver.n_steps() / 2).to_string());
    }
    args
}

/// Runs a whole ensemble and writes `run_report.json` to `opts.out_dir`.
pub fn launch(
    cfg: &RunConfig,
    opts: &LaunchOptions,
    backend: &mut dyn SchedulerBackend,
) -> Result<RunReport, LaunchError> {
    let started = Instant::now();
    std::fs::create_dir_all(&opts.out_dir)?;
    let config_path = opts.out_dir.join(RUN_CONFIG_NAME);
    std::fs::write(&config_path, cfg.to_toml())?;

    let server_spec = JobSpec {
        role: Role::Server,
        program: opts.program.clone(),
        args: vec![
            "server".into(),
            "--config".into(),
            config_path.display().to_string(),
            "--out".into(),
            opts.out_dir.display().to_string(),
            "--data-port".into(),
            cfg.server.data_port.to_string(),
            "--ctrl-port".into(),
            cfg.server.ctrl_port.to_string(),
        ],
        env: vec![],
        sim_id: None,
        capture_stdout: true,
    };
    let mut server = backend.spawn(&server_spec).map_err(|source| LaunchError::Spawn {
        what: "server".into(),
        source,
    })?;
    let (data, ctrl_addr) = match wait_ready(server.as_mut(), Duration::from_millis(cfg.launcher.ready_timeout_ms)) {
        Ok(a) => a,
        Err(e) => {
            let _ = server.kill();
            return Err(e);
        }
    };
    log::info!("server ready: data {data}, control {ctrl_addr}");
    let mut ctrl = ControlLink::connect(&ctrl_addr)?;

    let mut fault_rng = ChaCha8Rng::seed_from_u64(cfg.faults.seed);
    let to_kill: BTreeSet<u64> = (0..cfg.ensemble_size)
        .choose_multiple(&mut fault_rng, cfg.faults.kill_clients as usize)
        .into_iter()
        .collect();
    let fail_always: BTreeSet<u64> = cfg.faults.fail_always.iter().copied().collect();
    let policy = Policy {
        heartbeat_timeout_ms: cfg.launcher.heartbeat_timeout_ms,
        max_retries: cfg.launcher.max_retries,
    };
    let now_ms = || started.elapsed().as_millis() as u64;
    let tick = Duration::from_millis(cfg.launcher.tick_ms.clamp(1, 50));

    let mut slots: BTreeMap<u64, Slot> = BTreeMap::new();
    let mut queue: VecDeque<u64> = VecDeque::new();
    let mut exhausted = false;
    let mut restarted = 0;
    let mut kills = 0;
    let mut killed: BTreeSet<u64> = BTreeSet::new();
    let mut peak = 0u32;

    loop {
        // Events from the server.
        let mut wait = tick;
        while let Some(ev) = ctrl.poll_event(wait) {
            wait = Duration::ZERO;
            match ev {
                ControlEvent::Alive { sim_id } => {
                    if let Some(s) = slots.get_mut(&sim_id) {
                        s.status.last_heartbeat_ms = now_ms();
                        if s.kill_at.is_none()
                            && s.status.state == ClientState::Running
                            && to_kill.contains(&sim_id)
                            && !killed.contains(&sim_id)
                        {
                            let d = fault_rng.random_range(cfg.faults.kill_delay_min_ms..=cfg.faults.kill_delay_max_ms);
                            s.kill_at = Some(Instant::now() + Duration::from_millis(d));
                        }
                    }
                }
                ControlEvent::Completed { sim_id, .. } => {
                    if let Some(s) = slots.get_mut(&sim_id) {
                        s.completed = true;
                        s.status.last_heartbeat_ms = now_ms();
                    }
                }
            }
        }

        // Injected faults and process exits.
        for (sim_id, s) in slots.iter_mut() {
            if s.status.state != ClientState::Running {
                continue;
            }
            if let Some(at) = s.kill_at {
                if Instant::now() >= at && s.exited_at.is_none() && !killed.contains(sim_id) {
                    if let Some(h) = s.handle.as_mut() {
                        log::info!("fault injection: killing sim {sim_id}");
                        let _ = h.kill();
                        killed.insert(*sim_id);
                        kills += 1;
                    }
                }
            }
            if s.exited_at.is_none() {
                if let Some(h) = s.handle.as_mut() {
                    if let Some(exit) = h.try_wait()? {
                        s.status.exit_codes.push(exit.code());
                        s.exited_at = Some(Instant::now());
                        s.handle = None;
                        if exit != ExitState::Success {
                            log::warn!("sim {sim_id} exited with {exit:?}");
                            s.status.state = ClientState::Failed;
                            s.completed = false;
                            continue;
                        }
                    }
                }
            }
            if let Some(t) = s.exited_at {
                if s.completed {
                    s.status.state = ClientState::Done;
                    s.status.pid = None;
                } else if t.elapsed() > BYE_GRACE {
                    log::warn!("sim {sim_id} exited cleanly but the server saw no complete trajectory");
                    s.status.state = ClientState::Failed;
                }
            }
        }

        // Restart policy.
        let statuses: Vec<ClientStatus> = slots.values().map(|s| s.status.clone()).collect();
        for action in monitor_tick(now_ms(), &statuses, &policy) {
            let (Action::Restart(id) | Action::Abandon(id)) = action;
            let s = slots.get_mut(&id).expect("known sim");
            if let Some(mut h) = s.handle.take() {
                let _ = h.kill();
                let _ = h.try_wait();
            }
            s.status.pid = None;
            match action {
                Action::Restart(_) => {
                    s.status.retries_used += 1;
                    s.status.state = ClientState::Pending;
                    restarted += 1;
                    queue.push_front(id);
                }
                Action::Abandon(_) => {
                    log::error!("sim {id}: giving up after {} retries", s.status.retries_used);
                    s.status.state = ClientState::Abandoned;
                }
            }
        }

        // Fill free client slots.
        let running = |slots: &BTreeMap<u64, Slot>| {
            slots.values().filter(|s| s.status.state == ClientState::Running).count() as u32
        };
        let mut n_running = running(&slots);
        while n_running < cfg.concurrency {
            if queue.is_empty() && !exhausted {
                let want = cfg.concurrency - n_running;
                let got = ctrl.request_params(want, CONTROL_TIMEOUT)?;
                if (got.len() as u32) < want {
                    exhausted = true;
                }
                for (sim_id, params) in got {
                    slots.insert(
                        sim_id,
                        Slot {
                            status: ClientStatus::new(sim_id, params),
                            handle: None,
                            exited_at: None,
                            completed: false,
                            kill_at: None,
                        },
                    );
                    queue.push_back(sim_id);
                }
            }
            let Some(id) = queue.pop_front() else { break };
            let s = slots.get_mut(&id).expect("queued sim is known");
            let spec = JobSpec {
                role: Role::Client,
                program: opts.program.clone(),
                args: client_args(cfg, &s.status, &data, fail_always.contains(&id)),
                env: vec![(SERVER_ENV.into(), data.clone())],
                sim_id: Some(id),
                capture_stdout: false,
            };
            s.exited_at = None;
            s.completed = false;
            s.kill_at = None;
            s.status.last_heartbeat_ms = now_ms();
            match backend.spawn(&spec) {
                Ok(h) => {
                    s.status.pid = Some(h.id());
                    s.status.state = ClientState::Running;
                    s.handle = Some(h);
                }
                Err(e) => {
                    log::error!("cannot spawn client for sim {id}: {e}");
                    s.status.exit_codes.push(None);
                    s.status.state = ClientState::Failed;
                }
            }
            n_running = running(&slots);
        }
        peak = peak.max(n_running);

        let settled = slots
            .values()
            .all(|s| matches!(s.status.state, ClientState::Done | ClientState::Abandoned));
        if exhausted && queue.is_empty() && settled {
            break;
        }
        if ctrl.is_closed() {
            log::error!("control channel closed by the server");
            break;
        }
    }

    if let Err(e) = ctrl.shutdown(CONTROL_TIMEOUT) {
        log::debug!("shutdown not acknowledged ({e}); the server may already be stopping");
    }
    let grace = Instant::now() + Duration::from_millis(cfg.launcher.server_grace_ms);
    let server_exit = loop {
        if let Some(s) = server.try_wait()? {
            break s.code();
        }
        if Instant::now() >= grace {
            log::error!("server did not stop within the grace period; killing it");
            let _ = server.kill();
            break None;
        }
        thread::sleep(Duration::from_millis(20));
    };
    drop(ctrl);
    for s in slots.values_mut() {
        if let Some(mut h) = s.handle.take() {
            let _ = h.kill();
        }
    }

    let server_report = std::fs::read(opts.out_dir.join(REPORT_NAME))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let clients: Vec<ClientStatus> = slots.into_values().map(|s| s.status).collect();
    let report = RunReport {
        launched: clients.len() as u64,
        restarted,
        abandoned: clients.iter().filter(|c| c.state == ClientState::Abandoned).count() as u64,
        done: clients.iter().filter(|c| c.state == ClientState::Done).count() as u64,
        kills_injected: kills,
        peak_running: peak,
        wall_time_s: started.elapsed().as_secs_f64(),
        server_exit,
        clients,
        server: server_report,
    };
    write_report(&opts.out_dir, &report)?;
    Ok(report)
}

fn write_report(dir: &Path, report: &RunReport) -> io::Result<()> {
    let json = serde_json::to_vec_pretty(report).expect("report serializes");
    std::fs::write(dir.join(RUN_REPORT_NAME), json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ready_line() {
        assert_eq!(
            parse_ready_line("READY data=127.0.0.1:4000 ctrl=127.0.0.1:4001\n"),
            Some(("127.0.0.1:4000".into(), "127.0.0.1:4001".into()))
        );
        assert_eq!(parse_ready_line("READY data=x"), None);
        assert_eq!(parse_ready_line("hello"), None);
    }
}
