//! Where jobs run. [`LocalProcess`] spawns OS processes; a batch-scheduler
//! backend would implement the same trait.

use std::io::{self, Read};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Server,
    Client,
}

#[derive(Debug, Clone)]
pub struct JobSpec {
    pub role: Role,
    pub program: PathBuf,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
    pub sim_id: Option<u64>,
    /// Capture standard output (the server announces its ports there).
    pub capture_stdout: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitState {
    Success,
    Code(i32),
    /// Killed by a signal, or no code available.
    Signaled,
}

impl ExitState {
    pub fn code(self) -> Option<i32> {
        match self {
            Self::Success => Some(0),
            Self::Code(c) => Some(c),
            Self::Signaled => None,
        }
    }
}

pub trait JobHandle: Send {
    fn id(&self) -> u32;
    /// Non-blocking exit check.
    fn try_wait(&mut self) -> io::Result<Option<ExitState>>;
    fn kill(&mut self) -> io::Result<()>;
    fn take_stdout(&mut self) -> Option<Box<dyn Read + Send>>;
}

pub trait SchedulerBackend {
    fn spawn(&mut self, spec: &JobSpec) -> io::Result<Box<dyn JobHandle>>;
}

/// Runs every job as a child process of the launcher. Children are not tied
/// to the launcher's lifetime: if it dies they run on.
#[derive(Debug, Default)]
pub struct LocalProcess;

struct LocalJob {
    child: Child,
}

impl JobHandle for LocalJob {
    fn id(&self) -> u32 {
        self.child.id()
    }

    fn try_wait(&mut self) -> io::Result<Option<ExitState>> {
        Ok(self.child.try_wait()?.map(|s| match s.code() {
            Some(0) => ExitState::Success,
            Some(c) => ExitState::Code(c),
            None => ExitState::Signaled,
        }))
    }

    fn kill(&mut self) -> io::Result<()> {
        match self.child.kill() {
            Err(e) if e.kind() == io::ErrorKind::InvalidInput => Ok(()),
            other => other,
        }
    }

    fn take_stdout(&mut self) -> Option<Box<dyn Read + Send>> {
        self.child.stdout.take().map(|s| Box::new(s) as Box<dyn Read + Send>)
    }
}

impl SchedulerBackend for LocalProcess {
    fn spawn(&mut self, spec: &JobSpec) -> io::Result<Box<dyn JobHandle>> {
        let mut cmd = Command::new(&spec.program);
        cmd.args(&spec.args)
            .envs(spec.env.iter().map(|(k, v)| (k, v)))
            .stdin(Stdio::null())
            .stdout(if spec.capture_stdout { Stdio::piped() } else { Stdio::null() })
            .stderr(Stdio::inherit());
        Ok(Box::new(LocalJob { child: cmd.spawn()? }))
    }
}
