//! Instrumentation API for solvers: connect, announce, stream timesteps,
//! finalize.
//!
//! ```no_run
//! use olts::client_api::ClientSession;
//! use olts::sampler::ParamVector;
//!
//! let params = ParamVector::unnamed(vec![28.0]);
//! let mut s = ClientSession::connect("127.0.0.1:7000", 1, params, vec![3])?;
//! s.send_timestep(0, &[1.0, 1.0, 1.0])?;
//! s.finalize()?;
//! # Ok::<(), olts::client_api::ClientError>(())
//! ```

use std::io::{self, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::sampler::ParamVector;
use crate::wire::{self, WireMessage, EMPTY_TRAJECTORY};

/// Environment variable that overrides the server endpoint for clients.
pub const SERVER_ENV: &str = "OLTS_SERVER";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("could not connect to {endpoint} after {attempts} attempts: {source}")]
    ConnectionRefused {
        endpoint: String,
        attempts: u32,
        source: io::Error,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("session is closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
}

#[derive(Debug, Clone)]
pub struct ConnectOptions {
    pub attempts: u32,
    /// First retry delay; doubles after every failed attempt.
    pub backoff_base: Duration,
    /// `None` disables the heartbeat timer.
    pub heartbeat: Option<Duration>,
    pub client_id: u64,
}

impl Default for ConnectOptions {
    fn default() -> Self {
        Self {
            attempts: 5,
            backoff_base: Duration::from_millis(100),
            heartbeat: Some(Duration::from_secs(1)),
            client_id: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Connected,
    Closed,
}

/// Resolves the endpoint: `OLTS_SERVER` wins over `fallback`.
pub fn server_endpoint(fallback: &str) -> String {
    std::env::var(SERVER_ENV)
        .ok()
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| fallback.to_string())
}

/// Connects with exponential backoff: after failed attempt `k` (from 0) the
/// client sleeps `base · 2^k` before the next one.
pub fn connect_with_backoff(endpoint: &str, attempts: u32, base: Duration) -> Result<TcpStream, ClientError> {
    let attempts = attempts.max(1);
    let mut last = None;
    for k in 0..attempts {
        match endpoint.to_socket_addrs().and_then(|mut addrs| {
            addrs
                .next()
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "endpoint resolves to nothing"))
                .and_then(TcpStream::connect)
        }) {
            Ok(s) => return Ok(s),
            Err(e) => {
                log::debug!("connect attempt {} to {endpoint} failed: {e}", k + 1);
                last = Some(e);
                thread::sleep(base * 2u32.saturating_pow(k));
            }
        }
    }
    Err(ClientError::ConnectionRefused {
        endpoint: endpoint.to_string(),
        attempts,
        source: last.expect("at least one attempt"),
    })
}

fn wallclock_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct Heartbeat {
    stop: Sender<()>,
    handle: JoinHandle<()>,
}

/// One simulation's stream to the server. Not meant for concurrent sends;
/// the heartbeat timer shares the socket through an internal lock.
pub struct ClientSession {
    sim_id: u64,
    params: ParamVector,
    field_shape: Vec<u32>,
    field_len: usize,
    stream: Arc<Mutex<TcpStream>>,
    frame: Vec<u8>,
    sent_count: u32,
    state: SessionState,
    heartbeat: Option<Heartbeat>,
}

impl ClientSession {
    pub fn connect(
        endpoint: &str,
        sim_id: u64,
        params: ParamVector,
        field_shape: Vec<u32>,
    ) -> Result<Self, ClientError> {
        Self::connect_with(endpoint, sim_id, params, field_shape, &ConnectOptions::default())
    }

    pub fn connect_with(
        endpoint: &str,
        sim_id: u64,
        params: ParamVector,
        field_shape: Vec<u32>,
        opts: &ConnectOptions,
    ) -> Result<Self, ClientError> {
        let field_len = field_shape.iter().map(|&d| d as usize).product();
        if field_shape.is_empty() || field_len == 0 {
            return Err(ClientError::Contract("field shape must be nonempty with no zero extent".into()));
        }
        let mut stream = connect_with_backoff(endpoint, opts.attempts, opts.backoff_base)?;
        stream.set_nodelay(true)?;
        let hello = WireMessage::Hello {
            client_id: opts.client_id,
            sim_id,
            params: params.values().to_vec(),
            field_shape: field_shape.clone(),
        };
        wire::write_message(&mut stream, &hello)?;
        let stream = Arc::new(Mutex::new(stream));
        let heartbeat = opts.heartbeat.map(|period| {
            let (stop, rx) = mpsc::channel::<()>();
            let shared = Arc::clone(&stream);
            let handle = thread::Builder::new()
                .name(format!("heartbeat-{sim_id}"))
                .spawn(move || loop {
                    match rx.recv_timeout(period) {
                        Err(RecvTimeoutError::Timeout) => {
                            let msg = WireMessage::Heartbeat {
                                sender_id: sim_id,
                                wallclock_ms: wallclock_ms(),
                            };
                            let mut s = shared.lock().unwrap_or_else(|p| p.into_inner());
                            if wire::write_message(&mut *s, &msg).is_err() {
                                return;
                            }
                        }
                        _ => return,
                    }
                })
                .expect("spawn heartbeat thread");
            Heartbeat { stop, handle }
        });
        Ok(Self {
            sim_id,
            params,
            field_shape,
            field_len,
            stream,
            frame: Vec::new(),
            sent_count: 0,
            state: SessionState::Connected,
            heartbeat,
        })
    }

    pub fn sim_id(&self) -> u64 {
        self.sim_id
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn field_shape(&self) -> &[u32] {
        &self.field_shape
    }

    pub fn sent_count(&self) -> u32 {
        self.sent_count
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    /// Sends `u_t`. `t_index` must equal the number of timesteps already
    /// sent. Blocks while the transport is full.
    pub fn send_timestep(&mut self, t_index: u32, field: &[f64]) -> Result<(), ClientError> {
        if self.state == SessionState::Closed {
            return Err(ClientError::Closed);
        }
        if field.len() != self.field_len {
            return Err(ClientError::Contract(format!(
                "field has {} values, shape {:?} needs {}",
                field.len(),
                self.field_shape,
                self.field_len
            )));
        }
        if t_index != self.sent_count {
            return Err(ClientError::Contract(format!(
                "t_index {t_index} out of order, expected {}",
                self.sent_count
            )));
        }
        self.frame.clear();
        wire::encode_timestep_into(self.sim_id, t_index, field, &mut self.frame)?;
        let mut s = self.stream.lock().unwrap_or_else(|p| p.into_inner());
        s.write_all(&self.frame)?;
        drop(s);
        self.sent_count += 1;
        Ok(())
    }

    /// Sends `Bye{last_t}` and closes the stream. A second call is a no-op.
    pub fn finalize(&mut self) -> Result<(), ClientError> {
        if self.state == SessionState::Closed {
            return Ok(());
        }
        self.state = SessionState::Closed;
        self.stop_heartbeat();
        let last_t = self.sent_count.checked_sub(1).unwrap_or(EMPTY_TRAJECTORY);
        let mut s = self.stream.lock().unwrap_or_else(|p| p.into_inner());
        wire::write_message(
            &mut *s,
            &WireMessage::Bye {
                sim_id: self.sim_id,
                last_t,
            },
        )?;
        s.flush()?;
        s.shutdown(Shutdown::Write).or_else(|e| {
            if e.kind() == io::ErrorKind::NotConnected {
                Ok(())
            } else {
                Err(e)
            }
        })?;
        Ok(())
    }

    fn stop_heartbeat(&mut self) {
        if let Some(hb) = self.heartbeat.take() {
            let _ = hb.stop.send(());
            let _ = hb.handle.join();
        }
    }
}

impl Drop for ClientSession {
    /// Dropping without [`finalize`](Self::finalize) closes the socket
    /// without a `Bye`, which the server treats as an incomplete trajectory.
    fn drop(&mut self) {
        self.stop_heartbeat();
        if self.state == SessionState::Connected {
            let s = self.stream.lock().unwrap_or_else(|p| p.into_inner());
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}
