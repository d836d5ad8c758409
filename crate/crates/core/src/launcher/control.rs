//! Launcher side of the server control channel.

use std::collections::VecDeque;
use std::io;
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::client_api::connect_with_backoff;
use crate::wire::{self, FrameReader, MsgType, WireMessage};

/// Something the server told the launcher about a simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlEvent {
    /// The sim's client is alive (a `Hello` or a heartbeat reached the server).
    Alive { sim_id: u64 },
    /// The server accepted a gap-free trajectory for the sim.
    Completed { sim_id: u64, last_t: u32 },
}

pub struct ControlLink {
    writer: TcpStream,
    rx: Receiver<WireMessage>,
    reader: Option<JoinHandle<()>>,
    backlog: VecDeque<WireMessage>,
    closed: bool,
}

impl ControlLink {
    pub fn connect(addr: &str) -> io::Result<Self> {
        let stream = connect_with_backoff(addr, 5, Duration::from_millis(100)).map_err(|e| io::Error::other(e.to_string()))?;
        stream.set_nodelay(true)?;
        let read_half = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        let reader = thread::Builder::new()
            .name("ctrl-reader".into())
            .spawn(move || {
                let mut r = FrameReader::new(read_half);
                while let Ok(Some(m)) = r.next_message() {
                    if tx.send(m).is_err() {
                        return;
                    }
                }
            })?;
        Ok(Self {
            writer: stream,
            rx,
            reader: Some(reader),
            backlog: VecDeque::new(),
            closed: false,
        })
    }

    pub fn is_closed(&self) -> bool {
        self.closed && self.backlog.is_empty()
    }

    fn recv(&mut self, timeout: Duration) -> Option<WireMessage> {
        match self.rx.recv_timeout(timeout) {
            Ok(m) => Some(m),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => {
                self.closed = true;
                None
            }
        }
    }

    /// Waits for `Ack{ref}`; everything else received meanwhile is kept for
    /// [`poll_event`](Self::poll_event), except `ParamAssign`s, which are
    /// returned.
    fn await_ack(&mut self, r: MsgType, timeout: Duration) -> io::Result<Vec<(u64, Vec<f64>)>> {
        let deadline = Instant::now() + timeout;
        let mut assigned = Vec::new();
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() || self.closed {
                return Err(io::Error::new(
                    io::ErrorKind::TimedOut,
                    format!("no acknowledgement for {r:?} from the server"),
                ));
            }
            match self.recv(left) {
                Some(WireMessage::Ack { ref_msg_type }) if ref_msg_type == r as u16 => return Ok(assigned),
                Some(WireMessage::ParamAssign { sim_id, params }) => assigned.push((sim_id, params)),
                Some(other) => self.backlog.push_back(other),
                None => {}
            }
        }
    }

    /// Asks the server for up to `count` new parameter assignments.
    pub fn request_params(&mut self, count: u32, timeout: Duration) -> io::Result<Vec<(u64, Vec<f64>)>> {
        wire::write_message(&mut self.writer, &WireMessage::ParamRequest { count })?;
        self.await_ack(MsgType::ParamRequest, timeout)
    }

    /// Asks the server to drain its buffers and stop.
    pub fn shutdown(&mut self, timeout: Duration) -> io::Result<()> {
        wire::write_message(&mut self.writer, &WireMessage::Shutdown)?;
        self.await_ack(MsgType::Shutdown, timeout).map(|_| ())
    }

    /// Next liveness or completion notice, waiting at most `timeout`.
    pub fn poll_event(&mut self, timeout: Duration) -> Option<ControlEvent> {
        let deadline = Instant::now() + timeout;
        loop {
            let msg = match self.backlog.pop_front() {
                Some(m) => m,
                None => self.recv(deadline.saturating_duration_since(Instant::now()))?,
            };
            match msg {
                WireMessage::Heartbeat { sender_id, .. } => return Some(ControlEvent::Alive { sim_id: sender_id }),
                WireMessage::Bye { sim_id, last_t } => return Some(ControlEvent::Completed { sim_id, last_t }),
                other => log::debug!("ignoring {:?} on the control channel", other.msg_type()),
            }
            if Instant::now() >= deadline {
                return None;
            }
        }
    }
}

impl Drop for ControlLink {
    fn drop(&mut self) {
        let _ = self.writer.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}
