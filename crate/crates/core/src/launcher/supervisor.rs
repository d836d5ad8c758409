//! Client bookkeeping and the pure restart policy.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientState {
    Pending,
    Running,
    /// The server acknowledged a gap-free trajectory.
    Done,
    /// The last attempt exited badly; awaiting a decision.
    Failed,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientStatus {
    pub sim_id: u64,
    pub params: Vec<f64>,
    pub pid: Option<u32>,
    pub state: ClientState,
    /// Last sign of life, in launcher milliseconds. Reset at every spawn.
    pub last_heartbeat_ms: u64,
    pub retries_used: u32,
    pub exit_codes: Vec<Option<i32>>,
}

impl ClientStatus {
    pub fn new(sim_id: u64, params: Vec<f64>) -> Self {
        Self {
            sim_id,
            params,
            pid: None,
            state: ClientState::Pending,
            last_heartbeat_ms: 0,
            retries_used: 0,
            exit_codes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Kill the client if it is still running, then start it again with the
    /// same sim id and λ.
    Restart(u64),
    /// Kill the client if it is still running and give up on the sim.
    Abandon(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Policy {
    pub heartbeat_timeout_ms: u64,
    pub max_retries: u32,
}

impl Default for Policy {
    fn default() -> Self {
        Self {
            heartbeat_timeout_ms: 10_000,
            max_retries: 3,
        }
    }
}

/// Decides what to do about silent running clients and failed ones.
pub fn monitor_tick(now_ms: u64, statuses: &[ClientStatus], policy: &Policy) -> Vec<Action> {
    statuses
        .iter()
        .filter(|s| match s.state {
            ClientState::Failed => true,
            ClientState::Running => now_ms.saturating_sub(s.last_heartbeat_ms) > policy.heartbeat_timeout_ms,
            _ => false,
        })
        .map(|s| {
            if s.retries_used < policy.max_retries {
                Action::Restart(s.sim_id)
            } else {
                Action::Abandon(s.sim_id)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn running(sim: u64, hb: u64, retries: u32) -> ClientStatus {
        ClientStatus {
            state: ClientState::Running,
            last_heartbeat_ms: hb,
            retries_used: retries,
            ..ClientStatus::new(sim, vec![])
        }
    }

    #[test]
    fn fresh_heartbeats_need_nothing() {
        let p = Policy::default();
        let s = vec![running(1, 9_000, 0), running(2, 5_000, 3)];
        assert!(monitor_tick(10_000, &s, &p).is_empty());
    }

    #[test]
    fn silent_client_is_restarted() {
        let p = Policy::default();
        let s = vec![running(1, 0, 0), running(2, 19_000, 0)];
        assert_eq!(monitor_tick(20_000, &s, &p), vec![Action::Restart(1)]);
    }

    #[test]
    fn exhausted_retries_abandon() {
        let p = Policy::default();
        let s = vec![running(4, 0, 3)];
        assert_eq!(monitor_tick(20_000, &s, &p), vec![Action::Abandon(4)]);
        let mut f = ClientStatus::new(5, vec![]);
        f.state = ClientState::Failed;
        f.retries_used = 2;
        assert_eq!(monitor_tick(0, &[f.clone()], &p), vec![Action::Restart(5)]);
        f.retries_used = 3;
        assert_eq!(monitor_tick(0, &[f], &p), vec![Action::Abandon(5)]);
    }

    #[test]
    fn finished_clients_are_left_alone() {
        let p = Policy::default();
        let mut d = running(1, 0, 0);
        d.state = ClientState::Done;
        let mut a = running(2, 0, 3);
        a.state = ClientState::Abandoned;
        assert!(monitor_tick(1_000_000, &[d, a], &p).is_empty());
    }
}
