//! Platform abstraction shared by the simulated cluster and real deployment:
//! a clock, blocking primitives, and a typed client for the QoS wire
//! protocol. Middleware, ports, and application code are written against
//! these traits only.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::qos::data::TaskPid;
use crate::qos::wire::{self, Opcode};

/// A blocked operation was interrupted because the surrounding task was
/// killed (simulation fault injection) or the runtime is shutting down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interrupt;

/// Condition handle usable from both runtimes: a condvar/epoch pair for real
/// threads and a waiter list the simulator turns into actor wake-ups.
#[derive(Default)]
pub struct NotifyCell {
    epoch: Mutex<u64>,
    cv: Condvar,
    sim_waiters: Mutex<Vec<usize>>,
}

impl NotifyCell {
    pub fn new() -> Self {
        NotifyCell::default()
    }

    pub(crate) fn real_wait(&self, deadline: Option<Instant>) -> bool {
        let guard = self.epoch.lock().unwrap();
        let seen = *guard;
        match deadline {
            None => {
                let _g = self
                    .cv
                    .wait_while(guard, |now| *now == seen)
                    .unwrap();
                true
            }
            Some(deadline) => {
                let now = Instant::now();
                if deadline <= now {
                    return false;
                }
                let (_g, res) = self
                    .cv
                    .wait_timeout_while(guard, deadline - now, |now| *now == seen)
                    .unwrap();
                !res.timed_out()
            }
        }
    }

    pub(crate) fn real_notify(&self) {
        *self.epoch.lock().unwrap() += 1;
        self.cv.notify_all();
    }

    pub(crate) fn add_sim_waiter(&self, actor: usize) {
        let mut w = self.sim_waiters.lock().unwrap();
        if !w.contains(&actor) {
            w.push(actor);
        }
    }

    pub(crate) fn take_sim_waiters(&self) -> Vec<usize> {
        std::mem::take(&mut *self.sim_waiters.lock().unwrap())
    }
}

/// Clock, sleep, and condition waiting for one deployment (simulated or
/// real). `charge_compute` and `checkpoint` model CPU cost / fault-injection
/// hooks in simulation and are no-ops on real hosts.
pub trait Runtime: Send + Sync {
    fn now_ms(&self) -> f64;

    fn sleep_ms(&self, ms: f64) -> Result<(), Interrupt>;

    /// Blocks until `pred` holds (checked under each notification of `cell`)
    /// or the optional absolute deadline passes. Returns whether `pred` held.
    fn wait_on(
        &self,
        cell: &NotifyCell,
        deadline_ms: Option<f64>,
        pred: &mut dyn FnMut() -> bool,
    ) -> Result<bool, Interrupt>;

    fn notify(&self, cell: &NotifyCell);

    /// Consumes modeled CPU work (arbitrary units scaled by machine speed and
    /// contention) on a machine. Real runtime: the real computation already
    /// took real time, so this is a no-op.
    fn charge_compute(&self, _machine_rank: usize, _work_units: f64) -> Result<(), Interrupt> {
        Ok(())
    }

    /// Named progress marker for scripted fault injection.
    fn checkpoint(&self, _name: &str) -> Result<(), Interrupt> {
        Ok(())
    }

    /// Models the CPU cost of a monitoring cycle as a transient extra
    /// runnable process on the machine. Real runtime: the cycle's own work
    /// is the cost, so this is a no-op.
    fn add_load_burst(&self, _machine_rank: usize, _duration_ms: f64) {}
}

/// Serves one wire-protocol request; shared by the simulated network and the
/// TCP server.
pub trait WireHandler: Send + Sync {
    fn handle(&self, op: Opcode, payload: &[u8]) -> (Opcode, Vec<u8>);
}

/// Wall-clock runtime for real deployments.
pub struct RealRuntime {
    origin: Instant,
}

impl RealRuntime {
    pub fn new() -> Self {
        RealRuntime { origin: Instant::now() }
    }
}

impl Default for RealRuntime {
    fn default() -> Self {
        Self::new()
    }
}

impl Runtime for RealRuntime {
    fn now_ms(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1000.0
    }

    fn sleep_ms(&self, ms: f64) -> Result<(), Interrupt> {
        std::thread::sleep(Duration::from_secs_f64((ms / 1000.0).max(0.0)));
        Ok(())
    }

    fn wait_on(
        &self,
        cell: &NotifyCell,
        deadline_ms: Option<f64>,
        pred: &mut dyn FnMut() -> bool,
    ) -> Result<bool, Interrupt> {
        let deadline = deadline_ms.map(|d| {
            let remaining = (d - self.now_ms()).max(0.0);
            Instant::now() + Duration::from_secs_f64(remaining / 1000.0)
        });
        loop {
            if pred() {
                return Ok(true);
            }
            if !cell.real_wait(deadline) {
                return Ok(pred());
            }
        }
    }

    fn notify(&self, cell: &NotifyCell) {
        cell.real_notify();
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("request timed out")]
    Timeout,
    #[error("peer unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote error: {0}")]
    Remote(String),
}

/// Typed client for the QoS wire protocol, addressed by machine rank.
pub trait WireClient: Send + Sync {
    fn now_ms(&self) -> f64;

    fn request(
        &self,
        machine_rank: usize,
        op: Opcode,
        payload: Vec<u8>,
        timeout_ms: f64,
    ) -> Result<(Opcode, Vec<u8>), WireError>;

    /// One reachability round-trip: true iff the peer answered in time.
    fn ping(&self, machine_rank: usize, timeout_ms: f64) -> bool {
        matches!(
            self.request(machine_rank, Opcode::Ping, Vec::new(), timeout_ms),
            Ok((Opcode::Ping, _))
        )
    }

    fn echo(&self, machine_rank: usize, payload: &[u8], timeout_ms: f64) -> Result<Vec<u8>, WireError> {
        let op = if payload.len() <= 1024 { Opcode::EchoSmall } else { Opcode::EchoBulk };
        match self.request(machine_rank, op, payload.to_vec(), timeout_ms)? {
            (o, body) if o == op => Ok(body),
            (Opcode::Err, body) => Err(WireError::Remote(wire::decode_error(&body))),
            _ => Err(WireError::Protocol("unexpected echo reply".into())),
        }
    }

    fn list_pids(&self, machine_rank: usize) -> Result<Vec<TaskPid>, WireError> {
        match self.request(machine_rank, Opcode::ListPids, Vec::new(), 1000.0)? {
            (Opcode::ListPids, body) => {
                wire::decode_pid_list(&body).map_err(|e| WireError::Protocol(e.to_string()))
            }
            (Opcode::Err, body) => Err(WireError::Remote(wire::decode_error(&body))),
            _ => Err(WireError::Protocol("unexpected reply".into())),
        }
    }
}

/// Why a task body ended.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskError {
    /// Killed or shut down mid-operation.
    Interrupted,
    Failed(String),
}

impl From<Interrupt> for TaskError {
    fn from(_: Interrupt) -> Self {
        TaskError::Interrupted
    }
}

impl From<crate::ports::PortError> for TaskError {
    fn from(e: crate::ports::PortError) -> Self {
        match e {
            crate::ports::PortError::Interrupted => TaskError::Interrupted,
            other => TaskError::Failed(other.to_string()),
        }
    }
}

/// Everything a task body gets from its hosting runtime: its identity, its
/// connected ports (ordered by port index), and its QoS service instance.
pub struct TaskCtx {
    pub task_rank: usize,
    pub machine_rank: usize,
    pub runtime: std::sync::Arc<dyn Runtime>,
    pub ports: Vec<crate::ports::Port>,
    pub qos: crate::qos::service::QosService,
}

/// A task component implementation, selected by the task graph's `impl` id.
pub type TaskBody = Box<dyn FnOnce(&mut TaskCtx) -> Result<(), TaskError> + Send>;

/// Process-unique task instance id source for real deployments.
pub fn next_task_pid() -> TaskPid {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    // Offset by the OS pid so ids differ across machine processes on one host.
    let base = (std::process::id() as u64) << 20;
    TaskPid(base | NEXT.fetch_add(1, Ordering::Relaxed))
}
