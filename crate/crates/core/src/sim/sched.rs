//! Deterministic cooperative scheduler with a virtual clock.
//!
//! Every simulated activity (task body, QoS manager loop) runs on its own OS
//! thread as an *actor*, but exactly one actor executes at a time. Virtual
//! time advances only when no actor is runnable, by draining a timer queue
//! ordered by `(time, sequence)`. Actor hand-off always picks the
//! lowest-numbered ready actor, so a given configuration replays the same
//! interleaving and the same virtual timings every run.
//!
//! Timer entries either wake an actor or run a closure (message delivery,
//! machine-model updates). Closures execute on the thread performing the
//! hand-off, outside the scheduler lock; they may schedule further timers and
//! ready actors but must never block.

use std::collections::{BTreeSet, BinaryHeap};
use std::sync::{Condvar, Mutex};

use crate::runtime::Interrupt;

pub type ActorId = usize;

pub const MS_TO_NS: f64 = 1_000_000.0;

pub fn ms_to_ns(ms: f64) -> u64 {
    (ms * MS_TO_NS).ceil().max(0.0) as u64
}

pub fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / MS_TO_NS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActorState {
    /// Registered; start timer pending.
    Idle,
    Ready,
    Running,
    Blocked,
    Done,
}

enum TimerEvent {
    Wake(ActorId),
    Call(Box<dyn FnOnce() + Send>),
}

struct TimerEntry {
    at_ns: u64,
    seq: u64,
    event: TimerEvent,
}

impl PartialEq for TimerEntry {
    fn eq(&self, other: &Self) -> bool {
        self.at_ns == other.at_ns && self.seq == other.seq
    }
}
impl Eq for TimerEntry {}
impl PartialOrd for TimerEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimerEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first ordering.
        (other.at_ns, other.seq).cmp(&(self.at_ns, self.seq))
    }
}

struct ActorSlot {
    name: String,
    state: ActorState,
    killed: bool,
    /// A wake arrived while the actor was running; its next block returns
    /// immediately instead of parking.
    pending_wake: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    /// No actor is runnable and no timer remains: blocked actors can never
    /// make progress.
    Deadlock(String),
    /// An actor panicked (not a scripted kill).
    Panicked(String),
    /// The virtual clock passed the configured cap.
    TimeCapExceeded(f64),
}

impl std::fmt::Display for SimError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimError::Deadlock(d) => write!(f, "simulation deadlock: {}", d),
            SimError::Panicked(m) => write!(f, "actor panicked: {}", m),
            SimError::TimeCapExceeded(ms) => write!(f, "virtual time cap exceeded at {} ms", ms),
        }
    }
}

impl std::error::Error for SimError {}

struct SchedState {
    now_ns: u64,
    cap_ns: u64,
    actors: Vec<ActorSlot>,
    ready: BTreeSet<ActorId>,
    timers: BinaryHeap<TimerEntry>,
    seq: u64,
    started: bool,
    completed: bool,
    fault: Option<SimError>,
}

impl SchedState {
    fn push_timer(&mut self, at_ns: u64, event: TimerEvent) {
        let seq = self.seq;
        self.seq += 1;
        self.timers.push(TimerEntry { at_ns, seq, event });
    }
}

pub struct Scheduler {
    state: Mutex<SchedState>,
    cv: Condvar,
}

thread_local! {
    static CURRENT_ACTOR: std::cell::Cell<Option<ActorId>> = const { std::cell::Cell::new(None) };
}

/// The actor bound to the calling thread, if any.
pub fn current_actor() -> Option<ActorId> {
    CURRENT_ACTOR.with(|c| c.get())
}

enum Step {
    /// Hand-off complete (an actor now runs, or the simulation ended).
    Settled,
    /// A timer closure must run outside the lock, then stepping continues.
    RunCall(Box<dyn FnOnce() + Send>),
}

impl Scheduler {
    pub fn new(cap_ms: f64) -> Self {
        Scheduler {
            state: Mutex::new(SchedState {
                now_ns: 0,
                cap_ns: ms_to_ns(cap_ms),
                actors: Vec::new(),
                ready: BTreeSet::new(),
                timers: BinaryHeap::new(),
                seq: 0,
                started: false,
                completed: false,
                fault: None,
            }),
            cv: Condvar::new(),
        }
    }

    pub fn now_ns(&self) -> u64 {
        self.state.lock().unwrap().now_ns
    }

    pub fn now_ms(&self) -> f64 {
        ns_to_ms(self.now_ns())
    }

    /// Registers an actor that becomes ready at `start_ms`. Must happen
    /// before `start()`.
    pub fn register_actor(&self, name: &str, start_ms: f64) -> ActorId {
        let mut st = self.state.lock().unwrap();
        assert!(!st.started, "actors must be registered before the simulation starts");
        let id = st.actors.len();
        st.actors.push(ActorSlot {
            name: name.to_string(),
            state: ActorState::Idle,
            killed: false,
            pending_wake: false,
        });
        let at = ms_to_ns(start_ms);
        st.push_timer(at, TimerEvent::Wake(id));
        id
    }

    /// Schedules a closure after a virtual delay from now.
    pub fn schedule_call_after(&self, delay_ms: f64, f: Box<dyn FnOnce() + Send>) {
        let mut st = self.state.lock().unwrap();
        let at = st.now_ns + ms_to_ns(delay_ms);
        st.push_timer(at, TimerEvent::Call(f));
    }

    /// Moves a blocked actor to ready. Wakes arriving while the actor runs
    /// are remembered so its next block returns immediately.
    pub fn make_ready(&self, actor: ActorId) {
        let mut st = self.state.lock().unwrap();
        Self::make_ready_locked(&mut st, actor);
    }

    fn make_ready_locked(st: &mut SchedState, actor: ActorId) {
        match st.actors[actor].state {
            ActorState::Blocked => {
                st.actors[actor].state = ActorState::Ready;
                st.ready.insert(actor);
            }
            ActorState::Running => st.actors[actor].pending_wake = true,
            ActorState::Idle | ActorState::Ready | ActorState::Done => {}
        }
    }

    /// Flags an actor as killed and unblocks it so its current or next
    /// blocking operation returns `Interrupt`.
    pub fn kill_actor(&self, actor: ActorId) {
        let mut st = self.state.lock().unwrap();
        if st.actors[actor].state == ActorState::Done {
            return;
        }
        st.actors[actor].killed = true;
        Self::make_ready_locked(&mut st, actor);
    }

    pub fn actor_killed(&self, actor: ActorId) -> bool {
        self.state.lock().unwrap().actors[actor].killed
    }

    /// Entry point for actor threads: binds the thread and parks until first
    /// scheduled.
    pub fn actor_begin(&self, actor: ActorId) {
        CURRENT_ACTOR.with(|c| c.set(Some(actor)));
        let mut st = self.state.lock().unwrap();
        while st.actors[actor].state != ActorState::Running {
            st = self.cv.wait(st).unwrap();
        }
    }

    /// Marks the calling actor done and hands off.
    pub fn actor_finish(&self, actor: ActorId) {
        {
            let mut st = self.state.lock().unwrap();
            st.actors[actor].state = ActorState::Done;
            st.ready.remove(&actor);
        }
        self.advance();
    }

    /// Parks the calling actor until woken (optionally by a timer at an
    /// absolute virtual time). Returns `Err(Interrupt)` once killed.
    pub fn block_current(&self, actor: ActorId, wake_at_ms: Option<f64>) -> Result<(), Interrupt> {
        {
            let mut st = self.state.lock().unwrap();
            debug_assert_eq!(st.actors[actor].state, ActorState::Running);
            if st.actors[actor].killed {
                return Err(Interrupt);
            }
            if st.actors[actor].pending_wake {
                st.actors[actor].pending_wake = false;
                return Ok(());
            }
            if let Some(at_ms) = wake_at_ms {
                let at = ms_to_ns(at_ms).max(st.now_ns);
                st.push_timer(at, TimerEvent::Wake(actor));
            }
            st.actors[actor].state = ActorState::Blocked;
        }
        self.advance();
        let mut st = self.state.lock().unwrap();
        while st.actors[actor].state != ActorState::Running {
            st = self.cv.wait(st).unwrap();
        }
        if st.actors[actor].killed {
            return Err(Interrupt);
        }
        Ok(())
    }

    /// Kicks the first hand-off; called once by the driving thread after all
    /// actors are registered.
    pub fn start(&self) {
        self.state.lock().unwrap().started = true;
        self.advance();
    }

    /// Runs hand-off steps, executing timer closures outside the lock, until
    /// an actor runs or the simulation settles.
    fn advance(&self) {
        loop {
            let step = {
                let mut st = self.state.lock().unwrap();
                self.step(&mut st)
            };
            match step {
                Step::Settled => return,
                Step::RunCall(f) => f(),
            }
        }
    }

    fn step(&self, st: &mut SchedState) -> Step {
        loop {
            if st.fault.is_some() {
                // Fault path: mark everything killed and release blocked
                // actors so their threads unwind and the run can be joined.
                for a in 0..st.actors.len() {
                    if st.actors[a].state == ActorState::Done {
                        continue;
                    }
                    st.actors[a].killed = true;
                    if matches!(st.actors[a].state, ActorState::Blocked | ActorState::Idle) {
                        st.actors[a].state = ActorState::Ready;
                        st.ready.insert(a);
                    }
                }
            }
            if st.actors.iter().all(|a| a.state == ActorState::Done) {
                st.completed = true;
                self.cv.notify_all();
                return Step::Settled;
            }
            if let Some(&next) = st.ready.iter().next() {
                st.ready.remove(&next);
                st.actors[next].state = ActorState::Running;
                self.cv.notify_all();
                return Step::Settled;
            }
            match st.timers.pop() {
                Some(entry) => {
                    if entry.at_ns > st.now_ns {
                        st.now_ns = entry.at_ns;
                    }
                    if st.now_ns > st.cap_ns && st.fault.is_none() {
                        st.fault = Some(SimError::TimeCapExceeded(ns_to_ms(st.now_ns)));
                        continue;
                    }
                    match entry.event {
                        TimerEvent::Wake(actor) => {
                            if matches!(
                                st.actors[actor].state,
                                ActorState::Blocked | ActorState::Idle
                            ) {
                                st.actors[actor].state = ActorState::Ready;
                                st.ready.insert(actor);
                            }
                            // otherwise: stale timer, ignore
                        }
                        TimerEvent::Call(f) => return Step::RunCall(f),
                    }
                }
                None => {
                    if st.fault.is_none() {
                        let blocked: Vec<String> = st
                            .actors
                            .iter()
                            .filter(|a| a.state != ActorState::Done)
                            .map(|a| format!("{} ({:?})", a.name, a.state))
                            .collect();
                        st.fault = Some(SimError::Deadlock(blocked.join(", ")));
                    }
                }
            }
        }
    }

    /// Records a panic from an actor thread and poisons the simulation.
    pub fn record_panic(&self, actor: ActorId, msg: String) {
        let mut st = self.state.lock().unwrap();
        if st.fault.is_none() {
            let name = st.actors[actor].name.clone();
            st.fault = Some(SimError::Panicked(format!("{}: {}", name, msg)));
        }
    }

    /// Blocks the calling (non-actor) thread until the simulation completes.
    pub fn wait_completion(&self) -> Result<(), SimError> {
        let mut st = self.state.lock().unwrap();
        while !st.completed {
            st = self.cv.wait(st).unwrap();
        }
        match &st.fault {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }
}
