//! Measured attributes and the hierarchical view model.
//!
//! All attributes live in two kinds of shared stores. Every machine has one
//! [`LocalQosStore`] holding its own attributes, the cached records of its
//! peer machines, the states of its local tasks, and the link attributes it
//! knows. The master machine additionally holds the [`GlobalQosStore`] with
//! the application-wide snapshot.
//!
//! Views (`AppView` / `MachView` / `TaskView` / `PortView`) are immutable
//! copies assembled under the store lock, so readers never coordinate with
//! writers and never observe a torn record. Attribute writes do not advance
//! the measurement stamp; only a completed monitoring cycle bumps it.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::atg::Atg;
use crate::netmeter::designated_links;

/// Middleware-assigned task instance identifier, reported when a task starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TaskPid(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MachState {
    Up,
    Down,
}

impl MachState {
    /// Numeric encoding used by the QoS API: up = 1, down = 0.
    pub fn code(self) -> i64 {
        match self {
            MachState::Up => 1,
            MachState::Down => 0,
        }
    }
}

/// Task lifecycle. Legal transitions: init -> running, running -> completed,
/// running -> dead. Completed and dead are terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Init,
    Running { pid: TaskPid },
    Completed,
    Dead,
}

impl TaskState {
    /// Numeric encoding used by the QoS API: init = 0, running = 1,
    /// completed = 2, dead = -1 (so `state != -1` reads "not dead").
    pub fn code(&self) -> i64 {
        match self {
            TaskState::Init => 0,
            TaskState::Running { .. } => 1,
            TaskState::Completed => 2,
            TaskState::Dead => -1,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskState::Completed | TaskState::Dead)
    }

    fn transition_legal(&self, next: &TaskState) -> bool {
        use TaskState::*;
        match (self, next) {
            (a, b) if a == b => true,
            (Running { .. }, Running { .. }) => true,
            (Init, Running { .. }) => true,
            (Running { .. }, Completed) => true,
            (Running { .. }, Dead) => true,
            _ => false,
        }
    }
}

/// The per-machine attribute record.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineAttributes {
    pub os_type: String,
    pub cpu_speed_mhz: f64,
    pub num_cpus: u32,
    pub workload: f64,
    pub effective_speed_mhz: f64,
    pub free_ram_bytes: u64,
    pub free_swap_bytes: u64,
    pub mach_state: MachState,
}

impl Default for MachineAttributes {
    fn default() -> Self {
        MachineAttributes {
            os_type: String::new(),
            cpu_speed_mhz: 0.0,
            num_cpus: 1,
            workload: 0.0,
            effective_speed_mhz: 0.0,
            free_ram_bytes: 0,
            free_swap_bytes: 0,
            mach_state: MachState::Up,
        }
    }
}

/// Measured logical-link attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkAttributes {
    pub latency_ms: f64,
    pub throughput_mbps: f64,
    pub last_measured_stamp: u64,
    /// Set when the last measurement attempt was skipped (peer down) and the
    /// values are carried over from an earlier cycle.
    pub stale: bool,
}

impl Default for LinkAttributes {
    fn default() -> Self {
        LinkAttributes { latency_ms: 0.0, throughput_mbps: 0.0, last_measured_stamp: 0, stale: false }
    }
}

/// What a task sees through one of its ports: the logical link, the peer
/// machine, the peer task, and the peer port.
#[derive(Debug, Clone, PartialEq)]
pub struct PortView {
    pub port_index: usize,
    pub link: LinkAttributes,
    pub peer_machine: MachineAttributes,
    pub peer_task_rank: usize,
    pub peer_task_name: String,
    pub peer_task_state: TaskState,
    pub peer_port_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskView {
    pub rank: usize,
    pub variable_name: String,
    pub component_id: String,
    pub state: TaskState,
    pub ports: Vec<PortView>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachView {
    pub rank: usize,
    pub name: String,
    pub attrs: MachineAttributes,
    pub tasks: Vec<TaskView>,
}

/// Snapshot of all application attributes for one master monitoring cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct AppView {
    pub stamp: u64,
    pub machines: Vec<MachView>,
}

/// Everything one machine publishes about itself: its attribute record, its
/// local task states, and the attributes of the links it measures.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MachineRecord {
    pub attrs: MachineAttributes,
    pub task_states: BTreeMap<usize, TaskState>,
    pub links: BTreeMap<usize, LinkAttributes>,
}

#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("machine rank {0} is not in this store's scope")]
    RankOutOfScope(usize),
    #[error("task {0} is not local to this store")]
    NonLocalTask(usize),
    #[error("unknown task rank {0}")]
    UnknownTask(usize),
    #[error("illegal task state transition for task {task}: {from:?} -> {to:?}")]
    IllegalTransition { task: usize, from: TaskState, to: TaskState },
    #[error("link stamp may not decrease (link {0})")]
    StampRegression(usize),
}

struct LocalState {
    own: MachineRecord,
    /// Cached records of peer machines (and, on the master, of every machine).
    peers: BTreeMap<usize, MachineRecord>,
    /// Link attributes known here: measured locally or merged from peers.
    links: BTreeMap<usize, LinkAttributes>,
    stamp: u64,
}

/// One per machine. Interior mutual exclusion; callers need none.
pub struct LocalQosStore {
    atg: Arc<Atg>,
    machine_rank: usize,
    scope_all: bool,
    state: Mutex<LocalState>,
}

impl LocalQosStore {
    pub fn new(atg: Arc<Atg>, machine_rank: usize) -> Self {
        let scope_all = atg.master_rank() == machine_rank;
        let mut own = MachineRecord::default();
        for t in atg.tasks_on(machine_rank) {
            own.task_states.insert(t, TaskState::Init);
        }
        for link_id in designated_links(&atg, machine_rank) {
            own.links.insert(link_id, LinkAttributes::default());
        }
        LocalQosStore {
            atg,
            machine_rank,
            scope_all,
            state: Mutex::new(LocalState {
                own,
                peers: BTreeMap::new(),
                links: BTreeMap::new(),
                stamp: 0,
            }),
        }
    }

    pub fn machine_rank(&self) -> usize {
        self.machine_rank
    }

    pub fn atg(&self) -> &Arc<Atg> {
        &self.atg
    }

    fn in_scope(&self, rank: usize) -> bool {
        rank == self.machine_rank
            || self.scope_all
            || self
                .atg
                .peer_machine_set(self.machine_rank)
                .map(|s| s.contains(&rank))
                .unwrap_or(false)
    }

    /// Atomically replaces one machine's attribute record.
    pub fn write_machine_attrs(&self, rank: usize, attrs: MachineAttributes) -> Result<(), StoreError> {
        if rank >= self.atg.num_machines() || !self.in_scope(rank) {
            return Err(StoreError::RankOutOfScope(rank));
        }
        let mut st = self.state.lock().unwrap();
        if rank == self.machine_rank {
            st.own.attrs = attrs;
        } else {
            st.peers.entry(rank).or_default().attrs = attrs;
        }
        Ok(())
    }

    /// Merges a fetched peer record: attributes, task states, and the peer's
    /// measured link attributes (accepted when not older than what we hold).
    pub fn write_peer_record(&self, rank: usize, record: MachineRecord) -> Result<(), StoreError> {
        if rank == self.machine_rank || rank >= self.atg.num_machines() || !self.in_scope(rank) {
            return Err(StoreError::RankOutOfScope(rank));
        }
        let mut st = self.state.lock().unwrap();
        for (link_id, attrs) in &record.links {
            let entry = st.links.entry(*link_id).or_default();
            if attrs.last_measured_stamp >= entry.last_measured_stamp {
                *entry = attrs.clone();
            }
        }
        st.peers.insert(rank, record);
        Ok(())
    }

    /// Marks a cached peer machine down, retaining its last-known attributes.
    pub fn mark_peer_down(&self, rank: usize) -> Result<(), StoreError> {
        if rank == self.machine_rank || !self.in_scope(rank) {
            return Err(StoreError::RankOutOfScope(rank));
        }
        let mut st = self.state.lock().unwrap();
        st.peers.entry(rank).or_default().attrs.mach_state = MachState::Down;
        Ok(())
    }

    /// Records a state change for a local task, enforcing transition legality.
    pub fn report_task_state(&self, task_rank: usize, next: TaskState) -> Result<(), StoreError> {
        let task = self.atg.task(task_rank).map_err(|_| StoreError::UnknownTask(task_rank))?;
        if task.machine_rank != self.machine_rank {
            return Err(StoreError::NonLocalTask(task_rank));
        }
        let mut st = self.state.lock().unwrap();
        let current = st.own.task_states.get(&task_rank).cloned().unwrap_or(TaskState::Init);
        if !current.transition_legal(&next) {
            return Err(StoreError::IllegalTransition { task: task_rank, from: current, to: next });
        }
        st.own.task_states.insert(task_rank, next);
        Ok(())
    }

    pub fn local_task_state(&self, task_rank: usize) -> Option<TaskState> {
        self.state.lock().unwrap().own.task_states.get(&task_rank).cloned()
    }

    /// All local tasks have reached completed or dead.
    pub fn local_tasks_terminal(&self) -> bool {
        let st = self.state.lock().unwrap();
        st.own.task_states.values().all(|s| s.is_terminal())
    }

    /// Live PIDs of registered local tasks.
    pub fn local_pids(&self) -> Vec<TaskPid> {
        let st = self.state.lock().unwrap();
        st.own
            .task_states
            .values()
            .filter_map(|s| match s {
                TaskState::Running { pid } => Some(*pid),
                _ => None,
            })
            .collect()
    }

    /// Stores a fresh measurement for a link designated to this machine.
    pub fn write_link_attrs(&self, link_id: usize, attrs: LinkAttributes) -> Result<(), StoreError> {
        let mut st = self.state.lock().unwrap();
        if let Some(existing) = st.own.links.get(&link_id) {
            if attrs.last_measured_stamp < existing.last_measured_stamp {
                return Err(StoreError::StampRegression(link_id));
            }
        }
        st.own.links.insert(link_id, attrs.clone());
        st.links.insert(link_id, attrs);
        Ok(())
    }

    pub fn link_attrs(&self, link_id: usize) -> LinkAttributes {
        let st = self.state.lock().unwrap();
        st.links
            .get(&link_id)
            .or_else(|| st.own.links.get(&link_id))
            .cloned()
            .unwrap_or_default()
    }

    /// The record this machine publishes to peers and to the master.
    pub fn own_record(&self) -> MachineRecord {
        self.state.lock().unwrap().own.clone()
    }

    /// Last cached record of a peer machine, if any was ever fetched.
    pub fn peer_record(&self, rank: usize) -> Option<MachineRecord> {
        self.state.lock().unwrap().peers.get(&rank).cloned()
    }

    /// Best-known state of any task: local tasks from the local record,
    /// remote tasks from the cached peer records (default init).
    pub fn known_task_state(&self, task_rank: usize) -> TaskState {
        let st = self.state.lock().unwrap();
        self.task_state_of(&st, task_rank)
    }

    pub fn own_attrs(&self) -> MachineAttributes {
        self.state.lock().unwrap().own.attrs.clone()
    }

    pub fn bump_stamp(&self) -> u64 {
        let mut st = self.state.lock().unwrap();
        st.stamp += 1;
        st.stamp
    }

    pub fn stamp(&self) -> u64 {
        self.state.lock().unwrap().stamp
    }

    fn mach_attrs_of(&self, st: &LocalState, rank: usize) -> MachineAttributes {
        if rank == self.machine_rank {
            st.own.attrs.clone()
        } else {
            st.peers.get(&rank).map(|r| r.attrs.clone()).unwrap_or_default()
        }
    }

    fn task_state_of(&self, st: &LocalState, task_rank: usize) -> TaskState {
        let machine = self.atg.tasks[task_rank].machine_rank;
        if machine == self.machine_rank {
            st.own.task_states.get(&task_rank).cloned().unwrap_or(TaskState::Init)
        } else {
            st.peers
                .get(&machine)
                .and_then(|r| r.task_states.get(&task_rank).cloned())
                .unwrap_or(TaskState::Init)
        }
    }

    fn link_of(&self, st: &LocalState, link_id: usize) -> LinkAttributes {
        st.links
            .get(&link_id)
            .or_else(|| st.own.links.get(&link_id))
            .cloned()
            .unwrap_or_default()
    }

    fn build_task_view(&self, st: &LocalState, task_rank: usize) -> TaskView {
        let task = &self.atg.tasks[task_rank];
        let mut ports = Vec::with_capacity(task.num_ports);
        for port_index in 0..task.num_ports {
            if let Ok(peer) = self.atg.port_peer(task_rank, port_index) {
                let peer_task = &self.atg.tasks[peer.peer_task_rank];
                ports.push(PortView {
                    port_index,
                    link: self.link_of(st, peer.link_id),
                    peer_machine: self.mach_attrs_of(st, peer.peer_machine_rank),
                    peer_task_rank: peer.peer_task_rank,
                    peer_task_name: peer_task.variable_name.clone(),
                    peer_task_state: self.task_state_of(st, peer.peer_task_rank),
                    peer_port_index: peer.peer_port_index,
                });
            }
        }
        TaskView {
            rank: task_rank,
            variable_name: task.variable_name.clone(),
            component_id: task.component_id.clone(),
            state: self.task_state_of(st, task_rank),
            ports,
        }
    }

    /// Immutable snapshot of a local task, with PortViews populated from the
    /// local record and the cached peer data.
    pub fn snapshot_task_view(&self, task_rank: usize) -> Result<TaskView, StoreError> {
        let task = self.atg.task(task_rank).map_err(|_| StoreError::UnknownTask(task_rank))?;
        if task.machine_rank != self.machine_rank {
            return Err(StoreError::NonLocalTask(task_rank));
        }
        let st = self.state.lock().unwrap();
        Ok(self.build_task_view(&st, task_rank))
    }

    /// Immutable snapshot of this machine's view.
    pub fn snapshot_mach_view(&self) -> MachView {
        let st = self.state.lock().unwrap();
        let decl = &self.atg.machines[self.machine_rank];
        MachView {
            rank: self.machine_rank,
            name: decl.name.clone(),
            attrs: st.own.attrs.clone(),
            tasks: self
                .atg
                .tasks_on(self.machine_rank)
                .into_iter()
                .map(|t| self.build_task_view(&st, t))
                .collect(),
        }
    }
}

/// Assembles an application snapshot from per-machine records gathered by the
/// master. Missing machines keep default attributes.
pub fn assemble_app_view(
    atg: &Atg,
    stamp: u64,
    records: &BTreeMap<usize, MachineRecord>,
) -> AppView {
    let mach_attrs = |rank: usize| -> MachineAttributes {
        records.get(&rank).map(|r| r.attrs.clone()).unwrap_or_default()
    };
    let task_state = |task_rank: usize| -> TaskState {
        let machine = atg.tasks[task_rank].machine_rank;
        records
            .get(&machine)
            .and_then(|r| r.task_states.get(&task_rank).cloned())
            .unwrap_or(TaskState::Init)
    };
    let mut all_links: BTreeMap<usize, LinkAttributes> = BTreeMap::new();
    for record in records.values() {
        for (id, attrs) in &record.links {
            let entry = all_links.entry(*id).or_default();
            if attrs.last_measured_stamp >= entry.last_measured_stamp {
                *entry = attrs.clone();
            }
        }
    }
    let machines = atg
        .machines
        .iter()
        .map(|m| MachView {
            rank: m.rank,
            name: m.name.clone(),
            attrs: mach_attrs(m.rank),
            tasks: atg
                .tasks_on(m.rank)
                .into_iter()
                .map(|task_rank| {
                    let task = &atg.tasks[task_rank];
                    let ports = (0..task.num_ports)
                        .filter_map(|p| atg.port_peer(task_rank, p).ok().map(|peer| (p, peer)))
                        .map(|(port_index, peer)| PortView {
                            port_index,
                            link: all_links.get(&peer.link_id).cloned().unwrap_or_default(),
                            peer_machine: mach_attrs(peer.peer_machine_rank),
                            peer_task_rank: peer.peer_task_rank,
                            peer_task_name: atg.tasks[peer.peer_task_rank].variable_name.clone(),
                            peer_task_state: task_state(peer.peer_task_rank),
                            peer_port_index: peer.peer_port_index,
                        })
                        .collect();
                    TaskView {
                        rank: task_rank,
                        variable_name: task.variable_name.clone(),
                        component_id: task.component_id.clone(),
                        state: task_state(task_rank),
                        ports,
                    }
                })
                .collect(),
        })
        .collect();
    AppView { stamp, machines }
}

/// Master-only application-wide store: the assembled snapshot plus the raw
/// per-machine records it was built from (served over the wire so remote
/// services can reassemble the view against their own task graph).
pub struct GlobalQosStore {
    state: Mutex<(AppView, BTreeMap<usize, MachineRecord>)>,
}

impl GlobalQosStore {
    pub fn new(atg: &Atg) -> Self {
        GlobalQosStore {
            state: Mutex::new((assemble_app_view(atg, 0, &BTreeMap::new()), BTreeMap::new())),
        }
    }

    /// Publishes the snapshot of a completed master cycle.
    pub fn publish(&self, view: AppView, records: BTreeMap<usize, MachineRecord>) {
        *self.state.lock().unwrap() = (view, records);
    }

    /// Latest completed snapshot (stamp-0 defaults before the first cycle).
    pub fn snapshot_app_view(&self) -> AppView {
        self.state.lock().unwrap().0.clone()
    }

    /// Latest stamp and raw records, for the wire server.
    pub fn snapshot_records(&self) -> (u64, BTreeMap<usize, MachineRecord>) {
        let st = self.state.lock().unwrap();
        (st.0.stamp, st.1.clone())
    }

    pub fn stamp(&self) -> u64 {
        self.state.lock().unwrap().0.stamp
    }

    /// Every task in the snapshot has reached completed or dead.
    pub fn all_tasks_terminal(&self) -> bool {
        let st = self.state.lock().unwrap();
        st.0.machines.iter().flat_map(|m| &m.tasks).all(|t| t.state.is_terminal())
    }
}
