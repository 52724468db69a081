//! Deterministic simulated cluster: virtual clock, scripted machine loads, a
//! modeled network, the full QoS middleware, and scripted fault injection.
//!
//! Identical configuration and seed replay bit-identical runs. All machines
//! live in one process; each task body and each QoS manager runs as an actor
//! of the cooperative [`sched::Scheduler`].

pub mod net;
pub mod sched;

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::atg::Atg;
use crate::ports::{Port, PortMailbox};
use crate::probes::{LoadPattern, LoadScenario, MachineStatics, ProbeError, ProbeProvider};
use crate::qos::data::{GlobalQosStore, LocalQosStore, TaskPid, TaskState};
use crate::qos::manager::{ManagerConfig, ManagerCtl, MeasureSpan, MeasureTrace, QosManager, QosServer};
use crate::qos::service::QosService;
use crate::runtime::{Interrupt, NotifyCell, Runtime, TaskBody, TaskCtx, TaskError, WireClient};
use net::{LinkParams, NetParams, SimMsgNet, SimNet, SimWireClient};
use sched::{current_actor, ActorId, Scheduler, SimError};

const WORK_EPS: f64 = 1e-6;

// --- machine compute model -------------------------------------------------

struct ComputeJob {
    remaining_units: f64,
    last_ms: f64,
}

struct MachInner {
    jobs: BTreeMap<ActorId, ComputeJob>,
    /// Transient extra runnable processes: `[start_ms, end_ms)`.
    bursts: Vec<(f64, f64)>,
}

/// One simulated machine's CPU: scripted external load, transient monitoring
/// bursts, and the compute jobs of resident tasks, shared processor-sharing
/// style. A job's rate is `cpu_mhz * min(1, num_cpus / runnable)` where
/// `runnable` counts external load, active bursts, and resident jobs.
pub struct MachineModel {
    pub rank: usize,
    pub cpu_speed_mhz: f64,
    pub num_cpus: u32,
    pattern: LoadPattern,
    sched: Arc<Scheduler>,
    inner: Mutex<MachInner>,
}

impl MachineModel {
    fn new(rank: usize, cpu_speed_mhz: f64, num_cpus: u32, pattern: LoadPattern, sched: Arc<Scheduler>) -> Arc<Self> {
        Arc::new(MachineModel {
            rank,
            cpu_speed_mhz,
            num_cpus,
            pattern,
            sched,
            inner: Mutex::new(MachInner { jobs: BTreeMap::new(), bursts: Vec::new() }),
        })
    }

    fn runnable_at(&self, inner: &MachInner, t: f64) -> f64 {
        let bursts = inner.bursts.iter().filter(|(s, e)| *s <= t && t < *e).count() as f64;
        self.pattern.at(t) + bursts + inner.jobs.len() as f64
    }

    fn rate_at(&self, inner: &MachInner, t: f64) -> f64 {
        let runnable = self.runnable_at(inner, t).max(1.0);
        let share = (self.num_cpus as f64 / runnable).min(1.0);
        self.cpu_speed_mhz * share
    }

    /// Next instant after `t` at which the rate may change (scripted load
    /// flip or burst boundary). Job-set changes are handled by re-projection.
    fn next_boundary(&self, inner: &MachInner, t: f64) -> Option<f64> {
        let mut next = self.pattern.next_change_after(t);
        for (s, e) in &inner.bursts {
            for b in [*s, *e] {
                if b > t && next.map_or(true, |n| b < n) {
                    next = Some(b);
                }
            }
        }
        next
    }

    fn advance_all(&self, inner: &mut MachInner, now: f64) {
        let actors: Vec<ActorId> = inner.jobs.keys().copied().collect();
        for actor in actors {
            let (mut t, mut remaining) = {
                let job = &inner.jobs[&actor];
                (job.last_ms, job.remaining_units)
            };
            while t < now && remaining > 0.0 {
                let seg_end = match self.next_boundary(inner, t) {
                    Some(b) if b < now => b,
                    _ => now,
                };
                remaining -= self.rate_at(inner, t) * (seg_end - t);
                t = seg_end;
            }
            let job = inner.jobs.get_mut(&actor).unwrap();
            job.remaining_units = remaining.max(0.0);
            job.last_ms = now;
        }
        inner.bursts.retain(|(_, e)| *e > now);
    }

    fn projected_finish(&self, inner: &MachInner, actor: ActorId) -> f64 {
        let job = &inner.jobs[&actor];
        let mut t = job.last_ms;
        let mut remaining = job.remaining_units;
        loop {
            let rate = self.rate_at(inner, t);
            let eta = t + remaining / rate;
            match self.next_boundary(inner, t) {
                Some(b) if b < eta => {
                    remaining -= rate * (b - t);
                    t = b;
                }
                _ => return eta,
            }
        }
    }

    fn wake_jobs_except(&self, inner: &MachInner, skip: Option<ActorId>) {
        for actor in inner.jobs.keys() {
            if Some(*actor) != skip {
                self.sched.make_ready(*actor);
            }
        }
    }

    fn start_job(&self, actor: ActorId, units: f64) {
        let now = self.sched.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.advance_all(&mut inner, now);
        inner.jobs.insert(actor, ComputeJob { remaining_units: units, last_ms: now });
        self.wake_jobs_except(&inner, Some(actor));
    }

    /// Returns the projected finish time, or `None` once the job is done.
    fn poll_job(&self, actor: ActorId) -> Option<f64> {
        let now = self.sched.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.advance_all(&mut inner, now);
        if inner.jobs.get(&actor).map_or(true, |j| j.remaining_units <= WORK_EPS) {
            inner.jobs.remove(&actor);
            self.wake_jobs_except(&inner, Some(actor));
            return None;
        }
        Some(self.projected_finish(&inner, actor))
    }

    fn cancel_job(&self, actor: ActorId) {
        let now = self.sched.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.advance_all(&mut inner, now);
        if inner.jobs.remove(&actor).is_some() {
            self.wake_jobs_except(&inner, Some(actor));
        }
    }

    fn add_burst(&self, duration_ms: f64) {
        if duration_ms <= 0.0 {
            return;
        }
        let now = self.sched.now_ms();
        let mut inner = self.inner.lock().unwrap();
        self.advance_all(&mut inner, now);
        inner.bursts.push((now, now + duration_ms));
        self.wake_jobs_except(&inner, None);
    }

    /// Run-queue length a monitor reads: scripted external load plus resident
    /// computing tasks (the probe itself is not counted).
    pub fn measured_workload(&self) -> f64 {
        let now = self.sched.now_ms();
        let inner = self.inner.lock().unwrap();
        self.pattern.at(now) + inner.jobs.len() as f64
    }
}

// --- fault injection ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum KillTrigger {
    AtTimeMs(f64),
    /// Kill the task when its body reaches the named checkpoint.
    AtCheckpoint(String),
    /// Kill `delay_ms` after the named checkpoint is reached.
    AfterCheckpoint { name: String, delay_ms: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KillSpec {
    pub task_rank: usize,
    pub trigger: KillTrigger,
}

// --- simulated runtime --------------------------------------------------------

pub struct SimRuntime {
    sched: Arc<Scheduler>,
    machines: Vec<Arc<MachineModel>>,
    checkpoint_kills: Mutex<BTreeMap<ActorId, Vec<(String, Option<f64>)>>>,
}

impl SimRuntime {
    fn actor(&self) -> ActorId {
        current_actor().expect("runtime call from outside a simulated actor")
    }

    fn add_checkpoint_kill(&self, actor: ActorId, name: String, delay_ms: Option<f64>) {
        self.checkpoint_kills.lock().unwrap().entry(actor).or_default().push((name, delay_ms));
    }
}

impl Runtime for SimRuntime {
    fn now_ms(&self) -> f64 {
        self.sched.now_ms()
    }

    fn sleep_ms(&self, ms: f64) -> Result<(), Interrupt> {
        let actor = self.actor();
        let target = self.sched.now_ms() + ms.max(0.0);
        while self.sched.now_ms() < target {
            self.sched.block_current(actor, Some(target))?;
        }
        Ok(())
    }

    fn wait_on(
        &self,
        cell: &NotifyCell,
        deadline_ms: Option<f64>,
        pred: &mut dyn FnMut() -> bool,
    ) -> Result<bool, Interrupt> {
        let actor = self.actor();
        loop {
            if pred() {
                return Ok(true);
            }
            if let Some(d) = deadline_ms {
                if self.sched.now_ms() >= d {
                    return Ok(false);
                }
            }
            cell.add_sim_waiter(actor);
            self.sched.block_current(actor, deadline_ms)?;
        }
    }

    fn notify(&self, cell: &NotifyCell) {
        cell.real_notify();
        for actor in cell.take_sim_waiters() {
            self.sched.make_ready(actor);
        }
    }

    fn charge_compute(&self, machine_rank: usize, work_units: f64) -> Result<(), Interrupt> {
        if work_units <= 0.0 {
            return Ok(());
        }
        let actor = self.actor();
        let machine = &self.machines[machine_rank];
        machine.start_job(actor, work_units);
        loop {
            match machine.poll_job(actor) {
                None => return Ok(()),
                Some(finish_ms) => {
                    if let Err(e) = self.sched.block_current(actor, Some(finish_ms)) {
                        machine.cancel_job(actor);
                        return Err(e);
                    }
                }
            }
        }
    }

    fn checkpoint(&self, name: &str) -> Result<(), Interrupt> {
        let actor = self.actor();
        let mut due_now = false;
        {
            let mut kills = self.checkpoint_kills.lock().unwrap();
            if let Some(triggers) = kills.get_mut(&actor) {
                let mut i = 0;
                while i < triggers.len() {
                    if triggers[i].0 == name {
                        let (_, delay) = triggers.remove(i);
                        match delay {
                            None => due_now = true,
                            Some(delay_ms) => {
                                let sched = Arc::clone(&self.sched);
                                self.sched.schedule_call_after(
                                    delay_ms,
                                    Box::new(move || sched.kill_actor(actor)),
                                );
                            }
                        }
                    } else {
                        i += 1;
                    }
                }
            }
        }
        if due_now {
            self.sched.kill_actor(actor);
            return Err(Interrupt);
        }
        Ok(())
    }

    fn add_load_burst(&self, machine_rank: usize, duration_ms: f64) {
        self.machines[machine_rank].add_burst(duration_ms);
    }
}

// --- simulated probe provider ---------------------------------------------------

struct SimProbeProvider {
    machines: Vec<Arc<MachineModel>>,
    net: Arc<SimNet>,
    wire: Arc<SimWireClient>,
    runtime: Arc<SimRuntime>,
    ram_bytes: u64,
    swap_bytes: u64,
}

/// Simulated task ids are derived from the task rank, so the scripted kill
/// of a task makes exactly its id vanish from the listing.
pub fn sim_task_pid(task_rank: usize) -> TaskPid {
    TaskPid(1000 + task_rank as u64)
}

impl ProbeProvider for SimProbeProvider {
    fn statics(&self, machine_rank: usize) -> Result<MachineStatics, ProbeError> {
        let m = self
            .machines
            .get(machine_rank)
            .ok_or_else(|| ProbeError::Provider("unknown machine".into()))?;
        Ok(MachineStatics {
            os_type: "simos".into(),
            cpu_speed_mhz: m.cpu_speed_mhz,
            num_cpus: m.num_cpus,
        })
    }

    fn workload(&self, machine_rank: usize) -> Result<f64, ProbeError> {
        Ok(self.machines[machine_rank].measured_workload())
    }

    fn free_ram_bytes(&self, _machine_rank: usize) -> Result<u64, ProbeError> {
        Ok(self.ram_bytes)
    }

    fn free_swap_bytes(&self, _machine_rank: usize) -> Result<u64, ProbeError> {
        Ok(self.swap_bytes)
    }

    fn ping(&self, machine_rank: usize, timeout_ms: f64) -> bool {
        self.wire.ping(machine_rank, timeout_ms)
    }

    fn list_pids(&self, machine_rank: usize) -> Result<Vec<TaskPid>, ProbeError> {
        Ok(self.net.live_tasks_on(machine_rank).into_iter().map(sim_task_pid).collect())
    }

    fn ping_retry_pause(&self, pause_ms: f64) {
        let _ = self.runtime.sleep_ms(pause_ms);
    }
}

// --- cluster configuration -----------------------------------------------------

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub atg: Arc<Atg>,
    pub scenario: LoadScenario,
    pub cpu_mhz: f64,
    pub num_cpus: u32,
    /// Per-machine CPU rating overrides, by machine name.
    pub cpu_overrides: BTreeMap<String, f64>,
    pub link_latency_ms: f64,
    pub link_rate_mbps: f64,
    pub loopback_latency_ms: f64,
    pub loopback_rate_mbps: f64,
    pub link_overrides: BTreeMap<(usize, usize), LinkParams>,
    /// Task `t` starts at `(t + 1) * launch_stagger_ms` (sequential launcher).
    pub launch_stagger_ms: f64,
    pub monitoring_enabled: bool,
    pub period_ms: f64,
    pub ping_timeout_ms: f64,
    pub ping_retry_pause_ms: f64,
    pub cycle_burst_ms: f64,
    pub first_cycle_burst_ms: f64,
    pub msg_timeout_ms: f64,
    pub time_cap_ms: f64,
    pub ram_bytes: u64,
    pub swap_bytes: u64,
}

impl SimConfig {
    pub fn new(atg: Arc<Atg>) -> Self {
        SimConfig {
            atg,
            scenario: LoadScenario::default(),
            cpu_mhz: 333.0,
            num_cpus: 1,
            cpu_overrides: BTreeMap::new(),
            link_latency_ms: 1.0,
            link_rate_mbps: 100.0,
            loopback_latency_ms: 0.01,
            loopback_rate_mbps: 40_000.0,
            link_overrides: BTreeMap::new(),
            launch_stagger_ms: 300.0,
            monitoring_enabled: true,
            period_ms: 30_000.0,
            ping_timeout_ms: 1000.0,
            ping_retry_pause_ms: 250.0,
            cycle_burst_ms: 400.0,
            first_cycle_burst_ms: 2000.0,
            msg_timeout_ms: 30_000.0,
            time_cap_ms: 4.0 * 3_600_000.0,
            ram_bytes: 256 << 20,
            swap_bytes: 512 << 20,
        }
    }
}

// --- reports ------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SimReport {
    /// Virtual time at which the last application task reached a terminal
    /// state (the application completion time).
    pub app_elapsed_ms: f64,
    /// Per task: completion time and final state.
    pub completions: BTreeMap<usize, (f64, TaskState)>,
    pub failures: BTreeMap<usize, String>,
    /// Wire frames sent, keyed by `(src machine, dst machine, opcode)`.
    pub traffic: BTreeMap<(usize, usize, u8), u64>,
    pub measure_spans: Vec<MeasureSpan>,
    pub local_stamps: Vec<u64>,
    pub global_stamp: u64,
}

struct AppProgress {
    remaining: AtomicUsize,
    done: AtomicBool,
}

// --- the cluster ----------------------------------------------------------------

pub struct SimCluster {
    cfg: SimConfig,
    sched: Arc<Scheduler>,
    net: Arc<SimNet>,
    runtime: Arc<SimRuntime>,
    machines: Vec<Arc<MachineModel>>,
    stores: Vec<Arc<LocalQosStore>>,
    global: Arc<GlobalQosStore>,
    managers: Vec<Arc<QosManager>>,
    trace: Arc<MeasureTrace>,
    bodies: BTreeMap<usize, TaskBody>,
    kills: Vec<KillSpec>,
}

impl SimCluster {
    pub fn new(cfg: SimConfig) -> Self {
        let atg = Arc::clone(&cfg.atg);
        let sched = Arc::new(Scheduler::new(cfg.time_cap_ms));
        let params = NetParams {
            default: LinkParams { latency_ms: cfg.link_latency_ms, rate_mbps: cfg.link_rate_mbps },
            loopback: LinkParams {
                latency_ms: cfg.loopback_latency_ms,
                rate_mbps: cfg.loopback_rate_mbps,
            },
            overrides: cfg.link_overrides.clone(),
        };
        let net = SimNet::new(Arc::clone(&sched), Arc::clone(&atg), params);

        let machines: Vec<Arc<MachineModel>> = atg
            .machines
            .iter()
            .map(|m| {
                let mhz = cfg.cpu_overrides.get(&m.name).copied().unwrap_or(cfg.cpu_mhz);
                MachineModel::new(
                    m.rank,
                    mhz,
                    cfg.num_cpus,
                    cfg.scenario.pattern_for(&m.name),
                    Arc::clone(&sched),
                )
            })
            .collect();

        let runtime = Arc::new(SimRuntime {
            sched: Arc::clone(&sched),
            machines: machines.clone(),
            checkpoint_kills: Mutex::new(BTreeMap::new()),
        });

        let stores: Vec<Arc<LocalQosStore>> = (0..atg.num_machines())
            .map(|m| Arc::new(LocalQosStore::new(Arc::clone(&atg), m)))
            .collect();
        let global = Arc::new(GlobalQosStore::new(&atg));
        let trace: Arc<MeasureTrace> = Arc::new(Mutex::new(Vec::new()));

        let mut managers = Vec::new();
        for m in 0..atg.num_machines() {
            let wire = SimWireClient::new(Arc::clone(&net), m);
            let provider = Arc::new(SimProbeProvider {
                machines: machines.clone(),
                net: Arc::clone(&net),
                wire: Arc::clone(&wire),
                runtime: Arc::clone(&runtime),
                ram_bytes: cfg.ram_bytes,
                swap_bytes: cfg.swap_bytes,
            });
            let is_master = m == atg.master_rank();
            let manager = QosManager::new(
                Arc::clone(&atg),
                m,
                Arc::clone(&stores[m]),
                is_master.then(|| Arc::clone(&global)),
                wire as Arc<dyn WireClient>,
                provider,
                Arc::clone(&runtime) as Arc<dyn Runtime>,
                ManagerConfig {
                    period_ms: cfg.period_ms,
                    ping_timeout_ms: cfg.ping_timeout_ms,
                    ping_retry_pause_ms: cfg.ping_retry_pause_ms,
                    enabled: cfg.monitoring_enabled,
                    cycle_burst_ms: cfg.cycle_burst_ms,
                    first_cycle_burst_ms: cfg.first_cycle_burst_ms,
                },
                Some(Arc::clone(&trace)),
            );
            let server = QosServer::new(
                Arc::clone(&stores[m]),
                is_master.then(|| Arc::clone(&global)),
                manager.token_flag(),
            );
            net.register_handler(m, server);
            managers.push(manager);
        }

        SimCluster {
            cfg,
            sched,
            net,
            runtime,
            machines,
            stores,
            global,
            managers,
            trace,
            bodies: BTreeMap::new(),
            kills: Vec::new(),
        }
    }

    pub fn atg(&self) -> &Arc<Atg> {
        &self.cfg.atg
    }

    pub fn store(&self, machine_rank: usize) -> Arc<LocalQosStore> {
        Arc::clone(&self.stores[machine_rank])
    }

    pub fn global_store(&self) -> Arc<GlobalQosStore> {
        Arc::clone(&self.global)
    }

    pub fn manager(&self, machine_rank: usize) -> Arc<QosManager> {
        Arc::clone(&self.managers[machine_rank])
    }

    pub fn machine_model(&self, machine_rank: usize) -> Arc<MachineModel> {
        Arc::clone(&self.machines[machine_rank])
    }

    pub fn set_task_body(&mut self, task_rank: usize, body: TaskBody) {
        self.bodies.insert(task_rank, body);
    }

    pub fn inject_kill(&mut self, spec: KillSpec) {
        self.kills.push(spec);
    }

    /// Takes a whole machine down at a virtual time: its wire endpoint stops
    /// answering and every resident actor is killed.
    pub fn kill_machine_at(&mut self, machine_rank: usize, at_ms: f64) {
        self.kills.push(KillSpec {
            task_rank: usize::MAX - machine_rank, // sentinel resolved in run()
            trigger: KillTrigger::AtTimeMs(at_ms),
        });
    }

    fn build_task_ctx(&self, task_rank: usize) -> TaskCtx {
        let atg = Arc::clone(&self.cfg.atg);
        let machine_rank = atg.tasks[task_rank].machine_rank;
        let wire = SimWireClient::new(Arc::clone(&self.net), machine_rank);
        let msg_net = SimMsgNet::new(Arc::clone(&self.net));
        let store = Arc::clone(&self.stores[machine_rank]);

        let mut ports = Vec::new();
        for p in 0..atg.tasks[task_rank].num_ports {
            let mailbox = Arc::new(PortMailbox::new());
            self.net.register_mailbox(task_rank, p, Arc::clone(&mailbox));
            let peer_store = Arc::clone(&store);
            let peer_atg = Arc::clone(&atg);
            let peer_state = Arc::new(move || match peer_atg.port_peer(task_rank, p) {
                Ok(peer) => peer_store.known_task_state(peer.peer_task_rank),
                Err(_) => TaskState::Init,
            });
            ports.push(Port::new(
                task_rank,
                p,
                mailbox,
                Arc::clone(&msg_net) as Arc<dyn crate::ports::MsgTransport>,
                Arc::clone(&self.runtime) as Arc<dyn Runtime>,
                peer_state,
                self.cfg.msg_timeout_ms,
            ));
        }

        let is_master_machine = machine_rank == atg.master_rank();
        let qos = QosService::new(
            Arc::clone(&atg),
            task_rank,
            store,
            is_master_machine.then(|| Arc::clone(&self.global)),
            wire as Arc<dyn WireClient>,
            Arc::clone(&self.runtime) as Arc<dyn Runtime>,
            Arc::clone(&self.managers[machine_rank].ctl),
            self.cfg.ping_timeout_ms,
            self.cfg.ping_retry_pause_ms,
        );

        TaskCtx {
            task_rank,
            machine_rank,
            runtime: Arc::clone(&self.runtime) as Arc<dyn Runtime>,
            ports,
            qos,
        }
    }

    /// Runs the simulation to completion and reports what happened.
    pub fn run(mut self) -> Result<SimReport, SimError> {
        let atg = Arc::clone(&self.cfg.atg);
        let num_machines = atg.num_machines();
        let num_tasks = atg.num_tasks();

        // managers first (actor ids 0..M-1), tasks after, both in rank order
        let manager_actors: Vec<ActorId> = (0..num_machines)
            .map(|m| self.sched.register_actor(&format!("qosmgr-{}", atg.machines[m].name), 0.0))
            .collect();
        let task_actors: Vec<ActorId> = (0..num_tasks)
            .map(|t| {
                let start = (t as f64 + 1.0) * self.cfg.launch_stagger_ms;
                self.sched.register_actor(&atg.tasks[t].variable_name, start)
            })
            .collect();

        // fault injection wiring
        for spec in std::mem::take(&mut self.kills) {
            if spec.task_rank > usize::MAX - num_machines {
                // whole-machine kill sentinel
                let machine_rank = usize::MAX - spec.task_rank;
                let KillTrigger::AtTimeMs(at) = spec.trigger else { continue };
                let sched = Arc::clone(&self.sched);
                let net = Arc::clone(&self.net);
                let mgr_actor = manager_actors[machine_rank];
                let victims: Vec<ActorId> = atg
                    .tasks_on(machine_rank)
                    .into_iter()
                    .map(|t| task_actors[t])
                    .collect();
                self.sched.schedule_call_after(
                    at,
                    Box::new(move || {
                        net.set_machine_down(machine_rank);
                        sched.kill_actor(mgr_actor);
                        for v in &victims {
                            sched.kill_actor(*v);
                        }
                    }),
                );
                continue;
            }
            let actor = task_actors[spec.task_rank];
            match spec.trigger {
                KillTrigger::AtTimeMs(at) => {
                    let sched = Arc::clone(&self.sched);
                    self.sched
                        .schedule_call_after(at, Box::new(move || sched.kill_actor(actor)));
                }
                KillTrigger::AtCheckpoint(name) => {
                    self.runtime.add_checkpoint_kill(actor, name, None);
                }
                KillTrigger::AfterCheckpoint { name, delay_ms } => {
                    self.runtime.add_checkpoint_kill(actor, name, Some(delay_ms));
                }
            }
        }

        let progress = Arc::new(AppProgress {
            remaining: AtomicUsize::new(num_tasks),
            done: AtomicBool::new(num_tasks == 0),
        });
        let completions: Arc<Mutex<BTreeMap<usize, (f64, TaskState)>>> =
            Arc::new(Mutex::new(BTreeMap::new()));
        let failures: Arc<Mutex<BTreeMap<usize, String>>> = Arc::new(Mutex::new(BTreeMap::new()));

        let mut threads = Vec::new();

        // manager actors
        for (m, actor) in manager_actors.iter().enumerate() {
            let actor = *actor;
            let manager = Arc::clone(&self.managers[m]);
            let sched = Arc::clone(&self.sched);
            let progress = Arc::clone(&progress);
            assert!(manager.try_launch(), "one manager per machine");
            threads.push(std::thread::spawn(move || {
                sched.actor_begin(actor);
                let result = std::panic::catch_unwind(AssertUnwindSafe(|| {
                    manager.cycle_loop(&|| progress.done.load(Ordering::SeqCst));
                }));
                if result.is_err() && !sched.actor_killed(actor) {
                    sched.record_panic(actor, "manager loop panicked".into());
                }
                sched.actor_finish(actor);
            }));
        }

        // task actors
        for (t, actor) in task_actors.iter().enumerate() {
            let actor = *actor;
            let body = self
                .bodies
                .remove(&t)
                .unwrap_or_else(|| Box::new(|_ctx: &mut TaskCtx| Ok(())));
            let mut ctx = self.build_task_ctx(t);
            let sched = Arc::clone(&self.sched);
            let net = Arc::clone(&self.net);
            let store = Arc::clone(&self.stores[atg.tasks[t].machine_rank]);
            let runtime = Arc::clone(&self.runtime);
            let progress = Arc::clone(&progress);
            let completions = Arc::clone(&completions);
            let failures = Arc::clone(&failures);
            let ctls: Vec<Arc<ManagerCtl>> =
                self.managers.iter().map(|m| Arc::clone(&m.ctl)).collect();
            threads.push(std::thread::spawn(move || {
                sched.actor_begin(actor);
                net.set_task_alive(t, true);
                let _ = store.report_task_state(t, TaskState::Running { pid: sim_task_pid(t) });
                let result = std::panic::catch_unwind(AssertUnwindSafe(|| body(&mut ctx)));
                let final_state = match result {
                    Ok(Ok(())) => TaskState::Completed,
                    Ok(Err(TaskError::Interrupted)) => TaskState::Dead,
                    Ok(Err(TaskError::Failed(msg))) => {
                        failures.lock().unwrap().insert(t, msg);
                        TaskState::Dead
                    }
                    Err(panic) => {
                        if !sched.actor_killed(actor) {
                            let msg = panic
                                .downcast_ref::<String>()
                                .cloned()
                                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                                .unwrap_or_else(|| "task panicked".into());
                            sched.record_panic(actor, msg);
                        }
                        TaskState::Dead
                    }
                };
                if final_state == TaskState::Dead {
                    net.set_task_dead(t);
                } else {
                    net.set_task_alive(t, false);
                }
                let _ = store.report_task_state(t, final_state);
                completions.lock().unwrap().insert(t, (sched.now_ms(), final_state));
                if progress.remaining.fetch_sub(1, Ordering::SeqCst) == 1 {
                    progress.done.store(true, Ordering::SeqCst);
                    for ctl in &ctls {
                        ctl.poke(runtime.as_ref());
                    }
                }
                sched.actor_finish(actor);
            }));
        }

        self.sched.start();
        let outcome = self.sched.wait_completion();
        for thread in threads {
            let _ = thread.join();
        }
        outcome?;

        let completions = completions.lock().unwrap().clone();
        let failures = failures.lock().unwrap().clone();
        let app_elapsed_ms = completions.values().map(|(at, _)| *at).fold(0.0, f64::max);
        Ok(SimReport {
            app_elapsed_ms,
            completions,
            failures,
            traffic: self.net.traffic_snapshot(),
            measure_spans: self.trace.lock().unwrap().clone(),
            local_stamps: self.stores.iter().map(|s| s.stamp()).collect(),
            global_stamp: self.global.stamp(),
        })
    }
}
