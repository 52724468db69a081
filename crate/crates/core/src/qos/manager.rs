//! The per-machine monitoring daemon.
//!
//! One manager per machine runs the periodic cycle: probe the local machine,
//! refresh local task states, pull peer machine records, measure designated
//! links while holding the token, commit everything to the local store, and
//! bump the measurement stamp. The master's manager additionally gathers
//! every machine's record and publishes the application snapshot.
//!
//! The wire server answering remote requests is a separate, always-passive
//! component ([`QosServer`]): stopping the monitoring cycles freezes the
//! stamp but keeps the server answering.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::atg::Atg;
use crate::netmeter::{self, TokenRing};
use crate::probes::{self, ProbeProvider};
use crate::qos::data::{assemble_app_view, GlobalQosStore, LocalQosStore, MachineRecord};
use crate::qos::wire::{self, Opcode};
use crate::runtime::{NotifyCell, Runtime, WireClient, WireHandler};

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub period_ms: f64,
    pub ping_timeout_ms: f64,
    pub ping_retry_pause_ms: f64,
    pub enabled: bool,
    /// Modeled CPU cost of one cycle, charged to the machine in simulation.
    pub cycle_burst_ms: f64,
    /// The first cycle is heavier (statics, peer resolution, metering setup).
    pub first_cycle_burst_ms: f64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            period_ms: 30_000.0,
            ping_timeout_ms: 1000.0,
            ping_retry_pause_ms: 250.0,
            enabled: true,
            cycle_burst_ms: 400.0,
            first_cycle_burst_ms: 2000.0,
        }
    }
}

/// Shared control block: the service facade toggles monitoring through this.
pub struct ManagerCtl {
    enabled: AtomicBool,
    period_ms: Mutex<f64>,
    epoch: AtomicU64,
    pub cell: NotifyCell,
}

impl ManagerCtl {
    fn new(cfg: &ManagerConfig) -> Arc<Self> {
        Arc::new(ManagerCtl {
            enabled: AtomicBool::new(cfg.enabled),
            period_ms: Mutex::new(cfg.period_ms),
            epoch: AtomicU64::new(0),
            cell: NotifyCell::new(),
        })
    }

    pub fn enabled(&self) -> bool {
        self.enabled.load(Ordering::SeqCst)
    }

    pub fn period_ms(&self) -> f64 {
        *self.period_ms.lock().unwrap()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::SeqCst)
    }

    fn touch(&self) {
        self.epoch.fetch_add(1, Ordering::SeqCst);
    }

    pub fn stop(&self, runtime: &dyn Runtime) {
        self.enabled.store(false, Ordering::SeqCst);
        self.touch();
        runtime.notify(&self.cell);
    }

    pub fn resume(&self, runtime: &dyn Runtime) {
        self.enabled.store(true, Ordering::SeqCst);
        self.touch();
        runtime.notify(&self.cell);
    }

    pub fn set_period(&self, runtime: &dyn Runtime, period_ms: f64) -> Result<(), String> {
        if !(period_ms > 0.0) {
            return Err(format!("monitoring period must be positive, got {}", period_ms));
        }
        *self.period_ms.lock().unwrap() = period_ms;
        self.touch();
        runtime.notify(&self.cell);
        Ok(())
    }

    /// Wakes the loop so it can observe an external shutdown condition.
    pub fn poke(&self, runtime: &dyn Runtime) {
        self.touch();
        runtime.notify(&self.cell);
    }
}

/// One measured interval, recorded for the mutual-exclusion property checks.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSpan {
    pub machine_rank: usize,
    pub link_id: usize,
    pub start_ms: f64,
    pub end_ms: f64,
}

pub type MeasureTrace = Mutex<Vec<MeasureSpan>>;

pub struct QosManager {
    atg: Arc<Atg>,
    machine_rank: usize,
    store: Arc<LocalQosStore>,
    global: Option<Arc<GlobalQosStore>>,
    wire: Arc<dyn WireClient>,
    provider: Arc<dyn ProbeProvider>,
    runtime: Arc<dyn Runtime>,
    pub ctl: Arc<ManagerCtl>,
    token_held: Arc<AtomicBool>,
    ring: TokenRing,
    generation: AtomicU64,
    cycles_run: AtomicU64,
    cfg: ManagerConfig,
    launched: AtomicBool,
    trace: Option<Arc<MeasureTrace>>,
}

impl QosManager {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        atg: Arc<Atg>,
        machine_rank: usize,
        store: Arc<LocalQosStore>,
        global: Option<Arc<GlobalQosStore>>,
        wire: Arc<dyn WireClient>,
        provider: Arc<dyn ProbeProvider>,
        runtime: Arc<dyn Runtime>,
        cfg: ManagerConfig,
        trace: Option<Arc<MeasureTrace>>,
    ) -> Arc<Self> {
        let ring = TokenRing::new(&atg);
        let token_held = Arc::new(AtomicBool::new(
            ring.initial_holder(atg.master_rank()) == Some(machine_rank),
        ));
        Arc::new(QosManager {
            ctl: ManagerCtl::new(&cfg),
            atg,
            machine_rank,
            store,
            global,
            wire,
            provider,
            runtime,
            token_held,
            ring,
            generation: AtomicU64::new(0),
            cycles_run: AtomicU64::new(0),
            cfg,
            launched: AtomicBool::new(false),
            trace,
        })
    }

    pub fn machine_rank(&self) -> usize {
        self.machine_rank
    }

    pub fn store(&self) -> &Arc<LocalQosStore> {
        &self.store
    }

    pub fn token_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.token_held)
    }

    pub fn token_generation(&self) -> u64 {
        self.generation.load(Ordering::SeqCst)
    }

    /// First launch wins; later calls are no-ops. The caller that wins spawns
    /// the cycle loop.
    pub fn try_launch(&self) -> bool {
        !self.launched.swap(true, Ordering::SeqCst)
    }

    /// One monitoring cycle. Never aborts on unreachable peers; they are
    /// marked down and the cycle continues.
    pub fn run_cycle(&self) {
        let burst = if self.cycles_run.fetch_add(1, Ordering::SeqCst) == 0 {
            self.cfg.first_cycle_burst_ms
        } else {
            self.cfg.cycle_burst_ms
        };
        self.runtime.add_load_burst(self.machine_rank, burst);

        // 1. local machine attributes
        let last = self.store.own_attrs();
        let attrs = probes::probe_machine(
            self.provider.as_ref(),
            self.machine_rank,
            &last,
            self.cfg.ping_timeout_ms,
            self.cfg.ping_retry_pause_ms,
        );

        // 2. local task states
        for task_rank in self.atg.tasks_on(self.machine_rank) {
            let recorded = self
                .store
                .local_task_state(task_rank)
                .unwrap_or(crate::qos::data::TaskState::Init);
            let fresh = probes::task_state(
                self.provider.as_ref(),
                &recorded,
                self.machine_rank,
                self.cfg.ping_timeout_ms,
                self.cfg.ping_retry_pause_ms,
            );
            if fresh != recorded {
                let _ = self.store.report_task_state(task_rank, fresh);
            }
        }

        // 3. peer records (the master pulls every machine for the snapshot)
        let is_master = self.global.is_some();
        let peers: BTreeSet<usize> = if is_master {
            (0..self.atg.num_machines()).filter(|m| *m != self.machine_rank).collect()
        } else {
            self.atg.peer_machine_set(self.machine_rank).unwrap_or_default()
        };
        for peer in &peers {
            match self.wire.request(
                *peer,
                Opcode::GetMachAttrs,
                Vec::new(),
                self.cfg.ping_timeout_ms,
            ) {
                Ok((Opcode::GetMachAttrs, body)) => match wire::decode_machine_record(&body) {
                    Ok(record) => {
                        let _ = self.store.write_peer_record(*peer, record);
                    }
                    Err(_) => {
                        let _ = self.store.mark_peer_down(*peer);
                    }
                },
                _ => {
                    let _ = self.store.mark_peer_down(*peer);
                }
            }
        }

        // 4. designated link measurement under the token
        if self.token_held.load(Ordering::SeqCst) {
            self.measure_designated_links();
            self.pass_token();
        }

        // 5. commit own attributes, 6. complete the cycle
        let _ = self.store.write_machine_attrs(self.machine_rank, attrs);
        self.store.bump_stamp();

        if let Some(global) = &self.global {
            let mut records: BTreeMap<usize, MachineRecord> = BTreeMap::new();
            records.insert(self.machine_rank, self.store.own_record());
            for m in 0..self.atg.num_machines() {
                if m == self.machine_rank {
                    continue;
                }
                if let Some(record) = self.store.peer_record(m) {
                    records.insert(m, record);
                }
            }
            let stamp = global.stamp() + 1;
            global.publish(assemble_app_view(&self.atg, stamp, &records), records);
        }
    }

    fn measure_designated_links(&self) {
        let stamp = self.store.stamp() + 1;
        for link_id in netmeter::designated_links(&self.atg, self.machine_rank) {
            let start_ms = self.runtime.now_ms();
            let outcome = netmeter::measure_link(
                self.wire.as_ref(),
                &self.atg,
                link_id,
                self.machine_rank,
                stamp,
                self.cfg.ping_timeout_ms,
            );
            let end_ms = self.runtime.now_ms();
            match outcome {
                Ok(m) => {
                    let _ = self.store.write_link_attrs(link_id, netmeter::measurement_to_attrs(&m));
                }
                Err(_) => {
                    // peer down: keep previous values, flag them stale
                    let mut prior = self.store.link_attrs(link_id);
                    prior.stale = true;
                    let _ = self.store.write_link_attrs(link_id, prior);
                }
            }
            if let Some(trace) = &self.trace {
                trace.lock().unwrap().push(MeasureSpan {
                    machine_rank: self.machine_rank,
                    link_id,
                    start_ms,
                    end_ms,
                });
            }
        }
    }

    fn pass_token(&self) {
        for next in self.ring.successors(self.machine_rank) {
            if self
                .wire
                .request(next, Opcode::Token, Vec::new(), self.cfg.ping_timeout_ms)
                .is_ok()
            {
                self.token_held.store(false, Ordering::SeqCst);
                if self.ring.wraps(self.machine_rank, next) {
                    self.generation.fetch_add(1, Ordering::SeqCst);
                }
                return;
            }
        }
        // every successor unreachable (or the ring is just us): retain the token
    }

    /// The monitoring loop body, run as a dedicated actor or thread. The
    /// `shutdown` closure signals application termination; `ctl.poke` must be
    /// called when its value flips.
    pub fn cycle_loop(&self, shutdown: &dyn Fn() -> bool) {
        loop {
            if shutdown() {
                return;
            }
            let epoch = self.ctl.epoch();
            if self.ctl.enabled() {
                self.run_cycle();
                let deadline = self.runtime.now_ms() + self.ctl.period_ms();
                let wait = self.runtime.wait_on(&self.ctl.cell, Some(deadline), &mut || {
                    shutdown() || self.ctl.epoch() != epoch
                });
                if wait.is_err() {
                    return;
                }
            } else {
                // stopped: stay passive (no wire traffic) until resumed
                let wait = self.runtime.wait_on(&self.ctl.cell, None, &mut || {
                    shutdown() || self.ctl.epoch() != epoch
                });
                if wait.is_err() {
                    return;
                }
            }
        }
    }
}

/// Passive wire-protocol server for one machine.
pub struct QosServer {
    store: Arc<LocalQosStore>,
    global: Option<Arc<GlobalQosStore>>,
    token_held: Arc<AtomicBool>,
}

impl QosServer {
    pub fn new(
        store: Arc<LocalQosStore>,
        global: Option<Arc<GlobalQosStore>>,
        token_held: Arc<AtomicBool>,
    ) -> Arc<Self> {
        Arc::new(QosServer { store, global, token_held })
    }
}

impl WireHandler for QosServer {
    fn handle(&self, op: Opcode, payload: &[u8]) -> (Opcode, Vec<u8>) {
        match op {
            Opcode::Ping => (Opcode::Ping, Vec::new()),
            Opcode::GetMachAttrs => {
                (Opcode::GetMachAttrs, wire::encode_machine_record(&self.store.own_record()))
            }
            Opcode::GetAppView => match &self.global {
                Some(global) => {
                    let (stamp, records) = global.snapshot_records();
                    (Opcode::GetAppView, wire::encode_app_payload(stamp, &records))
                }
                None => (Opcode::Err, wire::encode_error("not the master machine")),
            },
            Opcode::ReportTaskState => match wire::decode_report_task_state(payload) {
                Ok((task_rank, state)) => match self.store.report_task_state(task_rank, state) {
                    Ok(()) => (Opcode::ReportTaskState, Vec::new()),
                    Err(e) => (Opcode::Err, wire::encode_error(&e.to_string())),
                },
                Err(e) => (Opcode::Err, wire::encode_error(&e.to_string())),
            },
            Opcode::ListPids => (Opcode::ListPids, wire::encode_pid_list(&self.store.local_pids())),
            Opcode::EchoSmall | Opcode::EchoBulk => (op, payload.to_vec()),
            Opcode::Token => {
                self.token_held.store(true, Ordering::SeqCst);
                (Opcode::Token, Vec::new())
            }
            Opcode::Err => (Opcode::Err, wire::encode_error("unexpected opcode")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atg::parse_atg;
    use crate::qos::data::{TaskPid, TaskState};

    fn single_machine_store() -> (Arc<Atg>, Arc<LocalQosStore>) {
        let atg = Arc::new(
            parse_atg(
                "machine m host=h port=1 master\ntask a machine=m ports=1 impl=x\ntask b machine=m ports=1 impl=x\nlink a.0 b.0\n",
            )
            .unwrap(),
        );
        let store = Arc::new(LocalQosStore::new(Arc::clone(&atg), 0));
        (atg, store)
    }

    #[test]
    fn server_ping_and_echo() {
        let (atg, store) = single_machine_store();
        let server = QosServer::new(store, Some(Arc::new(GlobalQosStore::new(&atg))), Arc::new(AtomicBool::new(false)));
        assert_eq!(server.handle(Opcode::Ping, &[]), (Opcode::Ping, vec![]));
        let blob: Vec<u8> = (0..65536usize).map(|i| (i % 251) as u8).collect();
        let (op, body) = server.handle(Opcode::EchoBulk, &blob);
        assert_eq!(op, Opcode::EchoBulk);
        assert_eq!(body, blob);
    }

    #[test]
    fn server_report_then_list_pids() {
        let (_atg, store) = single_machine_store();
        let server = QosServer::new(store, None, Arc::new(AtomicBool::new(false)));
        let report = wire::encode_report_task_state(0, &TaskState::Running { pid: TaskPid(77) });
        let (op, _) = server.handle(Opcode::ReportTaskState, &report);
        assert_eq!(op, Opcode::ReportTaskState);
        let (op, body) = server.handle(Opcode::ListPids, &[]);
        assert_eq!(op, Opcode::ListPids);
        assert_eq!(wire::decode_pid_list(&body).unwrap(), vec![TaskPid(77)]);
    }

    #[test]
    fn app_view_refused_off_master() {
        let (_atg, store) = single_machine_store();
        let server = QosServer::new(store, None, Arc::new(AtomicBool::new(false)));
        let (op, _) = server.handle(Opcode::GetAppView, &[]);
        assert_eq!(op, Opcode::Err);
    }

    #[test]
    fn token_frame_sets_flag() {
        let (_atg, store) = single_machine_store();
        let flag = Arc::new(AtomicBool::new(false));
        let server = QosServer::new(store, None, Arc::clone(&flag));
        let (op, _) = server.handle(Opcode::Token, &[]);
        assert_eq!(op, Opcode::Token);
        assert!(flag.load(Ordering::SeqCst));
    }

    #[test]
    fn malformed_report_yields_err_reply() {
        let (_atg, store) = single_machine_store();
        let server = QosServer::new(store, None, Arc::new(AtomicBool::new(false)));
        let (op, body) = server.handle(Opcode::ReportTaskState, b"not kv at all");
        assert_eq!(op, Opcode::Err);
        assert!(!wire::decode_error(&body).is_empty());
    }
}
