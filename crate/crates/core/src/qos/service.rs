//! The QoS API facade a task instantiates: view retrieval, attribute
//! queries, best-port and sorting utilities, static lookups, middleware
//! management, and the fault-tolerance state accessors.
//!
//! The API is anonymous: every input and output identifies entities by rank,
//! port index, or variable name — never by hostname. Message passing is not
//! available on this object.

use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::atg::Atg;
use crate::qos::data::{
    assemble_app_view, AppView, GlobalQosStore, LocalQosStore, MachState, MachView, PortView,
    TaskView,
};
use crate::qos::manager::ManagerCtl;
use crate::qos::wire::{self, Opcode};
use crate::runtime::{Runtime, WireClient};

/// Every queryable attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResourceAttribute {
    OsType,
    CpuSpeed,
    NumOfCpus,
    Workload,
    EffectiveSpeed,
    FreeRamSize,
    FreeSwapSize,
    MachState,
    TaskState,
    LinkLatency,
    LinkThroughput,
}

impl ResourceAttribute {
    pub fn is_machine_attr(self) -> bool {
        matches!(
            self,
            ResourceAttribute::OsType
                | ResourceAttribute::CpuSpeed
                | ResourceAttribute::NumOfCpus
                | ResourceAttribute::Workload
                | ResourceAttribute::EffectiveSpeed
                | ResourceAttribute::FreeRamSize
                | ResourceAttribute::FreeSwapSize
                | ResourceAttribute::MachState
        )
    }

    pub fn is_link_attr(self) -> bool {
        matches!(self, ResourceAttribute::LinkLatency | ResourceAttribute::LinkThroughput)
    }
}

/// A returned attribute: a scalar (states use their numeric codes) or text.
#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Number(f64),
    Text(String),
}

impl AttrValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            AttrValue::Number(v) => Some(*v),
            AttrValue::Text(_) => None,
        }
    }
}

/// Which entity of the view an attribute query targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    SelfEntity,
    PeerTask,
    PeerMach,
}

/// The view a query runs against.
#[derive(Debug, Clone, Copy)]
pub enum ViewRef<'a> {
    Mach(&'a MachView),
    Task(&'a TaskView),
    Port(&'a PortView),
}

#[derive(Debug, Error, PartialEq)]
pub enum ServiceError {
    #[error("port index {0} out of range ({1} ports)")]
    BadPortIndex(usize, usize),
    #[error("attribute {0:?} is not meaningful for scope {1:?}")]
    AttributeScope(ResourceAttribute, Scope),
    #[error("attribute {0:?} is not sortable")]
    NotSortable(ResourceAttribute),
    #[error("no eligible port")]
    NoEligiblePort,
    #[error("global view unavailable: {0}")]
    GlobalViewUnavailable(String),
    #[error("{0}")]
    InvalidPeriod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortOrder {
    Ascending,
    Descending,
}

/// One per task. Reads are snapshots; no method mutates application state.
pub struct QosService {
    atg: Arc<Atg>,
    task_rank: usize,
    machine_rank: usize,
    master_rank: usize,
    store: Arc<LocalQosStore>,
    global: Option<Arc<GlobalQosStore>>,
    wire: Arc<dyn WireClient>,
    runtime: Arc<dyn Runtime>,
    manager_ctl: Arc<ManagerCtl>,
    ping_timeout_ms: f64,
    ping_retry_pause_ms: f64,
    /// AppView fetched from the master, valid while the local stamp holds.
    app_cache: Mutex<Option<(u64, AppView)>>,
}

impl QosService {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        atg: Arc<Atg>,
        task_rank: usize,
        store: Arc<LocalQosStore>,
        global: Option<Arc<GlobalQosStore>>,
        wire: Arc<dyn WireClient>,
        runtime: Arc<dyn Runtime>,
        manager_ctl: Arc<ManagerCtl>,
        ping_timeout_ms: f64,
        ping_retry_pause_ms: f64,
    ) -> Self {
        let machine_rank = atg.tasks[task_rank].machine_rank;
        let master_rank = atg.master_rank();
        QosService {
            atg,
            task_rank,
            machine_rank,
            master_rank,
            store,
            global,
            wire,
            runtime,
            manager_ctl,
            ping_timeout_ms,
            ping_retry_pause_ms,
            app_cache: Mutex::new(None),
        }
    }

    // --- view retrieval ---------------------------------------------------

    /// Application-wide snapshot. Tasks on the master read the global store
    /// directly; remote tasks fetch it over the wire and cache the reply
    /// until the local measurement stamp changes.
    pub fn get_app_view(&self) -> Result<AppView, ServiceError> {
        if let Some(global) = &self.global {
            return Ok(global.snapshot_app_view());
        }
        let local_stamp = self.store.stamp();
        if let Some((stamp, view)) = self.app_cache.lock().unwrap().as_ref() {
            if *stamp == local_stamp {
                return Ok(view.clone());
            }
        }
        let (op, body) = self
            .wire
            .request(self.master_rank, Opcode::GetAppView, Vec::new(), self.ping_timeout_ms)
            .map_err(|e| ServiceError::GlobalViewUnavailable(e.to_string()))?;
        if op != Opcode::GetAppView {
            return Err(ServiceError::GlobalViewUnavailable("unexpected reply".into()));
        }
        let (stamp, records) = wire::decode_app_payload(&body)
            .map_err(|e| ServiceError::GlobalViewUnavailable(e.to_string()))?;
        let view = assemble_app_view(&self.atg, stamp, &records);
        *self.app_cache.lock().unwrap() = Some((local_stamp, view.clone()));
        Ok(view)
    }

    /// This machine's view; local store only, no remote round trip.
    pub fn get_mach_view(&self) -> MachView {
        self.store.snapshot_mach_view()
    }

    /// This task's view; local store only, no remote round trip.
    pub fn get_task_view(&self) -> TaskView {
        self.store.snapshot_task_view(self.task_rank).expect("own task is local")
    }

    pub fn get_port_view(&self, port_index: usize) -> Result<PortView, ServiceError> {
        let view = self.get_task_view();
        let count = view.ports.len();
        view.ports
            .into_iter()
            .find(|p| p.port_index == port_index)
            .ok_or(ServiceError::BadPortIndex(port_index, count))
    }

    // --- attribute access ---------------------------------------------------

    fn machine_attr_value(
        attrs: &crate::qos::data::MachineAttributes,
        attr: ResourceAttribute,
    ) -> Option<AttrValue> {
        Some(match attr {
            ResourceAttribute::OsType => AttrValue::Text(attrs.os_type.clone()),
            ResourceAttribute::CpuSpeed => AttrValue::Number(attrs.cpu_speed_mhz),
            ResourceAttribute::NumOfCpus => AttrValue::Number(attrs.num_cpus as f64),
            ResourceAttribute::Workload => AttrValue::Number(attrs.workload),
            ResourceAttribute::EffectiveSpeed => AttrValue::Number(attrs.effective_speed_mhz),
            ResourceAttribute::FreeRamSize => AttrValue::Number(attrs.free_ram_bytes as f64),
            ResourceAttribute::FreeSwapSize => AttrValue::Number(attrs.free_swap_bytes as f64),
            ResourceAttribute::MachState => AttrValue::Number(attrs.mach_state.code() as f64),
            _ => return None,
        })
    }

    /// Two-ping check against a machine, bypassing the cached state.
    fn fresh_mach_state(&self, machine_rank: usize) -> MachState {
        if self.wire.ping(machine_rank, self.ping_timeout_ms) {
            return MachState::Up;
        }
        let _ = self.runtime.sleep_ms(self.ping_retry_pause_ms);
        if self.wire.ping(machine_rank, self.ping_timeout_ms) {
            MachState::Up
        } else {
            MachState::Down
        }
    }

    /// Reads one attribute out of a view. `force_fresh_ping` applies to
    /// MACHSTATE only and triggers an immediate two-ping check instead of
    /// returning the cached state.
    pub fn get_attribute(
        &self,
        view: ViewRef<'_>,
        attr: ResourceAttribute,
        scope: Scope,
        force_fresh_ping: bool,
    ) -> Result<AttrValue, ServiceError> {
        match (view, scope) {
            (ViewRef::Port(pv), Scope::PeerTask) => {
                if attr != ResourceAttribute::TaskState {
                    return Err(ServiceError::AttributeScope(attr, scope));
                }
                Ok(AttrValue::Number(pv.peer_task_state.code() as f64))
            }
            (ViewRef::Port(pv), Scope::PeerMach) => {
                if attr == ResourceAttribute::MachState && force_fresh_ping {
                    let peer_machine = self.atg.tasks[pv.peer_task_rank].machine_rank;
                    return Ok(AttrValue::Number(self.fresh_mach_state(peer_machine).code() as f64));
                }
                Self::machine_attr_value(&pv.peer_machine, attr)
                    .ok_or(ServiceError::AttributeScope(attr, scope))
            }
            (ViewRef::Port(pv), Scope::SelfEntity) => match attr {
                ResourceAttribute::LinkLatency => Ok(AttrValue::Number(pv.link.latency_ms)),
                ResourceAttribute::LinkThroughput => Ok(AttrValue::Number(pv.link.throughput_mbps)),
                _ => Err(ServiceError::AttributeScope(attr, scope)),
            },
            (ViewRef::Task(tv), Scope::SelfEntity) => {
                if attr != ResourceAttribute::TaskState {
                    return Err(ServiceError::AttributeScope(attr, scope));
                }
                Ok(AttrValue::Number(tv.state.code() as f64))
            }
            (ViewRef::Mach(mv), Scope::SelfEntity) => {
                if attr == ResourceAttribute::MachState && force_fresh_ping {
                    return Ok(AttrValue::Number(self.fresh_mach_state(mv.rank).code() as f64));
                }
                Self::machine_attr_value(&mv.attrs, attr)
                    .ok_or(ServiceError::AttributeScope(attr, scope))
            }
            _ => Err(ServiceError::AttributeScope(attr, scope)),
        }
    }

    /// Shorthand for the peer-task state code on one of this task's ports.
    pub fn peer_task_state_code(&self, port_index: usize) -> Result<i64, ServiceError> {
        let pv = self.get_port_view(port_index)?;
        Ok(pv.peer_task_state.code())
    }

    fn sortable_port_value(pv: &PortView, attr: ResourceAttribute) -> Result<f64, ServiceError> {
        if attr == ResourceAttribute::OsType {
            return Err(ServiceError::NotSortable(attr));
        }
        if attr.is_link_attr() {
            return Ok(match attr {
                ResourceAttribute::LinkLatency => pv.link.latency_ms,
                _ => pv.link.throughput_mbps,
            });
        }
        if attr.is_machine_attr() {
            return Self::machine_attr_value(&pv.peer_machine, attr)
                .and_then(|v| v.as_number())
                .ok_or(ServiceError::NotSortable(attr));
        }
        Err(ServiceError::NotSortable(attr))
    }

    /// Index of the port whose peer machine (or link) attribute is extremal.
    /// Ports whose peer machine is down are excluded; ties go to the lowest
    /// port index.
    pub fn best_port_index(
        &self,
        attr: ResourceAttribute,
        direction: Direction,
    ) -> Result<usize, ServiceError> {
        let view = self.get_task_view();
        let mut best: Option<(usize, f64)> = None;
        for pv in &view.ports {
            if pv.peer_machine.mach_state == MachState::Down {
                continue;
            }
            let value = Self::sortable_port_value(pv, attr)?;
            let better = match (&best, direction) {
                (None, _) => true,
                (Some((_, b)), Direction::Max) => value > *b,
                (Some((_, b)), Direction::Min) => value < *b,
            };
            if better {
                best = Some((pv.port_index, value));
            }
        }
        best.map(|(i, _)| i).ok_or(ServiceError::NoEligiblePort)
    }

    /// Stable sort of this task's port indices by a machine or link
    /// attribute; the underlying views are untouched.
    pub fn sort_port_views(
        &self,
        attr: ResourceAttribute,
        order: SortOrder,
    ) -> Result<Vec<usize>, ServiceError> {
        let view = self.get_task_view();
        let mut keyed: Vec<(usize, f64)> = Vec::with_capacity(view.ports.len());
        for pv in &view.ports {
            keyed.push((pv.port_index, Self::sortable_port_value(pv, attr)?));
        }
        keyed.sort_by(|a, b| {
            let cmp = a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal);
            match order {
                SortOrder::Ascending => cmp,
                SortOrder::Descending => cmp.reverse(),
            }
        });
        Ok(keyed.into_iter().map(|(i, _)| i).collect())
    }

    // --- general statics ----------------------------------------------------

    pub fn get_meas_stamp(&self) -> u64 {
        self.store.stamp()
    }

    pub fn get_task_rank(&self) -> usize {
        self.task_rank
    }

    pub fn get_task_name(&self) -> String {
        self.atg.tasks[self.task_rank].variable_name.clone()
    }

    pub fn get_mach_rank(&self) -> usize {
        self.machine_rank
    }

    pub fn num_tasks(&self) -> usize {
        self.atg.num_tasks()
    }

    pub fn num_machines(&self) -> usize {
        self.atg.num_machines()
    }

    // --- middleware management ----------------------------------------------

    pub fn stop_monitoring(&self) {
        self.manager_ctl.stop(self.runtime.as_ref());
    }

    pub fn resume_monitoring(&self) {
        self.manager_ctl.resume(self.runtime.as_ref());
    }

    pub fn set_monitoring_period(&self, period_ms: f64) -> Result<(), ServiceError> {
        self.manager_ctl
            .set_period(self.runtime.as_ref(), period_ms)
            .map_err(ServiceError::InvalidPeriod)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atg::parse_atg;
    use crate::qos::data::{LinkAttributes, MachineAttributes, MachineRecord, TaskState};
    use crate::qos::manager::ManagerConfig;
    use crate::runtime::{RealRuntime, WireError};
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Wire stub: counts requests, answers pings, serves a canned app view.
    struct StubWire {
        requests: AtomicUsize,
        app_stamp: u64,
        unreachable: bool,
    }

    impl WireClient for StubWire {
        fn now_ms(&self) -> f64 {
            0.0
        }
        fn request(
            &self,
            _machine_rank: usize,
            op: Opcode,
            _payload: Vec<u8>,
            _timeout_ms: f64,
        ) -> Result<(Opcode, Vec<u8>), WireError> {
            self.requests.fetch_add(1, Ordering::SeqCst);
            if self.unreachable {
                return Err(WireError::Timeout);
            }
            match op {
                Opcode::Ping => Ok((Opcode::Ping, Vec::new())),
                Opcode::GetAppView => {
                    let records: BTreeMap<usize, MachineRecord> = BTreeMap::new();
                    Ok((Opcode::GetAppView, wire::encode_app_payload(self.app_stamp, &records)))
                }
                other => Ok((other, Vec::new())),
            }
        }
    }

    fn fig2_atg() -> Arc<Atg> {
        Arc::new(
            parse_atg(
                "\
machine m1 host=host-a port=7700 master
machine m2 host=host-b port=7710
machine m3 host=host-c port=7720
task mgr machine=m1 ports=2 impl=manager
task w1 machine=m2 ports=1 impl=worker
task w2 machine=m3 ports=1 impl=worker
link mgr.0 w1.0
link mgr.1 w2.0
",
            )
            .unwrap(),
        )
    }

    struct Fixture {
        service: QosService,
        store: Arc<LocalQosStore>,
        wire: Arc<StubWire>,
    }

    fn fixture_with(unreachable: bool, on_master: bool) -> Fixture {
        let atg = fig2_atg();
        let store = Arc::new(LocalQosStore::new(Arc::clone(&atg), 0));
        let wire = Arc::new(StubWire {
            requests: AtomicUsize::new(0),
            app_stamp: 4,
            unreachable,
        });
        let runtime = Arc::new(RealRuntime::new());
        let ctl = {
            let manager_like = ManagerConfig::default();
            // build a control block the same way the manager does
            let m = crate::qos::manager::QosManager::new(
                Arc::clone(&atg),
                0,
                Arc::clone(&store),
                None,
                Arc::clone(&wire) as Arc<dyn WireClient>,
                Arc::new(NoProbe),
                Arc::clone(&runtime) as Arc<dyn Runtime>,
                manager_like,
                None,
            );
            Arc::clone(&m.ctl)
        };
        let global = on_master.then(|| Arc::new(GlobalQosStore::new(&atg)));
        let service = QosService::new(
            Arc::clone(&atg),
            0,
            Arc::clone(&store),
            global,
            Arc::clone(&wire) as Arc<dyn WireClient>,
            runtime as Arc<dyn Runtime>,
            ctl,
            100.0,
            1.0,
        );
        Fixture { service, store, wire }
    }

    fn fixture() -> Fixture {
        fixture_with(false, false)
    }

    struct NoProbe;
    impl crate::probes::ProbeProvider for NoProbe {
        fn statics(&self, _m: usize) -> Result<crate::probes::MachineStatics, crate::probes::ProbeError> {
            Err(crate::probes::ProbeError::Provider("none".into()))
        }
        fn workload(&self, _m: usize) -> Result<f64, crate::probes::ProbeError> {
            Ok(0.0)
        }
        fn free_ram_bytes(&self, _m: usize) -> Result<u64, crate::probes::ProbeError> {
            Ok(0)
        }
        fn free_swap_bytes(&self, _m: usize) -> Result<u64, crate::probes::ProbeError> {
            Ok(0)
        }
        fn ping(&self, _m: usize, _t: f64) -> bool {
            true
        }
        fn list_pids(&self, _m: usize) -> Result<Vec<crate::qos::data::TaskPid>, crate::probes::ProbeError> {
            Ok(vec![])
        }
    }

    fn seed_peers(store: &LocalQosStore) {
        // m2: fast machine, light load; link 0 slower than link 1
        let mut m2 = MachineRecord::default();
        m2.attrs = MachineAttributes {
            os_type: "simos".into(),
            cpu_speed_mhz: 500.0,
            num_cpus: 1,
            workload: 3.0,
            effective_speed_mhz: 125.0,
            free_ram_bytes: 64,
            free_swap_bytes: 64,
            mach_state: MachState::Up,
        };
        m2.task_states.insert(1, TaskState::Dead);
        m2.links.insert(
            0,
            LinkAttributes { latency_ms: 2.0, throughput_mbps: 90.0, last_measured_stamp: 1, stale: false },
        );
        store.write_peer_record(1, m2).unwrap();

        let mut m3 = MachineRecord::default();
        m3.attrs = MachineAttributes {
            os_type: "simos".into(),
            cpu_speed_mhz: 333.0,
            num_cpus: 1,
            workload: 1.0,
            effective_speed_mhz: 166.5,
            free_ram_bytes: 32,
            free_swap_bytes: 32,
            mach_state: MachState::Up,
        };
        m3.task_states.insert(2, TaskState::Running { pid: crate::qos::data::TaskPid(9) });
        store.write_peer_record(2, m3).unwrap();
        store
            .write_link_attrs(
                1,
                LinkAttributes { latency_ms: 1.0, throughput_mbps: 95.0, last_measured_stamp: 1, stale: false },
            )
            .unwrap();
    }

    #[test]
    fn task_view_has_two_ports_without_wire_traffic() {
        let f = fixture();
        let view = f.service.get_task_view();
        assert_eq!(view.ports.len(), 2);
        assert_eq!(f.wire.requests.load(Ordering::SeqCst), 0, "local views need no round trip");
    }

    #[test]
    fn port_view_peers_resolve() {
        let f = fixture();
        seed_peers(&f.store);
        let pv = f.service.get_port_view(1).unwrap();
        assert_eq!(pv.peer_machine.cpu_speed_mhz, 333.0);
        assert_eq!(pv.peer_task_name, "w2");
        assert!(matches!(f.service.get_port_view(2), Err(ServiceError::BadPortIndex(2, 2))));
    }

    #[test]
    fn dead_peer_task_reads_minus_one() {
        let f = fixture();
        seed_peers(&f.store);
        let pv = f.service.get_port_view(0).unwrap();
        let v = f
            .service
            .get_attribute(ViewRef::Port(&pv), ResourceAttribute::TaskState, Scope::PeerTask, false)
            .unwrap();
        assert_eq!(v, AttrValue::Number(-1.0));
        assert_eq!(f.service.peer_task_state_code(0).unwrap(), -1);
        assert_eq!(f.service.peer_task_state_code(1).unwrap(), 1);
    }

    #[test]
    fn peer_machine_workload_reads_back() {
        let f = fixture();
        seed_peers(&f.store);
        let pv = f.service.get_port_view(0).unwrap();
        let v = f
            .service
            .get_attribute(ViewRef::Port(&pv), ResourceAttribute::Workload, Scope::PeerMach, false)
            .unwrap();
        assert_eq!(v, AttrValue::Number(3.0));
    }

    #[test]
    fn workload_on_task_scope_is_rejected() {
        let f = fixture();
        let tv = f.service.get_task_view();
        let err = f.service.get_attribute(
            ViewRef::Task(&tv),
            ResourceAttribute::Workload,
            Scope::SelfEntity,
            false,
        );
        assert!(matches!(err, Err(ServiceError::AttributeScope(_, _))));
    }

    #[test]
    fn fig7_accessors_cover_all_four_forms() {
        let f = fixture();
        seed_peers(&f.store);
        let pv = f.service.get_port_view(0).unwrap();
        // 1. peer-port task state
        assert!(f
            .service
            .get_attribute(ViewRef::Port(&pv), ResourceAttribute::TaskState, Scope::PeerTask, false)
            .is_ok());
        // 2. peer-port machine state (cached)
        let v = f
            .service
            .get_attribute(ViewRef::Port(&pv), ResourceAttribute::MachState, Scope::PeerMach, false)
            .unwrap();
        assert_eq!(v, AttrValue::Number(1.0));
        // 3. machine view state
        let mv = f.service.get_mach_view();
        assert!(f
            .service
            .get_attribute(ViewRef::Mach(&mv), ResourceAttribute::MachState, Scope::SelfEntity, false)
            .is_ok());
        // 4. task view state
        let tv = f.service.get_task_view();
        let v = f
            .service
            .get_attribute(ViewRef::Task(&tv), ResourceAttribute::TaskState, Scope::SelfEntity, false)
            .unwrap();
        assert_eq!(v, AttrValue::Number(0.0)); // init
    }

    #[test]
    fn force_fresh_ping_bypasses_cache() {
        let f = fixture();
        seed_peers(&f.store);
        let pv = f.service.get_port_view(0).unwrap();
        let before = f.wire.requests.load(Ordering::SeqCst);
        let v = f
            .service
            .get_attribute(ViewRef::Port(&pv), ResourceAttribute::MachState, Scope::PeerMach, true)
            .unwrap();
        assert_eq!(v, AttrValue::Number(1.0));
        assert!(f.wire.requests.load(Ordering::SeqCst) > before, "fresh ping hit the wire");
    }

    #[test]
    fn best_port_follows_cpu_speed_and_throughput() {
        let f = fixture();
        seed_peers(&f.store);
        // m2 has the highest CPUSpeed -> port 0
        assert_eq!(f.service.best_port_index(ResourceAttribute::CpuSpeed, Direction::Max).unwrap(), 0);
        // link 1 has the highest throughput -> port 1
        assert_eq!(
            f.service.best_port_index(ResourceAttribute::LinkThroughput, Direction::Max).unwrap(),
            1
        );
        // ties break to the lowest port index
        let tied = fixture();
        assert_eq!(tied.service.best_port_index(ResourceAttribute::Workload, Direction::Max).unwrap(), 0);
    }

    #[test]
    fn best_port_excludes_down_machines() {
        let f = fixture();
        seed_peers(&f.store);
        f.store.mark_peer_down(1).unwrap();
        assert_eq!(f.service.best_port_index(ResourceAttribute::CpuSpeed, Direction::Max).unwrap(), 1);
        f.store.mark_peer_down(2).unwrap();
        assert_eq!(
            f.service.best_port_index(ResourceAttribute::CpuSpeed, Direction::Max),
            Err(ServiceError::NoEligiblePort)
        );
    }

    #[test]
    fn sorting_is_stable_and_reversible() {
        let f = fixture();
        seed_peers(&f.store);
        // workloads: port0 -> 3.0, port1 -> 1.0
        assert_eq!(
            f.service.sort_port_views(ResourceAttribute::Workload, SortOrder::Ascending).unwrap(),
            vec![1, 0]
        );
        assert_eq!(
            f.service.sort_port_views(ResourceAttribute::Workload, SortOrder::Descending).unwrap(),
            vec![0, 1]
        );
        // all-equal values keep declaration order (stability)
        let plain = fixture();
        assert_eq!(
            plain.service.sort_port_views(ResourceAttribute::Workload, SortOrder::Ascending).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            plain.service.sort_port_views(ResourceAttribute::OsType, SortOrder::Ascending),
            Err(ServiceError::NotSortable(ResourceAttribute::OsType))
        );
    }

    #[test]
    fn best_port_agrees_with_descending_sort() {
        let f = fixture();
        seed_peers(&f.store);
        for attr in [
            ResourceAttribute::CpuSpeed,
            ResourceAttribute::Workload,
            ResourceAttribute::EffectiveSpeed,
            ResourceAttribute::LinkLatency,
            ResourceAttribute::LinkThroughput,
            ResourceAttribute::FreeRamSize,
        ] {
            let best = f.service.best_port_index(attr, Direction::Max).unwrap();
            let sorted = f.service.sort_port_views(attr, SortOrder::Descending).unwrap();
            assert_eq!(best, sorted[0], "attr {:?}", attr);
        }
    }

    #[test]
    fn statics_come_from_the_task_graph() {
        let f = fixture();
        assert_eq!(f.service.num_machines(), 3);
        assert_eq!(f.service.num_tasks(), 3);
        assert_eq!(f.service.get_task_rank(), 0);
        assert_eq!(f.service.get_task_name(), "mgr");
        assert_eq!(f.service.get_mach_rank(), 0);
        assert_eq!(f.service.get_meas_stamp(), 0);
    }

    #[test]
    fn app_view_on_master_machine_reads_global_directly() {
        let f = fixture_with(false, true);
        let view = f.service.get_app_view().unwrap();
        assert_eq!(view.stamp, 0);
        assert_eq!(view.machines.len(), 3);
        assert_eq!(f.wire.requests.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn remote_app_view_fetches_then_caches_by_stamp() {
        let f = fixture();
        let v1 = f.service.get_app_view().unwrap();
        assert_eq!(v1.stamp, 4);
        assert_eq!(f.wire.requests.load(Ordering::SeqCst), 1);
        // cached while the local stamp is unchanged
        let _ = f.service.get_app_view().unwrap();
        assert_eq!(f.wire.requests.load(Ordering::SeqCst), 1);
        // a new local stamp invalidates the cache
        f.store.bump_stamp();
        let _ = f.service.get_app_view().unwrap();
        assert_eq!(f.wire.requests.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn unreachable_master_reports_global_view_unavailable() {
        let f = fixture_with(true, false);
        assert!(matches!(
            f.service.get_app_view(),
            Err(ServiceError::GlobalViewUnavailable(_))
        ));
    }

    #[test]
    fn no_hostname_leaks_from_any_view() {
        let f = fixture();
        seed_peers(&f.store);
        let hosts = ["host-a", "host-b", "host-c"];
        let dumps = [
            format!("{:?}", f.service.get_task_view()),
            format!("{:?}", f.service.get_mach_view()),
            format!("{:?}", f.service.get_port_view(0).unwrap()),
            format!("{:?}", f.service.get_app_view().unwrap()),
        ];
        for dump in &dumps {
            for host in &hosts {
                assert!(!dump.contains(host), "hostname {} leaked: {}", host, dump);
            }
        }
    }
}
