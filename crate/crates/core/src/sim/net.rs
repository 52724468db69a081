//! Simulated network: wire-protocol requests and port messages delivered as
//! virtual-clock events with configurable per-pair latency and rate.
//!
//! Server handlers run inline at delivery time (they only touch the shared
//! stores), so a machine answers echo and attribute requests even while its
//! monitoring cycle is busy. A down machine silently drops frames, which the
//! sender observes as a timeout.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use crate::atg::Atg;
use crate::ports::{MsgTransport, PortError, PortMailbox};
use crate::qos::wire::Opcode;
use crate::runtime::{NotifyCell, WireClient, WireError, WireHandler};
use crate::sim::sched::{current_actor, Scheduler};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub latency_ms: f64,
    pub rate_mbps: f64,
}

impl LinkParams {
    pub fn transfer_ms(&self, bytes: usize) -> f64 {
        self.latency_ms + (bytes as f64) * 8.0 / (self.rate_mbps * 1000.0)
    }
}

pub struct NetParams {
    pub default: LinkParams,
    pub loopback: LinkParams,
    /// Overrides keyed by (lower rank, higher rank).
    pub overrides: BTreeMap<(usize, usize), LinkParams>,
}

impl NetParams {
    pub fn between(&self, a: usize, b: usize) -> LinkParams {
        if a == b {
            return self.loopback;
        }
        let key = (a.min(b), a.max(b));
        self.overrides.get(&key).copied().unwrap_or(self.default)
    }
}

struct TaskSlot {
    machine_rank: usize,
    alive: AtomicBool,
    dead: AtomicBool,
}

pub struct SimNet {
    sched: Arc<Scheduler>,
    atg: Arc<Atg>,
    params: NetParams,
    machine_down: Vec<AtomicBool>,
    handlers: Mutex<BTreeMap<usize, Arc<dyn WireHandler>>>,
    mailboxes: Mutex<BTreeMap<(usize, usize), Arc<PortMailbox>>>,
    tasks: Vec<TaskSlot>,
    traffic: Mutex<BTreeMap<(usize, usize, u8), u64>>,
}

impl SimNet {
    pub fn new(sched: Arc<Scheduler>, atg: Arc<Atg>, params: NetParams) -> Arc<Self> {
        let machine_down = (0..atg.num_machines()).map(|_| AtomicBool::new(false)).collect();
        let tasks = atg
            .tasks
            .iter()
            .map(|t| TaskSlot {
                machine_rank: t.machine_rank,
                alive: AtomicBool::new(false),
                dead: AtomicBool::new(false),
            })
            .collect();
        Arc::new(SimNet {
            sched,
            atg,
            params,
            machine_down,
            handlers: Mutex::new(BTreeMap::new()),
            mailboxes: Mutex::new(BTreeMap::new()),
            tasks,
            traffic: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn register_handler(&self, machine_rank: usize, handler: Arc<dyn WireHandler>) {
        self.handlers.lock().unwrap().insert(machine_rank, handler);
    }

    pub fn register_mailbox(&self, task_rank: usize, port_index: usize, mailbox: Arc<PortMailbox>) {
        self.mailboxes.lock().unwrap().insert((task_rank, port_index), mailbox);
    }

    pub fn set_machine_down(&self, machine_rank: usize) {
        self.machine_down[machine_rank].store(true, Ordering::SeqCst);
    }

    pub fn machine_is_down(&self, machine_rank: usize) -> bool {
        self.machine_down[machine_rank].load(Ordering::SeqCst)
    }

    pub fn set_task_alive(&self, task_rank: usize, alive: bool) {
        self.tasks[task_rank].alive.store(alive, Ordering::SeqCst);
    }

    pub fn set_task_dead(&self, task_rank: usize) {
        self.tasks[task_rank].dead.store(true, Ordering::SeqCst);
        self.tasks[task_rank].alive.store(false, Ordering::SeqCst);
    }

    pub fn task_is_alive(&self, task_rank: usize) -> bool {
        self.tasks[task_rank].alive.load(Ordering::SeqCst)
    }

    /// Alive task ranks hosted on a machine (the simulated `ps`).
    pub fn live_tasks_on(&self, machine_rank: usize) -> Vec<usize> {
        self.tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.machine_rank == machine_rank && t.alive.load(Ordering::SeqCst))
            .map(|(rank, _)| rank)
            .collect()
    }

    pub fn traffic_snapshot(&self) -> BTreeMap<(usize, usize, u8), u64> {
        self.traffic.lock().unwrap().clone()
    }

    fn record_traffic(&self, src: usize, dst: usize, opcode: u8) {
        *self.traffic.lock().unwrap().entry((src, dst, opcode)).or_default() += 1;
    }

    fn notify_cell(&self, cell: &NotifyCell) {
        cell.real_notify();
        for actor in cell.take_sim_waiters() {
            self.sched.make_ready(actor);
        }
    }
}

struct ResponseSlot {
    data: Mutex<Option<(Opcode, Vec<u8>)>>,
    waiter: usize,
}

/// Wire-protocol client bound to one source machine.
pub struct SimWireClient {
    net: Arc<SimNet>,
    src_machine: usize,
}

impl SimWireClient {
    pub fn new(net: Arc<SimNet>, src_machine: usize) -> Arc<Self> {
        Arc::new(SimWireClient { net, src_machine })
    }
}

impl WireClient for SimWireClient {
    fn now_ms(&self) -> f64 {
        self.net.sched.now_ms()
    }

    fn request(
        &self,
        machine_rank: usize,
        op: Opcode,
        payload: Vec<u8>,
        timeout_ms: f64,
    ) -> Result<(Opcode, Vec<u8>), WireError> {
        let actor = current_actor().expect("wire requests must come from a simulated actor");
        let net = Arc::clone(&self.net);
        self.net.record_traffic(self.src_machine, machine_rank, op as u8);

        let link = self.net.params.between(self.src_machine, machine_rank);
        let out_delay = link.transfer_ms(5 + payload.len());
        let slot = Arc::new(ResponseSlot { data: Mutex::new(None), waiter: actor });

        {
            let slot = Arc::clone(&slot);
            let net2 = Arc::clone(&net);
            let dst = machine_rank;
            self.net.sched.schedule_call_after(
                out_delay,
                Box::new(move || {
                    if net2.machine_is_down(dst) {
                        return; // dropped; requester times out
                    }
                    let handler = net2.handlers.lock().unwrap().get(&dst).cloned();
                    let Some(handler) = handler else { return };
                    let (resp_op, resp_payload) = handler.handle(op, &payload);
                    let back_delay = link.transfer_ms(5 + resp_payload.len());
                    let net3 = Arc::clone(&net2);
                    net2.sched.schedule_call_after(
                        back_delay,
                        Box::new(move || {
                            *slot.data.lock().unwrap() = Some((resp_op, resp_payload));
                            net3.sched.make_ready(slot.waiter);
                        }),
                    );
                }),
            );
        }

        let deadline = self.net.sched.now_ms() + timeout_ms;
        loop {
            if let Some(resp) = slot.data.lock().unwrap().take() {
                if resp.0 == Opcode::Err {
                    return Err(WireError::Remote(crate::qos::wire::decode_error(&resp.1)));
                }
                return Ok(resp);
            }
            if self.net.sched.now_ms() >= deadline {
                return Err(WireError::Timeout);
            }
            self.net
                .sched
                .block_current(actor, Some(deadline))
                .map_err(|_| WireError::Unreachable("interrupted".into()))?;
        }
    }
}

/// Port-message transport over the simulated network.
pub struct SimMsgNet {
    net: Arc<SimNet>,
}

impl SimMsgNet {
    pub fn new(net: Arc<SimNet>) -> Arc<Self> {
        Arc::new(SimMsgNet { net })
    }
}

const MSG_HEADER_BYTES: usize = 13;

impl MsgTransport for SimMsgNet {
    fn deliver(
        &self,
        src_task: usize,
        src_port: usize,
        key: u32,
        payload: Vec<u8>,
        await_receipt: bool,
        timeout_ms: f64,
        sink: Option<Arc<Mutex<Option<PortError>>>>,
    ) -> Result<(), PortError> {
        let net = Arc::clone(&self.net);
        let peer = net
            .atg
            .port_peer(src_task, src_port)
            .map_err(|e| PortError::PeerUnreachable(e.to_string()))?;
        let src_machine = net.atg.tasks[src_task].machine_rank;
        let link = net.params.between(src_machine, peer.peer_machine_rank);
        let out_delay = link.transfer_ms(MSG_HEADER_BYTES + payload.len());
        let back_delay = link.transfer_ms(5);

        let slot: Arc<Mutex<Option<Result<(), PortError>>>> = Arc::new(Mutex::new(None));
        let waiter = current_actor();

        {
            let net2 = Arc::clone(&net);
            let slot2 = Arc::clone(&slot);
            let sink2 = sink.clone();
            let dest_task = peer.peer_task_rank;
            let dest_port = peer.peer_port_index;
            let dest_machine = peer.peer_machine_rank;
            net.sched.schedule_call_after(
                out_delay,
                Box::new(move || {
                    let verdict: Result<(), PortError> = if net2.machine_is_down(dest_machine) {
                        Err(PortError::PeerUnreachable("machine down".into()))
                    } else if net2.tasks[dest_task].dead.load(Ordering::SeqCst) {
                        Err(PortError::PeerDead)
                    } else {
                        let mailbox = net2.mailboxes.lock().unwrap().get(&(dest_task, dest_port)).cloned();
                        match mailbox {
                            Some(mailbox) => {
                                mailbox.push(key, payload);
                                net2.notify_cell(&mailbox.cell);
                                Ok(())
                            }
                            None => Err(PortError::PeerUnreachable("no such port".into())),
                        }
                    };
                    match &verdict {
                        Ok(()) => {
                            let net3 = Arc::clone(&net2);
                            let slot3 = Arc::clone(&slot2);
                            net2.sched.schedule_call_after(
                                back_delay,
                                Box::new(move || {
                                    *slot3.lock().unwrap() = Some(Ok(()));
                                    if let Some(actor) = waiter {
                                        net3.sched.make_ready(actor);
                                    }
                                }),
                            );
                        }
                        Err(e) => {
                            if let Some(sink) = &sink2 {
                                let mut pending = sink.lock().unwrap();
                                if pending.is_none() {
                                    *pending = Some(e.clone());
                                }
                            }
                            let net3 = Arc::clone(&net2);
                            let slot3 = Arc::clone(&slot2);
                            let e = e.clone();
                            net2.sched.schedule_call_after(
                                back_delay,
                                Box::new(move || {
                                    *slot3.lock().unwrap() = Some(Err(e));
                                    if let Some(actor) = waiter {
                                        net3.sched.make_ready(actor);
                                    }
                                }),
                            );
                        }
                    }
                }),
            );
        }

        if !await_receipt {
            return Ok(());
        }
        let actor = waiter.expect("sync writes must come from a simulated actor");
        let deadline = net.sched.now_ms() + timeout_ms;
        loop {
            if let Some(verdict) = slot.lock().unwrap().take() {
                return verdict;
            }
            if net.sched.now_ms() >= deadline {
                return Err(PortError::PeerUnreachable("receipt timeout".into()));
            }
            net.sched.block_current(actor, Some(deadline)).map_err(PortError::from)?;
        }
    }
}
