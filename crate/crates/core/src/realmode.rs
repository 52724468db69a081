//! Real deployment: one OS process per machine, TCP transports, wall-clock
//! monitoring. Task bodies, the QoS manager, and the wire server are the
//! same code that runs in simulation; only the runtime and transports differ.
//!
//! Each machine process binds two listeners from the task graph: the QoS
//! wire protocol on `base_port` and port messages on `base_port + 1000`.
//! One connection carries one request/response (or one message/receipt).

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::atg::Atg;
use crate::circuit::{CircuitSpec, ManagerCfg, ManagerOutcome, WorkerCfg};
use crate::harness::run::component_body;
use crate::ports::{
    decode_msg_frame, encode_msg_frame, MsgTransport, Port, PortError, PortMailbox, MSG_ACK,
    MSG_NACK,
};
use crate::probes::host::HostProbeProvider;
use crate::qos::data::{GlobalQosStore, LocalQosStore, TaskState};
use crate::qos::manager::{ManagerConfig, QosManager, QosServer};
use crate::qos::service::QosService;
use crate::qos::wire::{decode_frame, encode_frame, Opcode, MAX_FRAME_BYTES};
use crate::runtime::{
    next_task_pid, RealRuntime, Runtime, TaskCtx, TaskError, WireClient, WireError, WireHandler,
};

pub const MSG_PORT_OFFSET: u16 = 1000;

fn read_exact_timeout(stream: &mut TcpStream, buf: &mut [u8]) -> std::io::Result<()> {
    stream.read_exact(buf)
}

/// Reads one length-prefixed frame body (length word included in the result).
fn read_frame(stream: &mut TcpStream) -> std::io::Result<Vec<u8>> {
    let mut len_buf = [0u8; 4];
    read_exact_timeout(stream, &mut len_buf)?;
    let len = u32::from_be_bytes(len_buf) as usize;
    if len == 0 || len > MAX_FRAME_BYTES {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "bad frame length"));
    }
    let mut body = vec![0u8; len];
    read_exact_timeout(stream, &mut body)?;
    let mut frame = Vec::with_capacity(4 + len);
    frame.extend_from_slice(&len_buf);
    frame.extend_from_slice(&body);
    Ok(frame)
}

fn addr_of(atg: &Atg, machine_rank: usize, offset: u16) -> String {
    let decl = &atg.machines[machine_rank];
    format!("{}:{}", decl.host, decl.base_port + offset)
}

fn connect(addr: &str, timeout_ms: f64) -> std::io::Result<TcpStream> {
    let timeout = Duration::from_secs_f64((timeout_ms / 1000.0).max(0.001));
    let mut last_err = std::io::Error::new(std::io::ErrorKind::NotFound, "no address");
    let addrs: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::NotFound, e))?
        .collect();
    for a in addrs {
        match TcpStream::connect_timeout(&a, timeout) {
            Ok(stream) => {
                stream.set_read_timeout(Some(timeout)).ok();
                stream.set_write_timeout(Some(timeout)).ok();
                stream.set_nodelay(true).ok();
                return Ok(stream);
            }
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}

/// TCP wire-protocol client; addresses come from the task graph.
pub struct TcpWireClient {
    atg: Arc<Atg>,
    runtime: Arc<RealRuntime>,
}

impl TcpWireClient {
    pub fn new(atg: Arc<Atg>, runtime: Arc<RealRuntime>) -> Arc<Self> {
        Arc::new(TcpWireClient { atg, runtime })
    }
}

impl WireClient for TcpWireClient {
    fn now_ms(&self) -> f64 {
        self.runtime.now_ms()
    }

    fn request(
        &self,
        machine_rank: usize,
        op: Opcode,
        payload: Vec<u8>,
        timeout_ms: f64,
    ) -> Result<(Opcode, Vec<u8>), WireError> {
        let addr = addr_of(&self.atg, machine_rank, 0);
        let mut stream =
            connect(&addr, timeout_ms).map_err(|e| WireError::Unreachable(e.to_string()))?;
        stream
            .write_all(&encode_frame(op, &payload))
            .map_err(|e| WireError::Unreachable(e.to_string()))?;
        let frame = read_frame(&mut stream).map_err(|e| match e.kind() {
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => WireError::Timeout,
            _ => WireError::Unreachable(e.to_string()),
        })?;
        let (resp_op, body) =
            decode_frame(&frame).map_err(|e| WireError::Protocol(e.to_string()))?;
        if resp_op == Opcode::Err {
            return Err(WireError::Remote(crate::qos::wire::decode_error(body)));
        }
        Ok((resp_op, body.to_vec()))
    }
}

/// Accept loop for the QoS wire protocol.
fn serve_wire(listener: TcpListener, handler: Arc<dyn WireHandler>, stop: Arc<AtomicBool>) {
    listener.set_nonblocking(true).expect("nonblocking listener");
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false).ok();
                stream.set_read_timeout(Some(Duration::from_secs(5))).ok();
                let reply = match read_frame(&mut stream).ok().as_deref().map(decode_frame) {
                    Some(Ok((op, payload))) => {
                        let (resp_op, resp) = handler.handle(op, payload);
                        encode_frame(resp_op, &resp)
                    }
                    Some(Err(e)) => {
                        encode_frame(Opcode::Err, &crate::qos::wire::encode_error(&e.to_string()))
                    }
                    None => continue,
                };
                let _ = stream.write_all(&reply);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(_) => break,
        }
    }
}

/// Shared mailbox registry for the message listener.
struct MsgHub {
    atg: Arc<Atg>,
    mailboxes: Mutex<std::collections::BTreeMap<(usize, usize), Arc<PortMailbox>>>,
    dead_tasks: Mutex<Vec<usize>>,
    runtime: Arc<RealRuntime>,
}

fn serve_msgs(listener: TcpListener, hub: Arc<MsgHub>, stop: Arc<AtomicBool>) {
    listener.set_nonblocking(true).expect("nonblocking listener");
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false).ok();
                stream.set_read_timeout(Some(Duration::from_secs(30))).ok();
                // one connection may carry several messages back to back
                while let Ok(frame) = read_frame(&mut stream) {
                    let reply = match decode_msg_frame(&frame) {
                        Ok((src_task, src_port, key, payload)) => {
                            match hub.atg.port_peer(src_task as usize, src_port as usize) {
                                Ok(peer) => {
                                    if hub.dead_tasks.lock().unwrap().contains(&peer.peer_task_rank) {
                                        vec![0, 0, 0, 1, MSG_NACK]
                                    } else {
                                        let mailbox = hub
                                            .mailboxes
                                            .lock()
                                            .unwrap()
                                            .get(&(peer.peer_task_rank, peer.peer_port_index))
                                            .cloned();
                                        match mailbox {
                                            Some(mailbox) => {
                                                mailbox.push(key, payload.to_vec());
                                                hub.runtime.notify(&mailbox.cell);
                                                vec![0, 0, 0, 1, MSG_ACK]
                                            }
                                            None => vec![0, 0, 0, 1, MSG_NACK],
                                        }
                                    }
                                }
                                Err(_) => vec![0, 0, 0, 1, MSG_NACK],
                            }
                        }
                        Err(_) => vec![0, 0, 0, 1, MSG_NACK],
                    };
                    if stream.write_all(&reply).is_err() {
                        break;
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(_) => break,
        }
    }
}

/// TCP port-message transport.
struct TcpMsgTransport {
    atg: Arc<Atg>,
}

impl MsgTransport for TcpMsgTransport {
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
        let peer = self
            .atg
            .port_peer(src_task, src_port)
            .map_err(|e| PortError::PeerUnreachable(e.to_string()))?;
        let addr = addr_of(&self.atg, peer.peer_machine_rank, MSG_PORT_OFFSET);
        let send = || -> Result<(), PortError> {
            let mut stream = connect(&addr, timeout_ms)
                .map_err(|e| PortError::PeerUnreachable(e.to_string()))?;
            stream
                .write_all(&encode_msg_frame(src_task as u16, src_port as u16, key, &payload))
                .map_err(|e| PortError::PeerUnreachable(e.to_string()))?;
            let frame =
                read_frame(&mut stream).map_err(|e| PortError::PeerUnreachable(e.to_string()))?;
            match frame.get(4) {
                Some(&MSG_ACK) => Ok(()),
                Some(&MSG_NACK) => Err(PortError::PeerDead),
                _ => Err(PortError::Frame("bad receipt".into())),
            }
        };
        if await_receipt {
            send()
        } else {
            // lazy failure: record into the port's error sink
            match send() {
                Ok(()) => Ok(()),
                Err(e) => {
                    if let Some(sink) = sink {
                        let mut slot = sink.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some(e);
                        }
                    }
                    Ok(())
                }
            }
        }
    }
}

/// Application parameters handed to every machine process.
#[derive(Clone)]
pub struct RealAppConfig {
    pub spec: CircuitSpec,
    pub manager_cfg: ManagerCfg,
    pub worker_cfg: WorkerCfg,
    pub monitoring_enabled: bool,
    pub period_ms: f64,
    pub ping_timeout_ms: f64,
}

/// What the machine process reports when it exits.
pub struct MachineRunOutcome {
    pub manager_outcome: Option<ManagerOutcome>,
    pub task_states: Vec<(usize, TaskState)>,
}

/// Runs one machine of the deployment inside this process: wire server,
/// message listener, QoS manager, and the machine's tasks as threads.
/// Returns when every local task has reached a terminal state.
pub fn run_machine(
    atg: Arc<Atg>,
    machine_rank: usize,
    app: RealAppConfig,
) -> Result<MachineRunOutcome, String> {
    let runtime = Arc::new(RealRuntime::new());
    let store = Arc::new(LocalQosStore::new(Arc::clone(&atg), machine_rank));
    let is_master = machine_rank == atg.master_rank();
    let global = is_master.then(|| Arc::new(GlobalQosStore::new(&atg)));

    let wire_listener = TcpListener::bind(addr_of(&atg, machine_rank, 0))
        .map_err(|e| format!("bind wire listener: {}", e))?;
    let msg_listener = TcpListener::bind(addr_of(&atg, machine_rank, MSG_PORT_OFFSET))
        .map_err(|e| format!("bind msg listener: {}", e))?;

    let wire = TcpWireClient::new(Arc::clone(&atg), Arc::clone(&runtime));
    let provider = Arc::new(HostProbeProvider::new(
        machine_rank,
        Arc::clone(&wire) as Arc<dyn WireClient>,
    ));
    let manager = QosManager::new(
        Arc::clone(&atg),
        machine_rank,
        Arc::clone(&store),
        global.clone(),
        Arc::clone(&wire) as Arc<dyn WireClient>,
        provider,
        Arc::clone(&runtime) as Arc<dyn Runtime>,
        ManagerConfig {
            period_ms: app.period_ms,
            ping_timeout_ms: app.ping_timeout_ms,
            ping_retry_pause_ms: 250.0,
            enabled: app.monitoring_enabled,
            cycle_burst_ms: 0.0,
            first_cycle_burst_ms: 0.0,
        },
        None,
    );
    let server = QosServer::new(Arc::clone(&store), global.clone(), manager.token_flag());

    let stop = Arc::new(AtomicBool::new(false));
    let wire_thread = {
        let stop = Arc::clone(&stop);
        let handler: Arc<dyn WireHandler> = server;
        std::thread::spawn(move || serve_wire(wire_listener, handler, stop))
    };

    let hub = Arc::new(MsgHub {
        atg: Arc::clone(&atg),
        mailboxes: Mutex::new(std::collections::BTreeMap::new()),
        dead_tasks: Mutex::new(Vec::new()),
        runtime: Arc::clone(&runtime),
    });
    let msg_thread = {
        let stop = Arc::clone(&stop);
        let hub = Arc::clone(&hub);
        std::thread::spawn(move || serve_msgs(msg_listener, hub, stop))
    };

    // wait for every peer machine's wire endpoint before starting work
    let boot_deadline = runtime.now_ms() + 15_000.0;
    for peer in atg.peer_machine_set(machine_rank).unwrap_or_default() {
        loop {
            if wire.ping(peer, 500.0) {
                break;
            }
            if runtime.now_ms() > boot_deadline {
                stop.store(true, Ordering::SeqCst);
                let _ = wire_thread.join();
                let _ = msg_thread.join();
                return Err(format!("peer machine {} never came up", peer));
            }
            std::thread::sleep(Duration::from_millis(100));
        }
    }

    // the lowest-ranked local task launches the manager; further calls no-op
    let manager_thread = if manager.try_launch() {
        let manager = Arc::clone(&manager);
        let store_for_shutdown = Arc::clone(&store);
        Some(std::thread::spawn(move || {
            manager.cycle_loop(&|| store_for_shutdown.local_tasks_terminal());
        }))
    } else {
        None
    };

    let outcome_slot: Arc<Mutex<Option<ManagerOutcome>>> = Arc::new(Mutex::new(None));
    let transport: Arc<dyn MsgTransport> = Arc::new(TcpMsgTransport { atg: Arc::clone(&atg) });
    let mut task_threads = Vec::new();
    for task_rank in atg.tasks_on(machine_rank) {
        let mut ports = Vec::new();
        for p in 0..atg.tasks[task_rank].num_ports {
            let mailbox = Arc::new(PortMailbox::new());
            hub.mailboxes.lock().unwrap().insert((task_rank, p), Arc::clone(&mailbox));
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
                Arc::clone(&transport),
                Arc::clone(&runtime) as Arc<dyn Runtime>,
                peer_state,
                30_000.0,
            ));
        }
        let qos = QosService::new(
            Arc::clone(&atg),
            task_rank,
            Arc::clone(&store),
            global.clone(),
            Arc::clone(&wire) as Arc<dyn WireClient>,
            Arc::clone(&runtime) as Arc<dyn Runtime>,
            Arc::clone(&manager.ctl),
            app.ping_timeout_ms,
            250.0,
        );
        let mut ctx = TaskCtx {
            task_rank,
            machine_rank,
            runtime: Arc::clone(&runtime) as Arc<dyn Runtime>,
            ports,
            qos,
        };
        let body = component_body(
            &atg.tasks[task_rank].component_id,
            &app.spec,
            &app.manager_cfg,
            &app.worker_cfg,
            Arc::clone(&outcome_slot),
        );
        let store2 = Arc::clone(&store);
        let hub2 = Arc::clone(&hub);
        let manager_ctl = Arc::clone(&manager.ctl);
        let runtime2 = Arc::clone(&runtime);
        task_threads.push(std::thread::spawn(move || {
            let pid = next_task_pid();
            let _ = store2.report_task_state(task_rank, TaskState::Running { pid });
            let result =
                std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| body(&mut ctx)));
            let final_state = match result {
                Ok(Ok(())) => TaskState::Completed,
                Ok(Err(TaskError::Interrupted)) | Ok(Err(TaskError::Failed(_))) => TaskState::Dead,
                Err(_) => TaskState::Dead,
            };
            if final_state == TaskState::Dead {
                hub2.dead_tasks.lock().unwrap().push(task_rank);
            }
            let _ = store2.report_task_state(task_rank, final_state);
            manager_ctl.poke(runtime2.as_ref());
        }));
    }

    for t in task_threads {
        let _ = t.join();
    }
    if let Some(m) = manager_thread {
        let _ = m.join();
    }
    // linger briefly so peers can observe final states before the listeners go
    std::thread::sleep(Duration::from_millis(300));
    stop.store(true, Ordering::SeqCst);
    let _ = wire_thread.join();
    let _ = msg_thread.join();

    let task_states = atg
        .tasks_on(machine_rank)
        .into_iter()
        .map(|t| (t, store.local_task_state(t).unwrap_or(TaskState::Init)))
        .collect();
    let manager_outcome = outcome_slot.lock().unwrap().take();
    Ok(MachineRunOutcome { manager_outcome, task_states })
}
