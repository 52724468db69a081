//! Anonymous point-to-point message passing between peer task ports.
//!
//! A port is one endpoint of a logical link. Writes name no destination: the
//! port's link determines the peer. Messages are keyed by a non-negative
//! integer; per (port pair, key) delivery is FIFO, across keys there is no
//! ordering guarantee.
//!
//! Transport frame: `len:4 BE | 0x10 | src_task:2 BE | src_port:2 BE |
//! key:4 BE | payload`. The receiving machine routes by looking the source
//! endpoint up in the task graph. Receipts (used by `sync_write`) are empty
//! `0x11` frames, refusals `0x12`.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::qos::data::TaskState;
use crate::runtime::{Interrupt, NotifyCell, Runtime};

pub const MSG_DELIVER: u8 = 0x10;
pub const MSG_ACK: u8 = 0x11;
pub const MSG_NACK: u8 = 0x12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PortError {
    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),
    #[error("peer task is dead")]
    PeerDead,
    #[error("interrupted")]
    Interrupted,
    #[error("malformed message frame: {0}")]
    Frame(String),
}

impl From<Interrupt> for PortError {
    fn from(_: Interrupt) -> Self {
        PortError::Interrupted
    }
}

/// A keyed application message.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub key: u32,
    pub payload: Vec<u8>,
}

pub fn encode_msg_frame(src_task: u16, src_port: u16, key: u32, payload: &[u8]) -> Vec<u8> {
    let len = 1 + 2 + 2 + 4 + payload.len();
    let mut out = Vec::with_capacity(4 + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(MSG_DELIVER);
    out.extend_from_slice(&src_task.to_be_bytes());
    out.extend_from_slice(&src_port.to_be_bytes());
    out.extend_from_slice(&key.to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Parses a complete deliver frame into `(src_task, src_port, key, payload)`.
pub fn decode_msg_frame(bytes: &[u8]) -> Result<(u16, u16, u32, &[u8]), PortError> {
    if bytes.len() < 13 {
        return Err(PortError::Frame("short frame".into()));
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if bytes.len() != 4 + len || bytes[4] != MSG_DELIVER {
        return Err(PortError::Frame("bad length or opcode".into()));
    }
    let src_task = u16::from_be_bytes([bytes[5], bytes[6]]);
    let src_port = u16::from_be_bytes([bytes[7], bytes[8]]);
    let key = u32::from_be_bytes([bytes[9], bytes[10], bytes[11], bytes[12]]);
    Ok((src_task, src_port, key, &bytes[13..]))
}

/// Per-port receive mailbox: keyed FIFO queues plus a wake cell.
pub struct PortMailbox {
    queues: Mutex<BTreeMap<u32, VecDeque<Vec<u8>>>>,
    pub cell: NotifyCell,
}

impl PortMailbox {
    pub fn new() -> Self {
        PortMailbox { queues: Mutex::new(BTreeMap::new()), cell: NotifyCell::new() }
    }

    pub fn push(&self, key: u32, payload: Vec<u8>) {
        self.queues.lock().unwrap().entry(key).or_default().push_back(payload);
    }

    pub fn take(&self, key: u32) -> Option<Vec<u8>> {
        let mut queues = self.queues.lock().unwrap();
        let q = queues.get_mut(&key)?;
        let msg = q.pop_front();
        if q.is_empty() {
            queues.remove(&key);
        }
        msg
    }

    pub fn has(&self, key: u32) -> bool {
        self.queues.lock().unwrap().contains_key(&key)
    }
}

impl Default for PortMailbox {
    fn default() -> Self {
        Self::new()
    }
}

/// Outbound half of the message layer for one deployment; the simulator and
/// the TCP layer each implement it.
pub trait MsgTransport: Send + Sync {
    /// Sends one keyed message from the given source endpoint to its link
    /// peer. With `await_receipt` the call returns once the peer runtime has
    /// accepted the message (not necessarily read it); otherwise it returns
    /// immediately and failures surface through `sink`.
    fn deliver(
        &self,
        src_task: usize,
        src_port: usize,
        key: u32,
        payload: Vec<u8>,
        await_receipt: bool,
        timeout_ms: f64,
        sink: Option<Arc<Mutex<Option<PortError>>>>,
    ) -> Result<(), PortError>;
}

pub type PeerStateFn = Arc<dyn Fn() -> TaskState + Send + Sync>;

/// One endpoint of a logical link, owned by its task.
pub struct Port {
    task_rank: usize,
    port_index: usize,
    mailbox: Arc<PortMailbox>,
    transport: Arc<dyn MsgTransport>,
    runtime: Arc<dyn Runtime>,
    peer_state: PeerStateFn,
    write_timeout_ms: f64,
    async_error: Arc<Mutex<Option<PortError>>>,
}

impl Port {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task_rank: usize,
        port_index: usize,
        mailbox: Arc<PortMailbox>,
        transport: Arc<dyn MsgTransport>,
        runtime: Arc<dyn Runtime>,
        peer_state: PeerStateFn,
        write_timeout_ms: f64,
    ) -> Self {
        Port {
            task_rank,
            port_index,
            mailbox,
            transport,
            runtime,
            peer_state,
            write_timeout_ms,
            async_error: Arc::new(Mutex::new(None)),
        }
    }

    pub fn port_index(&self) -> usize {
        self.port_index
    }

    /// Current (cached) state of the peer task, as the fault detector knows it.
    pub fn peer_task_state(&self) -> TaskState {
        (self.peer_state)()
    }

    /// Enqueues for transmission and returns immediately. Delivery failures
    /// surface on the next `flush`.
    pub fn async_write(&self, key: u32, payload: Vec<u8>) -> Result<(), PortError> {
        self.transport.deliver(
            self.task_rank,
            self.port_index,
            key,
            payload,
            false,
            self.write_timeout_ms,
            Some(Arc::clone(&self.async_error)),
        )
    }

    /// Surfaces any failure recorded by earlier asynchronous writes.
    pub fn flush(&self) -> Result<(), PortError> {
        match self.async_error.lock().unwrap().take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Returns once the peer runtime has received the message.
    pub fn sync_write(&self, key: u32, payload: Vec<u8>) -> Result<(), PortError> {
        if self.peer_task_state() == TaskState::Dead {
            return Err(PortError::PeerDead);
        }
        self.transport.deliver(
            self.task_rank,
            self.port_index,
            key,
            payload,
            true,
            self.write_timeout_ms,
            None,
        )
    }

    /// Returns the message with the key if one is present, without blocking.
    pub fn async_read(&self, key: u32) -> Option<Message> {
        self.mailbox.take(key).map(|payload| Message { key, payload })
    }

    /// Blocks until a message with the key arrives. If the fault detector has
    /// already marked the peer dead at call time (and nothing is pending),
    /// the call aborts instead of blocking forever; a peer dying mid-wait
    /// does not interrupt the wait.
    pub fn sync_read(&self, key: u32) -> Result<Message, PortError> {
        if let Some(msg) = self.async_read(key) {
            return Ok(msg);
        }
        if self.peer_task_state() == TaskState::Dead {
            return Err(PortError::PeerDead);
        }
        let mailbox = Arc::clone(&self.mailbox);
        self.runtime
            .wait_on(&self.mailbox.cell, None, &mut || mailbox.has(key))?;
        self.async_read(key).ok_or(PortError::Interrupted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::RealRuntime;

    /// Loopback transport: routes directly into a registry of mailboxes with
    /// a fixed peer map, standing in for a network.
    struct Loopback {
        routes: BTreeMap<(usize, usize), (usize, usize)>,
        boxes: BTreeMap<(usize, usize), Arc<PortMailbox>>,
        runtime: Arc<RealRuntime>,
        dead_tasks: Mutex<Vec<usize>>,
    }

    impl MsgTransport for Loopback {
        fn deliver(
            &self,
            src_task: usize,
            src_port: usize,
            key: u32,
            payload: Vec<u8>,
            await_receipt: bool,
            _timeout_ms: f64,
            sink: Option<Arc<Mutex<Option<PortError>>>>,
        ) -> Result<(), PortError> {
            let dest = self.routes[&(src_task, src_port)];
            if self.dead_tasks.lock().unwrap().contains(&dest.0) {
                let err = PortError::PeerDead;
                if await_receipt {
                    return Err(err);
                }
                if let Some(sink) = sink {
                    *sink.lock().unwrap() = Some(err);
                }
                return Ok(());
            }
            let mailbox = &self.boxes[&dest];
            mailbox.push(key, payload);
            self.runtime.notify(&mailbox.cell);
            Ok(())
        }
    }

    fn pair() -> (Port, Port, Arc<Loopback>) {
        let runtime = Arc::new(RealRuntime::new());
        let box_a = Arc::new(PortMailbox::new());
        let box_b = Arc::new(PortMailbox::new());
        let mut routes = BTreeMap::new();
        routes.insert((0, 0), (1, 0));
        routes.insert((1, 0), (0, 0));
        let mut boxes = BTreeMap::new();
        boxes.insert((0, 0), Arc::clone(&box_a));
        boxes.insert((1, 0), Arc::clone(&box_b));
        let transport = Arc::new(Loopback {
            routes,
            boxes,
            runtime: Arc::clone(&runtime),
            dead_tasks: Mutex::new(vec![]),
        });
        let alive: PeerStateFn = Arc::new(|| TaskState::Init);
        let a = Port::new(
            0,
            0,
            box_a,
            transport.clone() as Arc<dyn MsgTransport>,
            runtime.clone(),
            alive.clone(),
            100.0,
        );
        let b = Port::new(
            1,
            0,
            box_b,
            transport.clone() as Arc<dyn MsgTransport>,
            runtime,
            alive,
            100.0,
        );
        (a, b, transport)
    }

    #[test]
    fn write_then_read_round_trips_payload() {
        let (a, b, _) = pair();
        a.sync_write(3, vec![1, 2, 3, 255]).unwrap();
        let msg = b.sync_read(3).unwrap();
        assert_eq!(msg.payload, vec![1, 2, 3, 255]);
    }

    #[test]
    fn same_key_messages_arrive_in_send_order() {
        let (a, b, _) = pair();
        a.sync_write(5, vec![1]).unwrap();
        a.sync_write(5, vec![2]).unwrap();
        assert_eq!(b.sync_read(5).unwrap().payload, vec![1]);
        assert_eq!(b.sync_read(5).unwrap().payload, vec![2]);
    }

    #[test]
    fn async_read_on_empty_mailbox_is_absent() {
        let (_a, b, _) = pair();
        assert!(b.async_read(0).is_none());
    }

    #[test]
    fn sync_write_to_dead_peer_fails_without_hanging() {
        let (a, _b, transport) = pair();
        transport.dead_tasks.lock().unwrap().push(1);
        assert_eq!(a.sync_write(0, vec![9]), Err(PortError::PeerDead));
    }

    #[test]
    fn async_write_failure_surfaces_on_flush() {
        let (a, _b, transport) = pair();
        transport.dead_tasks.lock().unwrap().push(1);
        a.async_write(0, vec![9]).unwrap();
        assert_eq!(a.flush(), Err(PortError::PeerDead));
        assert_eq!(a.flush(), Ok(()));
    }

    #[test]
    fn sync_read_returns_predelivered_message_without_blocking() {
        let (a, b, _) = pair();
        a.sync_write(7, vec![42]).unwrap();
        // message is already in the mailbox; this must not block
        assert_eq!(b.sync_read(7).unwrap().payload, vec![42]);
    }

    #[test]
    fn keyed_gather_loop_collects_all_vectors() {
        // the gather pattern: read keys 0..L-1 from a port, collecting L messages
        let (a, b, _) = pair();
        for k in 0..4u32 {
            a.sync_write(k, vec![k as u8]).unwrap();
        }
        let mut got = Vec::new();
        for k in 0..4u32 {
            got.push(b.sync_read(k).unwrap().payload[0]);
        }
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn msg_frame_round_trip() {
        let frame = encode_msg_frame(7, 2, 0xdeadbeef, b"xyz");
        let (task, port, key, payload) = decode_msg_frame(&frame).unwrap();
        assert_eq!((task, port, key, payload), (7, 2, 0xdeadbeef, &b"xyz"[..]));
    }

    #[test]
    fn no_loss_no_duplication_soak() {
        let (a, b, _) = pair();
        let writer = std::thread::spawn(move || {
            for seq in 0..500u32 {
                a.sync_write(0, seq.to_be_bytes().to_vec()).unwrap();
            }
        });
        for seq in 0..500u32 {
            let msg = b.sync_read(0).unwrap();
            assert_eq!(u32::from_be_bytes(msg.payload.try_into().unwrap()), seq);
        }
        writer.join().unwrap();
        assert!(b.async_read(0).is_none());
    }
}
