//! Framed request/response protocol between QoS managers.
//!
//! Frame layout: `len:4 BE | opcode:1 | payload`, where `len` covers the
//! opcode byte plus the payload. Payloads are UTF-8 `key=value` lines with
//! keys in a fixed order, reals printed with 6 significant digits, terminated
//! by a blank line — except the echo opcodes, whose payloads are opaque bytes
//! returned verbatim.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::qos::data::{LinkAttributes, MachState, MachineAttributes, MachineRecord, TaskPid, TaskState};

/// Upper bound on a frame body; anything larger is malformed.
pub const MAX_FRAME_BYTES: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Ping = 0x01,
    GetMachAttrs = 0x02,
    GetAppView = 0x03,
    ReportTaskState = 0x04,
    ListPids = 0x05,
    EchoSmall = 0x06,
    EchoBulk = 0x07,
    Token = 0x08,
    Err = 0x7F,
}

impl Opcode {
    pub fn from_byte(b: u8) -> Option<Opcode> {
        match b {
            0x01 => Some(Opcode::Ping),
            0x02 => Some(Opcode::GetMachAttrs),
            0x03 => Some(Opcode::GetAppView),
            0x04 => Some(Opcode::ReportTaskState),
            0x05 => Some(Opcode::ListPids),
            0x06 => Some(Opcode::EchoSmall),
            0x07 => Some(Opcode::EchoBulk),
            0x08 => Some(Opcode::Token),
            0x7F => Some(Opcode::Err),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("truncated frame")]
    Truncated,
    #[error("oversized frame ({0} bytes)")]
    Oversized(usize),
    #[error("unknown opcode 0x{0:02x}")]
    UnknownOpcode(u8),
    #[error("malformed payload: {0}")]
    Payload(String),
}

pub fn encode_frame(op: Opcode, payload: &[u8]) -> Vec<u8> {
    let len = 1 + payload.len();
    let mut out = Vec::with_capacity(4 + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(op as u8);
    out.extend_from_slice(payload);
    out
}

/// Decodes a complete frame buffer into opcode and payload.
pub fn decode_frame(bytes: &[u8]) -> Result<(Opcode, &[u8]), FrameError> {
    if bytes.len() < 5 {
        return Err(FrameError::Truncated);
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(FrameError::Oversized(len));
    }
    if bytes.len() != 4 + len || len == 0 {
        return Err(FrameError::Truncated);
    }
    let op = Opcode::from_byte(bytes[4]).ok_or(FrameError::UnknownOpcode(bytes[4]))?;
    Ok((op, &bytes[5..]))
}

/// Canonical 6-significant-digit rendering for measured reals.
pub fn fmt_real(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{:.5e}", v)
    }
}

fn parse_real(s: &str) -> Result<f64, FrameError> {
    s.parse::<f64>().map_err(|_| FrameError::Payload(format!("bad real `{}`", s)))
}

fn parse_int<T: std::str::FromStr>(s: &str) -> Result<T, FrameError> {
    s.parse::<T>().map_err(|_| FrameError::Payload(format!("bad integer `{}`", s)))
}

/// `key=value` payload writer; keys are emitted in insertion order and the
/// payload is terminated by a blank line.
#[derive(Default)]
pub struct KvWriter {
    buf: String,
}

impl KvWriter {
    pub fn push(&mut self, key: &str, value: impl AsRef<str>) {
        let value = value.as_ref();
        debug_assert!(!key.contains('\n') && !key.contains('='));
        debug_assert!(!value.contains('\n'));
        self.buf.push_str(key);
        self.buf.push('=');
        self.buf.push_str(value);
        self.buf.push('\n');
    }

    pub fn push_real(&mut self, key: &str, value: f64) {
        self.push(key, fmt_real(value));
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.buf.push('\n');
        self.buf.into_bytes()
    }
}

/// Parses a `key=value` payload into an ordered map.
pub fn parse_kv(payload: &[u8]) -> Result<BTreeMap<String, String>, FrameError> {
    let text = std::str::from_utf8(payload)
        .map_err(|_| FrameError::Payload("payload is not UTF-8".into()))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FrameError::Payload(format!("line without `=`: `{}`", line)))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, FrameError> {
    map.get(key).map(|s| s.as_str()).ok_or_else(|| FrameError::Payload(format!("missing key `{}`", key)))
}

fn mach_state_str(s: MachState) -> &'static str {
    match s {
        MachState::Up => "up",
        MachState::Down => "down",
    }
}

fn parse_mach_state(s: &str) -> Result<MachState, FrameError> {
    match s {
        "up" => Ok(MachState::Up),
        "down" => Ok(MachState::Down),
        other => Err(FrameError::Payload(format!("bad mach state `{}`", other))),
    }
}

fn task_state_str(s: &TaskState) -> String {
    match s {
        TaskState::Init => "init".into(),
        TaskState::Running { pid } => format!("running:{}", pid.0),
        TaskState::Completed => "completed".into(),
        TaskState::Dead => "dead".into(),
    }
}

fn parse_task_state(s: &str) -> Result<TaskState, FrameError> {
    match s {
        "init" => Ok(TaskState::Init),
        "completed" => Ok(TaskState::Completed),
        "dead" => Ok(TaskState::Dead),
        other => match other.strip_prefix("running:") {
            Some(pid) => Ok(TaskState::Running { pid: TaskPid(parse_int(pid)?) }),
            None => Err(FrameError::Payload(format!("bad task state `{}`", other))),
        },
    }
}

fn write_mach_attrs(w: &mut KvWriter, attrs: &MachineAttributes) {
    w.push("os_type", &attrs.os_type);
    w.push_real("cpu_speed_mhz", attrs.cpu_speed_mhz);
    w.push("num_cpus", attrs.num_cpus.to_string());
    w.push_real("workload", attrs.workload);
    w.push_real("effective_speed_mhz", attrs.effective_speed_mhz);
    w.push("free_ram_bytes", attrs.free_ram_bytes.to_string());
    w.push("free_swap_bytes", attrs.free_swap_bytes.to_string());
    w.push("mach_state", mach_state_str(attrs.mach_state));
}

fn read_mach_attrs(map: &BTreeMap<String, String>, prefix: &str) -> Result<MachineAttributes, FrameError> {
    let key = |k: &str| format!("{}{}", prefix, k);
    Ok(MachineAttributes {
        os_type: get(map, &key("os_type"))?.to_string(),
        cpu_speed_mhz: parse_real(get(map, &key("cpu_speed_mhz"))?)?,
        num_cpus: parse_int(get(map, &key("num_cpus"))?)?,
        workload: parse_real(get(map, &key("workload"))?)?,
        effective_speed_mhz: parse_real(get(map, &key("effective_speed_mhz"))?)?,
        free_ram_bytes: parse_int(get(map, &key("free_ram_bytes"))?)?,
        free_swap_bytes: parse_int(get(map, &key("free_swap_bytes"))?)?,
        mach_state: parse_mach_state(get(map, &key("mach_state"))?)?,
    })
}

fn write_record_body(w: &mut KvWriter, record: &MachineRecord, prefix: &str) {
    let key = |k: String| format!("{}{}", prefix, k);
    for (rank, state) in &record.task_states {
        w.push(&key(format!("task.{}.state", rank)), task_state_str(state));
    }
    for (id, link) in &record.links {
        w.push_real(&key(format!("link.{}.latency_ms", id)), link.latency_ms);
        w.push_real(&key(format!("link.{}.throughput_mbps", id)), link.throughput_mbps);
        w.push(&key(format!("link.{}.stamp", id)), link.last_measured_stamp.to_string());
        w.push(&key(format!("link.{}.stale", id)), if link.stale { "1" } else { "0" });
    }
}

fn read_record_body(
    map: &BTreeMap<String, String>,
    prefix: &str,
) -> Result<(BTreeMap<usize, TaskState>, BTreeMap<usize, LinkAttributes>), FrameError> {
    let mut task_states = BTreeMap::new();
    let mut links: BTreeMap<usize, LinkAttributes> = BTreeMap::new();
    for (k, v) in map {
        let Some(rest) = k.strip_prefix(prefix) else { continue };
        if let Some(spec) = rest.strip_prefix("task.") {
            if let Some(rank) = spec.strip_suffix(".state") {
                task_states.insert(parse_int::<usize>(rank)?, parse_task_state(v)?);
            }
        } else if let Some(spec) = rest.strip_prefix("link.") {
            let (id, field) = spec
                .split_once('.')
                .ok_or_else(|| FrameError::Payload(format!("bad link key `{}`", k)))?;
            let entry = links.entry(parse_int(id)?).or_default();
            match field {
                "latency_ms" => entry.latency_ms = parse_real(v)?,
                "throughput_mbps" => entry.throughput_mbps = parse_real(v)?,
                "stamp" => entry.last_measured_stamp = parse_int(v)?,
                "stale" => entry.stale = v == "1",
                other => return Err(FrameError::Payload(format!("bad link field `{}`", other))),
            }
        }
    }
    Ok((task_states, links))
}

/// GET_MACH_ATTRS response: the machine's published record.
pub fn encode_machine_record(record: &MachineRecord) -> Vec<u8> {
    let mut w = KvWriter::default();
    write_mach_attrs(&mut w, &record.attrs);
    write_record_body(&mut w, record, "");
    w.finish()
}

pub fn decode_machine_record(payload: &[u8]) -> Result<MachineRecord, FrameError> {
    let map = parse_kv(payload)?;
    let attrs = read_mach_attrs(&map, "")?;
    let (task_states, links) = read_record_body(&map, "")?;
    Ok(MachineRecord { attrs, task_states, links })
}

/// GET_APP_VIEW response: the global stamp plus every machine's record. The
/// receiver reassembles the view against its own copy of the task graph.
pub fn encode_app_payload(stamp: u64, records: &BTreeMap<usize, MachineRecord>) -> Vec<u8> {
    let mut w = KvWriter::default();
    w.push("stamp", stamp.to_string());
    for (rank, record) in records {
        let prefix = format!("machine.{}.", rank);
        let mut inner = KvWriter::default();
        write_mach_attrs(&mut inner, &record.attrs);
        write_record_body(&mut inner, record, "");
        for line in String::from_utf8(inner.finish()).unwrap().lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').unwrap();
            w.push(&format!("{}{}", prefix, k), v);
        }
    }
    w.finish()
}

pub fn decode_app_payload(payload: &[u8]) -> Result<(u64, BTreeMap<usize, MachineRecord>), FrameError> {
    let map = parse_kv(payload)?;
    let stamp = parse_int(get(&map, "stamp")?)?;
    let mut ranks: Vec<usize> = Vec::new();
    for k in map.keys() {
        if let Some(rest) = k.strip_prefix("machine.") {
            if let Some((rank, _)) = rest.split_once('.') {
                let rank = parse_int::<usize>(rank)?;
                if !ranks.contains(&rank) {
                    ranks.push(rank);
                }
            }
        }
    }
    let mut records = BTreeMap::new();
    for rank in ranks {
        let prefix = format!("machine.{}.", rank);
        let attrs = read_mach_attrs(&map, &prefix)?;
        let (task_states, links) = read_record_body(&map, &prefix)?;
        records.insert(rank, MachineRecord { attrs, task_states, links });
    }
    Ok((stamp, records))
}

/// REPORT_TASK_STATE request.
pub fn encode_report_task_state(task_rank: usize, state: &TaskState) -> Vec<u8> {
    let mut w = KvWriter::default();
    w.push("task_rank", task_rank.to_string());
    w.push("state", task_state_str(state));
    w.finish()
}

pub fn decode_report_task_state(payload: &[u8]) -> Result<(usize, TaskState), FrameError> {
    let map = parse_kv(payload)?;
    Ok((parse_int(get(&map, "task_rank")?)?, parse_task_state(get(&map, "state")?)?))
}

/// LIST_PIDS response.
pub fn encode_pid_list(pids: &[TaskPid]) -> Vec<u8> {
    let mut w = KvWriter::default();
    let joined: Vec<String> = pids.iter().map(|p| p.0.to_string()).collect();
    w.push("pids", joined.join(","));
    w.finish()
}

pub fn decode_pid_list(payload: &[u8]) -> Result<Vec<TaskPid>, FrameError> {
    let map = parse_kv(payload)?;
    let raw = get(&map, "pids")?;
    if raw.is_empty() {
        return Ok(vec![]);
    }
    raw.split(',').map(|p| Ok(TaskPid(parse_int(p)?))).collect()
}

pub fn encode_error(msg: &str) -> Vec<u8> {
    let mut w = KvWriter::default();
    w.push("error", msg.replace('\n', " "));
    w.finish()
}

pub fn decode_error(payload: &[u8]) -> String {
    parse_kv(payload)
        .ok()
        .and_then(|m| m.get("error").cloned())
        .unwrap_or_else(|| "unknown error".into())
}
