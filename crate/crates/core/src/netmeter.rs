//! Logical-link latency/throughput metering, coordinated by a token so only
//! one measurement is in flight cluster-wide.
//!
//! Each link is designated to exactly one of its endpoint machines (the lower
//! rank). A machine measures its designated links only while holding the
//! token, then passes the token to the next ring member. The measurement is a
//! ping-pong echo: latency is half the small-echo round trip, throughput is
//! derived from the bulk/small round-trip difference, both medians of three
//! trials.

use crate::atg::Atg;
use crate::qos::data::LinkAttributes;
use crate::runtime::{WireClient, WireError};

/// Echo payload sizes, bytes.
pub const ECHO_SMALL_BYTES: usize = 64;
pub const ECHO_BULK_BYTES: usize = 65536;
/// Trials per RTT estimate; the median is used.
pub const ECHO_TRIALS: usize = 3;
/// Floor for the bulk/small RTT difference, milliseconds.
pub const EPS_TIME_MS: f64 = 1e-6;

/// Links measured by the given machine: every link whose lower-ranked
/// endpoint machine it is (same-machine links go to that machine).
pub fn designated_links(atg: &Atg, machine_rank: usize) -> Vec<usize> {
    atg.links
        .iter()
        .filter(|l| {
            let ma = atg.tasks[l.endpoint_a.task_rank].machine_rank;
            let mb = atg.tasks[l.endpoint_b.task_rank].machine_rank;
            ma.min(mb) == machine_rank
        })
        .map(|l| l.link_id)
        .collect()
}

/// The machine an echo for this link must target: the endpoint machine that
/// is not the designated holder (the holder itself for same-machine links).
pub fn echo_target(atg: &Atg, link_id: usize, holder_rank: usize) -> usize {
    let link = &atg.links[link_id];
    let ma = atg.tasks[link.endpoint_a.task_rank].machine_rank;
    let mb = atg.tasks[link.endpoint_b.task_rank].machine_rank;
    if ma == holder_rank && mb != holder_rank {
        mb
    } else if mb == holder_rank && ma != holder_rank {
        ma
    } else {
        holder_rank // same-machine link: loopback echo
    }
}

/// Ring of machines owning at least one designated link, ascending rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRing {
    pub members: Vec<usize>,
}

impl TokenRing {
    pub fn new(atg: &Atg) -> Self {
        let members = (0..atg.num_machines())
            .filter(|m| !designated_links(atg, *m).is_empty())
            .collect();
        TokenRing { members }
    }

    /// Initial holder: the master when it is a ring member, otherwise the
    /// lowest-ranked member.
    pub fn initial_holder(&self, master_rank: usize) -> Option<usize> {
        if self.members.contains(&master_rank) {
            Some(master_rank)
        } else {
            self.members.first().copied()
        }
    }

    /// Ring members after `holder`, in passing order (wrapping).
    pub fn successors(&self, holder: usize) -> Vec<usize> {
        let Some(pos) = self.members.iter().position(|m| *m == holder) else {
            return self.members.clone();
        };
        let n = self.members.len();
        (1..n).map(|i| self.members[(pos + i) % n]).collect()
    }

    /// Whether handing the token from `holder` to `next` wraps past the end
    /// of the ring (completing a rotation).
    pub fn wraps(&self, holder: usize, next: usize) -> bool {
        match (self.members.iter().position(|m| *m == holder), self.members.iter().position(|m| *m == next)) {
            (Some(h), Some(n)) => n <= h,
            _ => false,
        }
    }
}

/// A completed link measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkMeasurement {
    pub link_id: usize,
    pub latency_ms: f64,
    pub throughput_mbps: f64,
    pub measured_at_stamp: u64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn echo_rtt_ms(
    wire: &dyn WireClient,
    target: usize,
    bytes: usize,
    timeout_ms: f64,
) -> Result<f64, WireError> {
    let mut rtts = Vec::with_capacity(ECHO_TRIALS);
    for trial in 0..ECHO_TRIALS {
        let payload: Vec<u8> = (0..bytes).map(|i| ((i + trial) & 0xff) as u8).collect();
        let started = wire.now_ms();
        let reply = wire.echo(target, &payload, timeout_ms)?;
        if reply != payload {
            return Err(WireError::Protocol("echo payload mismatch".into()));
        }
        rtts.push(wire.now_ms() - started);
    }
    Ok(median(rtts))
}

/// Measures one designated link by echoing against the opposite endpoint
/// machine. The caller must hold the token.
pub fn measure_link(
    wire: &dyn WireClient,
    atg: &Atg,
    link_id: usize,
    holder_rank: usize,
    stamp: u64,
    timeout_ms: f64,
) -> Result<LinkMeasurement, WireError> {
    let target = echo_target(atg, link_id, holder_rank);
    let rtt_small = echo_rtt_ms(wire, target, ECHO_SMALL_BYTES, timeout_ms)?;
    let rtt_bulk = echo_rtt_ms(wire, target, ECHO_BULK_BYTES, timeout_ms)?;
    let latency_ms = rtt_small / 2.0;
    // The bulk payload crosses the link twice (request and echoed reply).
    let delta_s = ((rtt_bulk - rtt_small).max(EPS_TIME_MS)) / 1000.0;
    let throughput_mbps = (8.0 * ECHO_BULK_BYTES as f64) / delta_s * 1e-6 * 2.0;
    Ok(LinkMeasurement { link_id, latency_ms, throughput_mbps, measured_at_stamp: stamp })
}

/// Outcome of one holder's measurement pass over its designated links.
pub fn measurement_to_attrs(m: &LinkMeasurement) -> LinkAttributes {
    LinkAttributes {
        latency_ms: m.latency_ms,
        throughput_mbps: m.throughput_mbps,
        last_measured_stamp: m.measured_at_stamp,
        stale: false,
    }
}
