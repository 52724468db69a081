//! Runtime QoS middleware for network-computing applications.
//!
//! A distributed application described by a task graph gets a lightweight
//! monitoring companion: one QoS manager per machine measures machine, task,
//! and link attributes into hierarchical views (application / machine / task /
//! port), and every task can query those views through an anonymous QoS API to
//! adapt itself for performance and fault tolerance at runtime.
//!
//! The crate ships:
//!
//! - the task-graph configuration model ([`atg`]),
//! - attribute stores and view snapshots ([`qos::data`]),
//! - measurement providers for real hosts and simulated clusters ([`probes`]),
//! - link latency/throughput metering under a token ring ([`netmeter`]),
//! - the per-machine monitoring daemon and its wire protocol
//!   ([`qos::manager`], [`qos::wire`]),
//! - the per-task QoS service facade ([`qos::service`]),
//! - anonymous point-to-point message ports ([`ports`]),
//! - a workload-balancing partitioner ([`partition`]),
//! - a manager-worker demo computing N-port circuit currents ([`circuit`]),
//! - a deterministic simulated cluster ([`sim`]) plus experiment drivers
//!   ([`harness`]) and a multi-process deployment mode ([`realmode`]).

pub mod atg;
pub mod circuit;
pub mod harness;
pub mod netmeter;
pub mod partition;
pub mod ports;
pub mod probes;
pub mod qos;
pub mod realmode;
pub mod runtime;
pub mod sim;

pub use atg::Atg;
pub use circuit::{CircuitSpec, CurrentResult};
pub use partition::{BalanceProblem, Partition};
pub use qos::data::{AppView, MachView, PortView, TaskView};
pub use qos::service::QosService;
