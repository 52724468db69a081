//! QoS middleware: shared attribute stores, the wire protocol, the
//! per-machine monitoring manager, and the per-task service facade.

pub mod data;
pub mod manager;
pub mod service;
pub mod wire;
