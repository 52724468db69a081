//! Experiment harness: canonical topologies, built-in load scenarios, the
//! simulated application driver, experiment report generation, and the
//! real-host load generator.

pub mod experiments;
pub mod loadgen;
pub mod report;
pub mod run;
pub mod topology;
