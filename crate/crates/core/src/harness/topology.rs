//! Canonical task graphs and built-in load scenarios.

use std::sync::Arc;

use crate::atg::{parse_atg, Atg};
use crate::probes::LoadScenario;

/// Star topology: one manager task on the master machine, one worker task on
/// each of `workers` further machines, one link per worker. Hostnames use a
/// reserved-by-convention suffix so they can never resolve accidentally.
pub fn manager_worker_atg(workers: usize) -> Arc<Atg> {
    Arc::new(parse_atg(&manager_worker_doc(workers, 7700)).unwrap())
}

/// The same topology as a config document, with explicit base ports.
pub fn manager_worker_doc(workers: usize, first_port: u16) -> String {
    let mut doc = String::new();
    doc.push_str(&format!(
        "machine m0 host=simhost0.invalid port={} master\n",
        first_port
    ));
    for w in 1..=workers {
        doc.push_str(&format!(
            "machine m{} host=simhost{}.invalid port={}\n",
            w,
            w,
            first_port as usize + w * 10
        ));
    }
    doc.push_str(&format!("task manager machine=m0 ports={} impl=manager\n", workers));
    for w in 1..=workers {
        doc.push_str(&format!("task worker{} machine=m{} ports=1 impl=worker\n", w, w));
    }
    for w in 1..=workers {
        doc.push_str(&format!("link manager.{} worker{}.0\n", w - 1, w));
    }
    doc
}

/// Built-in scenario names accepted wherever a scenario file is expected.
pub fn builtin_scenario(name: &str, workers: usize) -> Option<LoadScenario> {
    match name {
        // half the worker machines idle, half under a static load of two
        "load1" => {
            let mut text = String::new();
            for w in (workers / 2 + 1)..=workers {
                text.push_str(&format!("load m{} static 2\n", w));
            }
            Some(LoadScenario::parse(&text).unwrap())
        }
        // two idle, two static-2, two oscillating (in phase)
        "load2" => {
            let mut text = String::new();
            let third = workers / 3;
            for w in (third + 1)..=(2 * third) {
                text.push_str(&format!("load m{} static 2\n", w));
            }
            for w in (2 * third + 1)..=workers {
                text.push_str(&format!("load m{} oscillate 2 6000\n", w));
            }
            Some(LoadScenario::parse(&text).unwrap())
        }
        "idle" => Some(LoadScenario::default()),
        _ => None,
    }
}
