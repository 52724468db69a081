//! Experiment drivers: the adaptation study (adaptive vs non-adaptive under
//! controlled load) and the monitoring-overhead study (monitoring off vs on
//! at several periods, API unused).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::atg::Atg;
use crate::circuit::Mode;
use crate::harness::report::{CellPair, ExperimentReport};
use crate::harness::run::{run_app_sim, AppRunConfig};
use crate::probes::LoadScenario;
use crate::sim::sched::SimError;

pub const DEFAULT_PORT_COUNTS: [usize; 3] = [12, 30, 60];
pub const DEFAULT_VECTOR_SIZES: [usize; 4] = [500, 1000, 1500, 2000];
pub const DEFAULT_REPS: usize = 3;

#[derive(Clone)]
pub struct AdaptExperimentConfig {
    pub atg: Arc<Atg>,
    pub scenario: LoadScenario,
    pub scenario_name: String,
    pub seed: u64,
    pub reps: usize,
    pub period_ms: f64,
    pub port_counts: Vec<usize>,
    pub vector_sizes: Vec<usize>,
}

impl AdaptExperimentConfig {
    pub fn new(atg: Arc<Atg>, scenario: LoadScenario, scenario_name: &str, seed: u64) -> Self {
        AdaptExperimentConfig {
            atg,
            scenario,
            scenario_name: scenario_name.to_string(),
            seed,
            reps: DEFAULT_REPS,
            period_ms: 30_000.0,
            port_counts: DEFAULT_PORT_COUNTS.to_vec(),
            vector_sizes: DEFAULT_VECTOR_SIZES.to_vec(),
        }
    }
}

fn average_minutes(
    base: &AppRunConfig,
    reps: usize,
    seed: u64,
    rep_salt: u64,
) -> Result<Option<f64>, SimError> {
    let mut total = 0.0;
    for rep in 0..reps {
        let mut cfg = base.clone();
        cfg.seed = seed.wrapping_mul(1000).wrapping_add(rep as u64).wrapping_add(rep_salt);
        let outcome = run_app_sim(&cfg)?;
        if !outcome.report.failures.is_empty() {
            return Ok(None); // cell aborted: a task failed to run
        }
        total += outcome.elapsed_minutes();
    }
    Ok(Some(total / reps as f64))
}

/// Adaptive vs non-adaptive completion time over the (N, vector size) grid,
/// averaged over `reps` runs per cell. The non-adaptive baseline runs with
/// monitoring off.
pub fn run_adaptation_experiment(cfg: &AdaptExperimentConfig) -> Result<ExperimentReport, SimError> {
    let mut cells = BTreeMap::new();
    for n in &cfg.port_counts {
        for s in &cfg.vector_sizes {
            let mut base = AppRunConfig::new(Arc::clone(&cfg.atg), *n, *s);
            base.scenario = cfg.scenario.clone();
            base.compute_numerics = false;

            base.mode = Mode::NonAdaptive;
            base.monitoring_period_ms = None;
            let no_qos = average_minutes(&base, cfg.reps, cfg.seed, (*n * 17 + *s) as u64)?;

            base.mode = Mode::Adaptive;
            base.monitoring_period_ms = Some(cfg.period_ms);
            let with_qos = average_minutes(&base, cfg.reps, cfg.seed, (*n * 31 + *s) as u64)?;

            cells.insert(
                (n.to_string(), *s),
                CellPair { no_qos_min: no_qos, with_qos_min: with_qos },
            );
        }
    }
    Ok(ExperimentReport {
        meta: vec![
            ("bench".into(), "adapt".into()),
            ("scenario".into(), cfg.scenario_name.clone()),
            ("seed".into(), cfg.seed.to_string()),
            ("reps".into(), cfg.reps.to_string()),
            ("period_ms".into(), format!("{}", cfg.period_ms)),
            ("mode".into(), "sim".into()),
        ],
        row_kind: "n".into(),
        row_labels: cfg.port_counts.iter().map(|n| n.to_string()).collect(),
        vector_sizes: cfg.vector_sizes.clone(),
        cells,
    })
}

#[derive(Clone)]
pub struct OverheadExperimentConfig {
    pub atg: Arc<Atg>,
    pub seed: u64,
    pub reps: usize,
    pub num_ports: usize,
    pub periods_ms: Vec<f64>,
    pub vector_sizes: Vec<usize>,
}

impl OverheadExperimentConfig {
    pub fn new(atg: Arc<Atg>, seed: u64) -> Self {
        OverheadExperimentConfig {
            atg,
            seed,
            reps: DEFAULT_REPS,
            num_ports: 60,
            periods_ms: vec![5_000.0, 30_000.0, 60_000.0],
            vector_sizes: DEFAULT_VECTOR_SIZES.to_vec(),
        }
    }
}

fn period_label(ms: f64) -> String {
    format!("{}s", (ms / 1000.0) as u64)
}

/// Non-adaptive runs on idle machines: monitoring off ("no") vs monitoring
/// at each period with the QoS API unused ("with"). Negative Diff/No % is
/// monitoring overhead.
pub fn run_overhead_experiment(cfg: &OverheadExperimentConfig) -> Result<ExperimentReport, SimError> {
    let mut cells = BTreeMap::new();
    for s in &cfg.vector_sizes {
        let mut base = AppRunConfig::new(Arc::clone(&cfg.atg), cfg.num_ports, *s);
        base.compute_numerics = false;
        base.mode = Mode::NonAdaptive;

        base.monitoring_period_ms = None;
        let off = average_minutes(&base, cfg.reps, cfg.seed, *s as u64)?;

        for period in &cfg.periods_ms {
            base.monitoring_period_ms = Some(*period);
            let with = average_minutes(&base, cfg.reps, cfg.seed, (*s * 7) as u64)?;
            cells.insert(
                (period_label(*period), *s),
                CellPair { no_qos_min: off, with_qos_min: with },
            );
        }
    }
    Ok(ExperimentReport {
        meta: vec![
            ("bench".into(), "overhead".into()),
            ("seed".into(), cfg.seed.to_string()),
            ("reps".into(), cfg.reps.to_string()),
            ("n".into(), cfg.num_ports.to_string()),
            ("mode".into(), "sim".into()),
        ],
        row_kind: "period".into(),
        row_labels: cfg.periods_ms.iter().map(|p| period_label(*p)).collect(),
        vector_sizes: cfg.vector_sizes.clone(),
        cells,
    })
}
