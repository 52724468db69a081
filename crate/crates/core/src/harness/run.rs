//! Drives one application instance over the simulated cluster.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::atg::Atg;
use crate::circuit::{self, CircuitSpec, ManagerCfg, ManagerOutcome, Mode, WorkerCfg};
use crate::probes::LoadScenario;
use crate::runtime::{TaskBody, TaskCtx};
use crate::sim::sched::SimError;
use crate::sim::{KillSpec, SimCluster, SimConfig, SimReport};

/// Everything one application run needs.
#[derive(Clone)]
pub struct AppRunConfig {
    pub atg: Arc<Atg>,
    pub scenario: LoadScenario,
    pub mode: Mode,
    /// N: number of circuit ports (currents to compute).
    pub num_ports: usize,
    /// S: samples per vector.
    pub vector_size: usize,
    pub seed: u64,
    /// None: monitoring off; Some(period): monitoring on.
    pub monitoring_period_ms: Option<f64>,
    /// Workers crunch real numerics (small sizes) or ship zero vectors of
    /// identical wire size (timing benches).
    pub compute_numerics: bool,
    pub recovery: bool,
    pub conjugate_symmetric: bool,
    pub kills: Vec<KillSpec>,
    /// Extra tuning applied to the simulation config after defaults.
    pub tweak: Option<fn(&mut SimConfig)>,
}

impl AppRunConfig {
    pub fn new(atg: Arc<Atg>, num_ports: usize, vector_size: usize) -> Self {
        AppRunConfig {
            atg,
            scenario: LoadScenario::default(),
            mode: Mode::NonAdaptive,
            num_ports,
            vector_size,
            seed: 1,
            monitoring_period_ms: Some(30_000.0),
            compute_numerics: true,
            recovery: true,
            conjugate_symmetric: false,
            kills: Vec::new(),
            tweak: None,
        }
    }
}

pub struct AppRunOutcome {
    pub report: SimReport,
    /// The manager's gathered result and partition rounds, when it finished.
    pub manager: Option<ManagerOutcome>,
    pub spec: CircuitSpec,
}

impl AppRunOutcome {
    pub fn elapsed_ms(&self) -> f64 {
        self.report.app_elapsed_ms
    }

    pub fn elapsed_minutes(&self) -> f64 {
        self.report.app_elapsed_ms / 60_000.0
    }

    /// The first-round partition the manager used.
    pub fn partition(&self) -> Option<Vec<u64>> {
        self.manager.as_ref().and_then(|m| m.rounds.first().map(|r| r.counts.clone()))
    }
}

/// Builds the task body for a component id, as named in the task graph.
pub fn component_body(
    component_id: &str,
    spec: &CircuitSpec,
    manager_cfg: &ManagerCfg,
    worker_cfg: &WorkerCfg,
    outcome_slot: Arc<Mutex<Option<ManagerOutcome>>>,
) -> TaskBody {
    match component_id {
        "manager" => {
            let spec = spec.clone();
            let cfg = manager_cfg.clone();
            Box::new(move |ctx: &mut TaskCtx| {
                let outcome = circuit::run_manager(ctx, &spec, &cfg)?;
                *outcome_slot.lock().unwrap() = Some(outcome);
                Ok(())
            })
        }
        "worker" => {
            let cfg = worker_cfg.clone();
            Box::new(move |ctx: &mut TaskCtx| circuit::run_worker(ctx, &cfg))
        }
        _ => Box::new(|_ctx: &mut TaskCtx| Ok(())),
    }
}

/// Runs one simulated application instance to completion.
pub fn run_app_sim(cfg: &AppRunConfig) -> Result<AppRunOutcome, SimError> {
    let spec = CircuitSpec::generate(cfg.seed, cfg.num_ports, cfg.vector_size, cfg.conjugate_symmetric);
    let mut sim_cfg = SimConfig::new(Arc::clone(&cfg.atg));
    sim_cfg.scenario = cfg.scenario.clone();
    match cfg.monitoring_period_ms {
        Some(period) => {
            sim_cfg.monitoring_enabled = true;
            sim_cfg.period_ms = period;
        }
        None => sim_cfg.monitoring_enabled = false,
    }
    if let Some(tweak) = cfg.tweak {
        tweak(&mut sim_cfg);
    }

    let manager_cfg = ManagerCfg {
        mode: cfg.mode,
        recovery: cfg.recovery,
        full_y: false,
        compute_numerics: cfg.compute_numerics,
        poll_ms: 50.0,
        heterogeneous: false,
    };
    let worker_cfg = WorkerCfg { compute_numerics: cfg.compute_numerics };

    let mut cluster = SimCluster::new(sim_cfg);
    let slot: Arc<Mutex<Option<ManagerOutcome>>> = Arc::new(Mutex::new(None));
    let impls: BTreeMap<usize, String> = cfg
        .atg
        .tasks
        .iter()
        .map(|t| (t.rank, t.component_id.clone()))
        .collect();
    for (rank, component) in impls {
        cluster.set_task_body(
            rank,
            component_body(&component, &spec, &manager_cfg, &worker_cfg, Arc::clone(&slot)),
        );
    }
    for kill in &cfg.kills {
        cluster.inject_kill(kill.clone());
    }

    let report = cluster.run()?;
    let manager = slot.lock().unwrap().take();
    Ok(AppRunOutcome { report, manager, spec })
}
