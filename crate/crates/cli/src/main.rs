//! Command-line harness: run one application instance (simulated or real),
//! drive the adaptation and overhead experiments, generate background load,
//! or validate configuration files.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use qosnow::atg::{parse_atg, Atg};
use qosnow::circuit::{ManagerCfg, Mode, WorkerCfg};
use qosnow::harness::experiments::{
    run_adaptation_experiment, run_overhead_experiment, AdaptExperimentConfig,
    OverheadExperimentConfig,
};
use qosnow::harness::loadgen::{parse_pattern, run_loadgen, LoadGenConfig};
use qosnow::harness::run::{run_app_sim, AppRunConfig};
use qosnow::harness::topology::{builtin_scenario, manager_worker_atg, manager_worker_doc};
use qosnow::probes::LoadScenario;
use qosnow::realmode::{run_machine, RealAppConfig};
use qosnow::CircuitSpec;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "qosnow", about = "Runtime QoS middleware demo and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonRunArgs {
    /// Task graph configuration file (defaults to a built-in 6-worker star).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Load scenario: a file path or a built-in name (load1, load2, idle).
    #[arg(long, default_value = "idle")]
    scenario: String,
    /// Deterministic seed for input generation and simulation.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Launch one application instance.
    Run {
        #[command(flatten)]
        common: CommonRunArgs,
        /// Partitioning mode.
        #[arg(long, default_value = "nonadaptive", value_parser = ["adaptive", "nonadaptive"])]
        mode: String,
        /// N: number of circuit ports (currents to compute).
        #[arg(long, default_value_t = 12)]
        ports: usize,
        /// S: samples per vector.
        #[arg(long, default_value_t = 500)]
        vector_size: usize,
        /// Monitoring period in milliseconds (0 disables monitoring).
        #[arg(long, default_value_t = 30_000)]
        period: u64,
        /// Run on the simulated cluster (default).
        #[arg(long, conflicts_with = "real")]
        sim: bool,
        /// Run as one OS process per machine on this host.
        #[arg(long)]
        real: bool,
    },
    /// Experiment drivers emitting TSV reports.
    Bench {
        #[command(subcommand)]
        which: BenchCommand,
    },
    /// Generate background CPU load on this host.
    Loadgen {
        /// Target machine names (informational; the load runs here).
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        /// static:K or oscillate:PEAK,PERIOD_MS
        #[arg(long, default_value = "static:1")]
        pattern: String,
        /// Stop after this many milliseconds (default: run until killed).
        #[arg(long)]
        duration_ms: Option<u64>,
    },
    /// Check a task graph (and optionally a scenario) for validity.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Internal: run one machine of a real deployment.
    #[command(hide = true, name = "__machine")]
    Machine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        ports: usize,
        #[arg(long)]
        vector_size: usize,
        #[arg(long)]
        period: u64,
        #[arg(long)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Adaptive vs non-adaptive completion times under a load scenario.
    Adapt {
        #[command(flatten)]
        common: CommonRunArgs,
        /// Simulated cluster (the only supported bench backend).
        #[arg(long)]
        sim: bool,
        /// Monitoring period for the adaptive runs, milliseconds.
        #[arg(long, default_value_t = 30_000)]
        period: u64,
        /// Output TSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monitoring overhead: off vs periods 5 s / 30 s / 60 s.
    Overhead {
        #[command(flatten)]
        common: CommonRunArgs,
        #[arg(long)]
        sim: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct ConfigError(String);
struct RuntimeError(String);

fn load_atg(path: &Option<PathBuf>) -> Result<Arc<Atg>, ConfigError> {
    match path {
        None => Ok(manager_worker_atg(6)),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("read {}: {}", path.display(), e)))?;
            parse_atg(&text)
                .map(Arc::new)
                .map_err(|e| ConfigError(format!("{}: {}", path.display(), e)))
        }
    }
}

fn load_scenario(name: &str, atg: &Atg) -> Result<LoadScenario, ConfigError> {
    let workers = atg.num_machines().saturating_sub(1);
    if let Some(sc) = builtin_scenario(name, workers) {
        return Ok(sc);
    }
    let text = std::fs::read_to_string(name)
        .map_err(|e| ConfigError(format!("scenario {}: {}", name, e)))?;
    LoadScenario::parse(&text).map_err(|e| ConfigError(format!("scenario {}: {}", name, e)))
}

fn write_report(out: &Option<PathBuf>, tsv: &str) -> Result<(), RuntimeError> {
    match out {
        None => {
            print!("{}", tsv);
            Ok(())
        }
        Some(path) => std::fs::write(path, tsv)
            .map_err(|e| RuntimeError(format!("write {}: {}", path.display(), e))),
    }
}

fn cmd_run_sim(
    common: &CommonRunArgs,
    mode: Mode,
    ports: usize,
    vector_size: usize,
    period: u64,
) -> Result<(), RuntimeError> {
    let atg = load_atg(&common.config).map_err(|e| RuntimeError(e.0))?;
    let scenario = load_scenario(&common.scenario, &atg).map_err(|e| RuntimeError(e.0))?;
    let mut cfg = AppRunConfig::new(atg, ports, vector_size);
    cfg.mode = mode;
    cfg.scenario = scenario;
    cfg.seed = common.seed;
    cfg.monitoring_period_ms = (period > 0).then_some(period as f64);
    let outcome = run_app_sim(&cfg).map_err(|e| RuntimeError(e.to_string()))?;
    if !outcome.report.failures.is_empty() {
        return Err(RuntimeError(format!("task failures: {:?}", outcome.report.failures)));
    }
    let manager = outcome
        .manager
        .as_ref()
        .ok_or_else(|| RuntimeError("manager produced no result".into()))?;
    println!("elapsed_virtual_ms\t{:.3}", outcome.elapsed_ms());
    println!("elapsed_virtual_min\t{:.4}", outcome.elapsed_minutes());
    let partition: Vec<String> =
        manager.rounds[0].counts.iter().map(|c| c.to_string()).collect();
    println!("partition\t{}", partition.join(","));
    println!("partition_stamp\t{}", manager.rounds[0].stamp);
    if !manager.result.missing_rows.is_empty() {
        println!("missing_rows\t{:?}", manager.result.missing_rows);
    }
    println!("max_imag_residue\t{:.3e}", manager.result.max_imag_residue);
    Ok(())
}

fn cmd_run_real(
    common: &CommonRunArgs,
    mode: Mode,
    ports: usize,
    vector_size: usize,
    period: u64,
) -> Result<(), RuntimeError> {
    // Write the effective config to a temp dir, then spawn one child process
    // per machine re-executing this binary with the hidden subcommand.
    let atg = load_atg(&common.config).map_err(|e| RuntimeError(e.0))?;
    let dir = std::env::temp_dir().join(format!("qosnow-run-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| RuntimeError(e.to_string()))?;
    let config_path = dir.join("app.atg");
    let doc = match &common.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| RuntimeError(e.to_string()))?,
        None => manager_worker_doc(6, 7700),
    };
    std::fs::write(&config_path, &doc).map_err(|e| RuntimeError(e.to_string()))?;

    let exe = std::env::current_exe().map_err(|e| RuntimeError(e.to_string()))?;
    let mode_str = match mode {
        Mode::Adaptive => "adaptive",
        Mode::NonAdaptive => "nonadaptive",
    };
    let mut children = Vec::new();
    for rank in 0..atg.num_machines() {
        let child = std::process::Command::new(&exe)
            .args([
                "__machine",
                "--config",
                config_path.to_str().unwrap(),
                "--rank",
                &rank.to_string(),
                "--mode",
                mode_str,
                "--ports",
                &ports.to_string(),
                "--vector-size",
                &vector_size.to_string(),
                "--period",
                &period.to_string(),
                "--seed",
                &common.seed.to_string(),
            ])
            .spawn()
            .map_err(|e| RuntimeError(format!("spawn machine {}: {}", rank, e)))?;
        children.push(child);
    }
    let mut failed = false;
    for (rank, mut child) in children.into_iter().enumerate() {
        let status = child.wait().map_err(|e| RuntimeError(e.to_string()))?;
        if !status.success() {
            eprintln!("machine {} exited with {}", rank, status);
            failed = true;
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    if failed {
        return Err(RuntimeError("one or more machine processes failed".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_machine(
    config: &PathBuf,
    rank: usize,
    mode: &str,
    ports: usize,
    vector_size: usize,
    period: u64,
    seed: u64,
) -> Result<(), RuntimeError> {
    let text = std::fs::read_to_string(config).map_err(|e| RuntimeError(e.to_string()))?;
    let atg = Arc::new(parse_atg(&text).map_err(|e| RuntimeError(e.to_string()))?);
    let spec = CircuitSpec::generate(seed, ports, vector_size, false);
    let app = RealAppConfig {
        spec,
        manager_cfg: ManagerCfg {
            mode: if mode == "adaptive" { Mode::Adaptive } else { Mode::NonAdaptive },
            ..ManagerCfg::default()
        },
        worker_cfg: WorkerCfg::default(),
        monitoring_enabled: period > 0,
        period_ms: if period > 0 { period as f64 } else { 30_000.0 },
        ping_timeout_ms: 1000.0,
    };
    let started = std::time::Instant::now();
    let outcome = run_machine(Arc::clone(&atg), rank, app).map_err(RuntimeError)?;
    if let Some(manager) = outcome.manager_outcome {
        println!("elapsed_real_ms\t{:.3}", started.elapsed().as_secs_f64() * 1000.0);
        let partition: Vec<String> =
            manager.rounds[0].counts.iter().map(|c| c.to_string()).collect();
        println!("partition\t{}", partition.join(","));
        if !manager.result.missing_rows.is_empty() {
            println!("missing_rows\t{:?}", manager.result.missing_rows);
        }
    }
    Ok(())
}

fn cmd_validate(config: &Option<PathBuf>, scenario: &Option<String>) -> Result<(), ConfigError> {
    let atg = load_atg(config)?;
    println!(
        "config ok: {} machines, {} tasks, {} links, master {}",
        atg.num_machines(),
        atg.num_tasks(),
        atg.links.len(),
        atg.machines[atg.master_rank()].name
    );
    if let Some(name) = scenario {
        let sc = load_scenario(name, &atg)?;
        for machine in sc.patterns.keys() {
            if !atg.machines.iter().any(|m| &m.name == machine) {
                return Err(ConfigError(format!("scenario names unknown machine `{}`", machine)));
            }
        }
        println!("scenario ok: {} machine pattern(s)", sc.patterns.len());
    }
    Ok(())
}

fn real_main() -> Result<(), ExitCode> {
    let cli = Cli::parse();
    let config_fail = |e: ConfigError| {
        eprintln!("configuration error: {}", e.0);
        ExitCode::from(EXIT_CONFIG)
    };
    let runtime_fail = |e: RuntimeError| {
        eprintln!("runtime failure: {}", e.0);
        ExitCode::from(EXIT_RUNTIME)
    };
    match cli.command {
        Command::Run { common, mode, ports, vector_size, period, sim: _, real } => {
            let mode = if mode == "adaptive" { Mode::Adaptive } else { Mode::NonAdaptive };
            if real {
                cmd_run_real(&common, mode, ports, vector_size, period).map_err(runtime_fail)?;
            } else {
                cmd_run_sim(&common, mode, ports, vector_size, period).map_err(runtime_fail)?;
            }
            Ok(())
        }
        Command::Bench { which } => match which {
            BenchCommand::Adapt { common, sim: _, period, out } => {
                let atg = load_atg(&common.config).map_err(config_fail)?;
                let scenario = load_scenario(&common.scenario, &atg).map_err(config_fail)?;
                let mut cfg =
                    AdaptExperimentConfig::new(atg, scenario, &common.scenario, common.seed);
                cfg.period_ms = period as f64;
                let report = run_adaptation_experiment(&cfg)
                    .map_err(|e| runtime_fail(RuntimeError(e.to_string())))?;
                write_report(&out, &report.to_tsv()).map_err(runtime_fail)?;
                Ok(())
            }
            BenchCommand::Overhead { common, sim: _, out } => {
                let atg = load_atg(&common.config).map_err(config_fail)?;
                let cfg = OverheadExperimentConfig::new(atg, common.seed);
                let report = run_overhead_experiment(&cfg)
                    .map_err(|e| runtime_fail(RuntimeError(e.to_string())))?;
                write_report(&out, &report.to_tsv()).map_err(runtime_fail)?;
                Ok(())
            }
        },
        Command::Loadgen { targets, pattern, duration_ms } => {
            let pattern = parse_pattern(&pattern).map_err(|e| config_fail(ConfigError(e)))?;
            let cfg = LoadGenConfig { targets, pattern, duration_ms, ..LoadGenConfig::default() };
            if !cfg.targets.is_empty() {
                eprintln!(
                    "note: loading this host; start one generator per target machine ({})",
                    cfg.targets.join(",")
                );
            }
            run_loadgen(&cfg, Arc::new(AtomicBool::new(false)));
            Ok(())
        }
        Command::Validate { config, scenario } => {
            cmd_validate(&config, &scenario).map_err(config_fail)?;
            Ok(())
        }
        Command::Machine { config, rank, mode, ports, vector_size, period, seed } => {
            cmd_machine(&config, rank, &mode, ports, vector_size, period, seed)
                .map_err(runtime_fail)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
