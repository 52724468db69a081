//! End-to-end simulated application runs: the manager-worker demo over the
//! full middleware stack on the virtual clock.

use std::sync::Arc;

use num_complex::Complex64;
use qosnow::atg::parse_atg;
use qosnow::circuit::{CircuitSpec, Mode};
use qosnow::harness::run::{run_app_sim, AppRunConfig};
use qosnow::harness::topology::{builtin_scenario, manager_worker_atg};
use qosnow::qos::data::TaskState;
use qosnow::qos::wire::Opcode;
use qosnow::sim::{KillSpec, KillTrigger, SimCluster, SimConfig};

/// Sequential oracle: direct FD currents plus a textbook inverse DFT.
fn oracle_currents(spec: &CircuitSpec) -> Vec<Vec<f64>> {
    let n = spec.num_ports;
    let s = spec.vector_size;
    let mut out = Vec::with_capacity(n);
    for row in 0..n {
        let mut fd = vec![Complex64::new(0.0, 0.0); s];
        for k in 0..n {
            let y = spec.y[row * n + k];
            for (acc, v) in fd.iter_mut().zip(&spec.voltages[k]) {
                *acc += y * v;
            }
        }
        let mut td = Vec::with_capacity(s);
        for t in 0..s {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, v) in fd.iter().enumerate() {
                let angle = 2.0 * std::f64::consts::PI * (t * k) as f64 / s as f64;
                acc += v * Complex64::new(angle.cos(), angle.sin());
            }
            td.push(acc.re / s as f64);
        }
        out.push(td);
    }
    out
}

fn max_abs_error(result: &[Vec<f64>], oracle: &[Vec<f64>]) -> f64 {
    let mut err: f64 = 0.0;
    for (got, want) in result.iter().zip(oracle) {
        assert_eq!(got.len(), want.len(), "row length mismatch");
        for (g, w) in got.iter().zip(want) {
            err = err.max((g - w).abs());
        }
    }
    err
}

#[test]
fn fault_free_run_matches_oracle() {
    let atg = manager_worker_atg(4);
    let mut cfg = AppRunConfig::new(atg, 8, 32);
    cfg.seed = 42;
    let outcome = run_app_sim(&cfg).expect("simulation completes");
    assert!(outcome.report.failures.is_empty(), "failures: {:?}", outcome.report.failures);

    let manager = outcome.manager.expect("manager finished");
    assert!(manager.result.missing_rows.is_empty());
    let oracle = oracle_currents(&outcome.spec);
    let err = max_abs_error(&manager.result.currents, &oracle);
    assert!(err < 1e-9, "max abs error {}", err);

    // non-adaptive: even split 8 over 4 workers
    assert_eq!(manager.rounds[0].counts, vec![2, 2, 2, 2]);

    // every task completed
    for (_, (_, state)) in &outcome.report.completions {
        assert_eq!(*state, TaskState::Completed);
    }
}

#[test]
fn adaptive_partition_follows_load1_workloads() {
    let atg = manager_worker_atg(6);
    let mut cfg = AppRunConfig::new(atg, 60, 16);
    cfg.mode = Mode::Adaptive;
    cfg.scenario = builtin_scenario("load1", 6).unwrap();
    cfg.seed = 7;
    let outcome = run_app_sim(&cfg).expect("simulation completes");
    assert!(outcome.report.failures.is_empty(), "failures: {:?}", outcome.report.failures);
    let manager = outcome.manager.expect("manager finished");
    // workloads (0,0,0,2,2,2) -> costs (1,1,1,3,3,3) -> (15,15,15,5,5,5)
    assert_eq!(manager.rounds[0].counts, vec![15, 15, 15, 5, 5, 5]);
    assert!(manager.rounds[0].stamp >= 1, "partition used a real measurement");

    // the result is still exact
    let oracle = oracle_currents(&outcome.spec);
    assert!(max_abs_error(&manager.result.currents, &oracle) < 1e-9);
}

#[test]
fn adaptation_beats_even_split_under_load1() {
    let atg = manager_worker_atg(6);
    let mut base = AppRunConfig::new(atg, 60, 500);
    base.scenario = builtin_scenario("load1", 6).unwrap();
    base.compute_numerics = false; // timing-only
    base.seed = 11;

    let mut non_adaptive = base.clone();
    non_adaptive.mode = Mode::NonAdaptive;
    non_adaptive.monitoring_period_ms = None;
    let no_qos = run_app_sim(&non_adaptive).unwrap();

    let mut adaptive = base;
    adaptive.mode = Mode::Adaptive;
    adaptive.monitoring_period_ms = Some(30_000.0);
    let with_qos = run_app_sim(&adaptive).unwrap();

    let no = no_qos.elapsed_ms();
    let with = with_qos.elapsed_ms();
    let diff_pct = (no - with) / no * 100.0;
    assert!(
        (35.0..=55.0).contains(&diff_pct),
        "Diff/No% = {:.1} (no={:.0} ms, with={:.0} ms)",
        diff_pct,
        no,
        with
    );
}

#[test]
fn peer_fetch_traffic_is_minimal() {
    // Fig. 1-shaped graph: hub task on master, leaves on two other machines.
    let atg = Arc::new(
        parse_atg(
            "\
machine m1 host=simhost-a.invalid port=7700 master
machine m2 host=simhost-b.invalid port=7710
machine m3 host=simhost-c.invalid port=7720
task t1 machine=m1 ports=3 impl=hub
task t2 machine=m2 ports=1 impl=leaf
task t3 machine=m2 ports=1 impl=leaf
task t4 machine=m3 ports=1 impl=leaf
link t1.0 t2.0
link t1.1 t3.0
link t1.2 t4.0
",
        )
        .unwrap(),
    );
    let mut sim_cfg = SimConfig::new(Arc::clone(&atg));
    sim_cfg.period_ms = 1000.0;
    sim_cfg.launch_stagger_ms = 100.0;
    let mut cluster = SimCluster::new(sim_cfg);
    for t in 0..4 {
        cluster.set_task_body(
            t,
            Box::new(|ctx| {
                ctx.runtime.sleep_ms(3500.0)?;
                Ok(())
            }),
        );
    }
    let report = cluster.run().unwrap();

    let attrs_op = Opcode::GetMachAttrs as u8;
    let fetches: Vec<((usize, usize), u64)> = report
        .traffic
        .iter()
        .filter(|((_, _, op), _)| *op == attrs_op)
        .map(|((s, d, _), count)| ((*s, *d), *count))
        .collect();
    // master (m1) pulls everyone; m2 and m3 contact only m1; nobody else talks
    for ((src, dst), count) in &fetches {
        assert!(*count > 0);
        match src {
            0 => assert!(*dst == 1 || *dst == 2, "master may pull every machine"),
            1 | 2 => assert_eq!(*dst, 0, "worker machines fetch from the master only"),
            _ => panic!("unexpected fetch source {}", src),
        }
    }
    assert!(fetches.iter().any(|((s, d), _)| (*s, *d) == (1, 0)));
    assert!(fetches.iter().any(|((s, d), _)| (*s, *d) == (2, 0)));
    // several cycles happened and stamps advanced on every machine
    for stamp in &report.local_stamps {
        assert!(*stamp >= 2, "stamps: {:?}", report.local_stamps);
    }
    assert!(report.global_stamp >= 2);
}

#[test]
fn killed_worker_rows_recovered_by_survivors() {
    let atg = manager_worker_atg(4);
    let mut cfg = AppRunConfig::new(atg, 8, 16);
    cfg.seed = 5;
    cfg.monitoring_period_ms = Some(500.0); // fast detection
    cfg.kills.push(KillSpec {
        task_rank: 2, // worker2
        trigger: KillTrigger::AtCheckpoint("payload_received".into()),
    });
    let outcome = run_app_sim(&cfg).expect("simulation completes");
    let manager = outcome.manager.expect("manager finished despite the death");
    assert!(manager.result.missing_rows.is_empty(), "recovery filled in the dead worker's rows");
    let oracle = oracle_currents(&outcome.spec);
    assert!(max_abs_error(&manager.result.currents, &oracle) < 1e-9);
    // the dead worker is recorded dead, everyone else completed
    assert_eq!(outcome.report.completions[&2].1, TaskState::Dead);
    assert_eq!(outcome.report.completions[&0].1, TaskState::Completed);
}

#[test]
fn recovery_off_reports_exactly_the_dead_rows() {
    let atg = manager_worker_atg(4);
    let mut cfg = AppRunConfig::new(atg, 8, 16);
    cfg.seed = 5;
    cfg.recovery = false;
    cfg.monitoring_period_ms = Some(500.0);
    cfg.kills.push(KillSpec {
        task_rank: 3, // worker3: rows 4..6 with the even split of 8 over 4
        trigger: KillTrigger::AtCheckpoint("payload_received".into()),
    });
    let outcome = run_app_sim(&cfg).expect("simulation completes");
    let manager = outcome.manager.expect("manager finished");
    assert_eq!(manager.result.missing_rows, vec![4, 5]);
    // all other rows still match the oracle
    let oracle = oracle_currents(&outcome.spec);
    for (row, (got, want)) in manager.result.currents.iter().zip(&oracle).enumerate() {
        if manager.result.missing_rows.contains(&row) {
            assert!(got.is_empty());
        } else {
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn identical_seeds_replay_identical_runs() {
    let make = || {
        let atg = manager_worker_atg(6);
        let mut cfg = AppRunConfig::new(atg, 12, 64);
        cfg.scenario = builtin_scenario("load2", 6).unwrap();
        cfg.mode = Mode::Adaptive;
        cfg.seed = 99;
        run_app_sim(&cfg).unwrap()
    };
    let a = make();
    let b = make();
    assert_eq!(a.report.app_elapsed_ms, b.report.app_elapsed_ms);
    assert_eq!(a.report.traffic, b.report.traffic);
    assert_eq!(a.report.local_stamps, b.report.local_stamps);
    assert_eq!(
        a.manager.unwrap().result.currents,
        b.manager.unwrap().result.currents
    );
}
