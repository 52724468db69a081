//! Measurement providers: machine attributes, machine up/down state, and
//! task liveness.
//!
//! Everything is behind the [`ProbeProvider`] trait so the same middleware
//! runs against the real OS or a simulated cluster. The real provider reads
//! the standard Linux introspection surfaces (`/proc/loadavg`, `/proc/meminfo`,
//! `/proc/cpuinfo`); reachability pings and PID listings go over the
//! middleware's own wire protocol so no elevated privileges are needed.
//!
//! Scenario files for the simulated provider use one directive per line:
//!
//! ```text
//! load <machine_name> static <k>
//! load <machine_name> oscillate <peak> <period_ms>
//! load <machine_name> at <t_ms> <value>
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::qos::data::{MachState, MachineAttributes, TaskPid, TaskState};

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("scenario line {line}: {msg}")]
    Scenario { line: usize, msg: String },
}

/// Effective CPU speed a job will see on a machine, accounting for
/// contention: `factor * min_cpu_speed` where the factor is 1 while
/// `(1 + workload) <= num_cpus` and `num_cpus / (1 + workload)` beyond.
pub fn effective_speed(
    num_cpus: u32,
    workload: f64,
    min_cpu_speed_mhz: f64,
) -> Result<f64, ProbeError> {
    if num_cpus < 1 {
        return Err(ProbeError::Domain("num_cpus must be >= 1".into()));
    }
    if !(workload >= 0.0) {
        return Err(ProbeError::Domain("workload must be >= 0".into()));
    }
    if !(min_cpu_speed_mhz > 0.0) {
        return Err(ProbeError::Domain("cpu speed must be > 0".into()));
    }
    let n = num_cpus as f64;
    let factor = if (1.0 + workload) <= n { 1.0 } else { n / (1.0 + workload) };
    Ok(factor * min_cpu_speed_mhz)
}

/// Static facts about a machine, read once.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineStatics {
    pub os_type: String,
    pub cpu_speed_mhz: f64,
    pub num_cpus: u32,
}

/// Source of raw machine measurements, liveness pings, and PID listings.
///
/// `ping` and `list_pids` address machines by rank; host resolution is the
/// provider's concern, keeping callers anonymous.
pub trait ProbeProvider: Send + Sync {
    fn statics(&self, machine_rank: usize) -> Result<MachineStatics, ProbeError>;
    fn workload(&self, machine_rank: usize) -> Result<f64, ProbeError>;
    fn free_ram_bytes(&self, machine_rank: usize) -> Result<u64, ProbeError>;
    fn free_swap_bytes(&self, machine_rank: usize) -> Result<u64, ProbeError>;
    /// One reachability probe round-trip. `true` means the machine answered
    /// within the timeout.
    fn ping(&self, machine_rank: usize, timeout_ms: f64) -> bool;
    /// Task ids currently alive on a machine (middleware-registered).
    fn list_pids(&self, machine_rank: usize) -> Result<Vec<TaskPid>, ProbeError>;
    /// Pause between the two ping attempts of a state check.
    fn ping_retry_pause(&self, _pause_ms: f64) {}
}

/// Two consecutive pings decide the machine state: one success is enough for
/// `Up`, `Down` requires both to fail.
pub fn machine_state(
    provider: &dyn ProbeProvider,
    machine_rank: usize,
    timeout_ms: f64,
    retry_pause_ms: f64,
) -> MachState {
    if provider.ping(machine_rank, timeout_ms) {
        return MachState::Up;
    }
    provider.ping_retry_pause(retry_pause_ms);
    if provider.ping(machine_rank, timeout_ms) {
        MachState::Up
    } else {
        MachState::Down
    }
}

/// Refreshes a recorded task state. `Init` and the terminal states pass
/// through; a `Running` task is checked against its machine (down means dead)
/// and then against the live PID list.
pub fn task_state(
    provider: &dyn ProbeProvider,
    recorded: &TaskState,
    machine_rank: usize,
    ping_timeout_ms: f64,
    retry_pause_ms: f64,
) -> TaskState {
    match recorded {
        TaskState::Running { pid } => {
            if machine_state(provider, machine_rank, ping_timeout_ms, retry_pause_ms)
                == MachState::Down
            {
                return TaskState::Dead;
            }
            match provider.list_pids(machine_rank) {
                Ok(pids) if pids.contains(pid) => TaskState::Running { pid: *pid },
                _ => TaskState::Dead,
            }
        }
        other => other.clone(),
    }
}

/// Full machine attribute record. On provider failure the machine is marked
/// down and the last-known statics are retained.
pub fn probe_machine(
    provider: &dyn ProbeProvider,
    machine_rank: usize,
    last_known: &MachineAttributes,
    ping_timeout_ms: f64,
    retry_pause_ms: f64,
) -> MachineAttributes {
    let statics = match provider.statics(machine_rank) {
        Ok(s) => s,
        Err(_) => {
            let mut attrs = last_known.clone();
            attrs.mach_state = MachState::Down;
            return attrs;
        }
    };
    let dynamics = (|| -> Result<(f64, u64, u64), ProbeError> {
        Ok((
            provider.workload(machine_rank)?,
            provider.free_ram_bytes(machine_rank)?,
            provider.free_swap_bytes(machine_rank)?,
        ))
    })();
    match dynamics {
        Ok((workload, ram, swap)) => {
            let eff = effective_speed(statics.num_cpus, workload, statics.cpu_speed_mhz)
                .unwrap_or(statics.cpu_speed_mhz);
            MachineAttributes {
                os_type: statics.os_type,
                cpu_speed_mhz: statics.cpu_speed_mhz,
                num_cpus: statics.num_cpus,
                workload,
                effective_speed_mhz: eff,
                free_ram_bytes: ram,
                free_swap_bytes: swap,
                mach_state: machine_state(provider, machine_rank, ping_timeout_ms, retry_pause_ms),
            }
        }
        Err(_) => {
            let mut attrs = last_known.clone();
            attrs.mach_state = MachState::Down;
            attrs
        }
    }
}

/// A per-machine workload schedule for the simulated provider.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadPattern {
    Static(f64),
    /// Alternates `peak` and zero every `half_period_ms`, starting at `peak`.
    Oscillate { peak: f64, half_period_ms: u64 },
    /// Explicit steps `(virtual_time_ms, workload)`, times strictly increasing.
    Steps(Vec<(u64, f64)>),
}

impl LoadPattern {
    /// Workload at virtual time `t_ms`. Transitions take effect exactly at
    /// their scheduled instant.
    pub fn at(&self, t_ms: f64) -> f64 {
        match self {
            LoadPattern::Static(k) => *k,
            LoadPattern::Oscillate { peak, half_period_ms } => {
                let phase = (t_ms / *half_period_ms as f64).floor() as i64;
                if phase % 2 == 0 {
                    *peak
                } else {
                    0.0
                }
            }
            LoadPattern::Steps(steps) => {
                let mut value = 0.0;
                for (at, v) in steps {
                    if (*at as f64) <= t_ms {
                        value = *v;
                    } else {
                        break;
                    }
                }
                value
            }
        }
    }

    /// Next instant strictly after `t_ms` at which the value may change, if
    /// any. Lets the simulator integrate piecewise-constant load exactly.
    pub fn next_change_after(&self, t_ms: f64) -> Option<f64> {
        match self {
            LoadPattern::Static(_) => None,
            LoadPattern::Oscillate { half_period_ms, .. } => {
                let h = *half_period_ms as f64;
                let k = (t_ms / h).floor() + 1.0;
                Some(k * h)
            }
            LoadPattern::Steps(steps) => steps
                .iter()
                .map(|(at, _)| *at as f64)
                .find(|at| *at > t_ms),
        }
    }
}

/// Scenario: named machines mapped to load patterns. Machines not mentioned
/// are idle (workload 0).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadScenario {
    pub patterns: BTreeMap<String, LoadPattern>,
}

impl LoadScenario {
    pub fn pattern_for(&self, machine_name: &str) -> LoadPattern {
        self.patterns.get(machine_name).cloned().unwrap_or(LoadPattern::Static(0.0))
    }

    pub fn parse(text: &str) -> Result<LoadScenario, ProbeError> {
        let mut patterns: BTreeMap<String, LoadPattern> = BTreeMap::new();
        let mut steps: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stmt = raw.split('#').next().unwrap_or("").trim();
            if stmt.is_empty() {
                continue;
            }
            let toks: Vec<&str> = stmt.split_whitespace().collect();
            if toks.len() < 4 || toks[0] != "load" {
                return Err(ProbeError::Scenario {
                    line,
                    msg: "expected `load <machine> static|oscillate|at ...`".into(),
                });
            }
            let machine = toks[1].to_string();
            match toks[2] {
                "static" => {
                    let k: f64 = toks[3].parse().map_err(|_| ProbeError::Scenario {
                        line,
                        msg: "bad static workload value".into(),
                    })?;
                    if k < 0.0 {
                        return Err(ProbeError::Scenario { line, msg: "negative workload".into() });
                    }
                    patterns.insert(machine, LoadPattern::Static(k));
                }
                "oscillate" => {
                    if toks.len() != 5 {
                        return Err(ProbeError::Scenario {
                            line,
                            msg: "expected `oscillate <peak> <period_ms>`".into(),
                        });
                    }
                    let peak: f64 = toks[3].parse().map_err(|_| ProbeError::Scenario {
                        line,
                        msg: "bad peak value".into(),
                    })?;
                    let period: u64 = toks[4].parse().map_err(|_| ProbeError::Scenario {
                        line,
                        msg: "bad period".into(),
                    })?;
                    if period == 0 {
                        return Err(ProbeError::Scenario { line, msg: "zero period".into() });
                    }
                    patterns.insert(machine, LoadPattern::Oscillate { peak, half_period_ms: period });
                }
                "at" => {
                    if toks.len() != 5 {
                        return Err(ProbeError::Scenario {
                            line,
                            msg: "expected `at <t_ms> <value>`".into(),
                        });
                    }
                    let at: u64 = toks[3].parse().map_err(|_| ProbeError::Scenario {
                        line,
                        msg: "bad time".into(),
                    })?;
                    let v: f64 = toks[4].parse().map_err(|_| ProbeError::Scenario {
                        line,
                        msg: "bad value".into(),
                    })?;
                    let entry = steps.entry(machine).or_default();
                    if let Some((last, _)) = entry.last() {
                        if *last >= at {
                            return Err(ProbeError::Scenario {
                                line,
                                msg: "step times must be strictly increasing".into(),
                            });
                        }
                    }
                    entry.push((at, v));
                }
                other => {
                    return Err(ProbeError::Scenario {
                        line,
                        msg: format!("unknown pattern `{}`", other),
                    });
                }
            }
        }
        for (machine, s) in steps {
            patterns.insert(machine, LoadPattern::Steps(s));
        }
        Ok(LoadScenario { patterns })
    }
}

/// Real-host provider: OS introspection for the local machine, wire-protocol
/// pings and PID listings for every machine (including the local one).
pub mod host {
    use super::*;
    use std::sync::Arc;

    use crate::runtime::WireClient;

    pub struct HostProbeProvider {
        local_rank: usize,
        wire: Arc<dyn WireClient>,
    }

    impl HostProbeProvider {
        pub fn new(local_rank: usize, wire: Arc<dyn WireClient>) -> Self {
            HostProbeProvider { local_rank, wire }
        }
    }

    fn read_proc(path: &str) -> Result<String, ProbeError> {
        std::fs::read_to_string(path)
            .map_err(|e| ProbeError::Provider(format!("read {}: {}", path, e)))
    }

    /// 1-minute load average from `/proc/loadavg`.
    pub fn load_average_1min() -> Result<f64, ProbeError> {
        let text = read_proc("/proc/loadavg")?;
        text.split_whitespace()
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ProbeError::Provider("malformed /proc/loadavg".into()))
    }

    /// Minimum "cpu MHz" across cores, falling back to 1000 when absent
    /// (e.g. on machines that do not expose per-core frequency).
    pub fn min_cpu_speed_mhz() -> f64 {
        let Ok(text) = std::fs::read_to_string("/proc/cpuinfo") else {
            return 1000.0;
        };
        let mut min: Option<f64> = None;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("cpu MHz") {
                if let Some(v) = rest.split(':').nth(1).and_then(|s| s.trim().parse::<f64>().ok()) {
                    min = Some(min.map_or(v, |m: f64| m.min(v)));
                }
            }
        }
        min.unwrap_or(1000.0)
    }

    fn meminfo_kb(key: &str) -> Result<u64, ProbeError> {
        let text = read_proc("/proc/meminfo")?;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix(key) {
                let v = rest
                    .trim_start_matches(':')
                    .split_whitespace()
                    .next()
                    .and_then(|s| s.parse::<u64>().ok());
                if let Some(kb) = v {
                    return Ok(kb);
                }
            }
        }
        Err(ProbeError::Provider(format!("{} not in /proc/meminfo", key)))
    }

    impl ProbeProvider for HostProbeProvider {
        fn statics(&self, machine_rank: usize) -> Result<MachineStatics, ProbeError> {
            if machine_rank != self.local_rank {
                return Err(ProbeError::Provider("statics are local-only".into()));
            }
            Ok(MachineStatics {
                os_type: std::env::consts::OS.to_string(),
                cpu_speed_mhz: min_cpu_speed_mhz(),
                num_cpus: std::thread::available_parallelism().map(|n| n.get() as u32).unwrap_or(1),
            })
        }

        fn workload(&self, machine_rank: usize) -> Result<f64, ProbeError> {
            if machine_rank != self.local_rank {
                return Err(ProbeError::Provider("workload is local-only".into()));
            }
            load_average_1min()
        }

        fn free_ram_bytes(&self, _machine_rank: usize) -> Result<u64, ProbeError> {
            meminfo_kb("MemAvailable").or_else(|_| meminfo_kb("MemFree")).map(|kb| kb * 1024)
        }

        fn free_swap_bytes(&self, _machine_rank: usize) -> Result<u64, ProbeError> {
            meminfo_kb("SwapFree").map(|kb| kb * 1024)
        }

        fn ping(&self, machine_rank: usize, timeout_ms: f64) -> bool {
            self.wire.ping(machine_rank, timeout_ms)
        }

        fn list_pids(&self, machine_rank: usize) -> Result<Vec<TaskPid>, ProbeError> {
            self.wire
                .list_pids(machine_rank)
                .map_err(|e| ProbeError::Provider(format!("list_pids: {}", e)))
        }

        fn ping_retry_pause(&self, pause_ms: f64) {
            std::thread::sleep(std::time::Duration::from_micros((pause_ms * 1000.0) as u64));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    #[test]
    fn effective_speed_matches_hand_evaluated_cases() {
        // factor = 1/3 on a single-CPU machine with two competing processes
        assert_eq!(effective_speed(1, 2.0, 333.0).unwrap(), 111.0);
        // idle multiprocessor keeps its full rating
        assert_eq!(effective_speed(4, 0.0, 1000.0).unwrap(), 1000.0);
        // boundary (1 + 1) <= 2 stays in the factor-1 branch
        assert_eq!(effective_speed(2, 1.0, 333.0).unwrap(), 333.0);
        // factor = 1/2
        assert_eq!(effective_speed(1, 1.0, 500.0).unwrap(), 250.0);
    }

    #[test]
    fn effective_speed_rejects_domain_violations() {
        assert!(effective_speed(0, 0.0, 333.0).is_err());
        assert!(effective_speed(1, -0.5, 333.0).is_err());
        assert!(effective_speed(1, 0.0, 0.0).is_err());
    }

    #[test]
    fn effective_speed_continuous_and_bounded() {
        for n in 1..=4u32 {
            let mut last = f64::INFINITY;
            for i in 0..=80 {
                let w = i as f64 * 0.1;
                let s = effective_speed(n, w, 333.0).unwrap();
                assert!(s <= 333.0 + 1e-12);
                assert!(s <= last + 1e-12, "non-increasing in workload");
                if 1.0 + w <= n as f64 {
                    assert_eq!(s, 333.0);
                }
                last = s;
            }
            // both branches agree exactly at the seam
            let w = n as f64 - 1.0;
            assert_eq!(effective_speed(n, w, 333.0).unwrap(), 333.0);
        }
    }

    struct ScriptedProvider {
        statics: MachineStatics,
        workload: f64,
        ping_results: Mutex<Vec<bool>>,
        pids: Vec<TaskPid>,
        fail_dynamics: bool,
    }

    impl ScriptedProvider {
        fn new(workload: f64) -> Self {
            ScriptedProvider {
                statics: MachineStatics {
                    os_type: "simos".into(),
                    cpu_speed_mhz: 333.0,
                    num_cpus: 1,
                },
                workload,
                ping_results: Mutex::new(vec![]),
                pids: vec![],
                fail_dynamics: false,
            }
        }

        fn with_pings(mut self, pings: Vec<bool>) -> Self {
            self.ping_results = Mutex::new(pings);
            self
        }
    }

    impl ProbeProvider for ScriptedProvider {
        fn statics(&self, _m: usize) -> Result<MachineStatics, ProbeError> {
            Ok(self.statics.clone())
        }
        fn workload(&self, _m: usize) -> Result<f64, ProbeError> {
            if self.fail_dynamics {
                Err(ProbeError::Provider("scripted failure".into()))
            } else {
                Ok(self.workload)
            }
        }
        fn free_ram_bytes(&self, _m: usize) -> Result<u64, ProbeError> {
            Ok(64 << 20)
        }
        fn free_swap_bytes(&self, _m: usize) -> Result<u64, ProbeError> {
            Ok(128 << 20)
        }
        fn ping(&self, _m: usize, _t: f64) -> bool {
            let mut results = self.ping_results.lock().unwrap();
            if results.is_empty() {
                true
            } else {
                results.remove(0)
            }
        }
        fn list_pids(&self, _m: usize) -> Result<Vec<TaskPid>, ProbeError> {
            Ok(self.pids.clone())
        }
    }

    #[test]
    fn probe_machine_computes_effective_speed() {
        let p = ScriptedProvider::new(2.0);
        let attrs = probe_machine(&p, 0, &MachineAttributes::default(), 100.0, 10.0);
        assert_eq!(attrs.effective_speed_mhz, 111.0);
        assert_eq!(attrs.workload, 2.0);
        assert_eq!(attrs.mach_state, MachState::Up);
    }

    #[test]
    fn probe_machine_fresh_machine_is_idle() {
        let p = ScriptedProvider::new(0.0);
        let attrs = probe_machine(&p, 0, &MachineAttributes::default(), 100.0, 10.0);
        assert_eq!(attrs.workload, 0.0);
        assert_eq!(attrs.effective_speed_mhz, 333.0);
    }

    #[test]
    fn probe_failure_marks_down_and_keeps_statics() {
        let mut p = ScriptedProvider::new(1.0);
        p.fail_dynamics = true;
        let mut last = MachineAttributes::default();
        last.cpu_speed_mhz = 333.0;
        last.os_type = "simos".into();
        let attrs = probe_machine(&p, 0, &last, 100.0, 10.0);
        assert_eq!(attrs.mach_state, MachState::Down);
        assert_eq!(attrs.cpu_speed_mhz, 333.0);
        assert_eq!(attrs.os_type, "simos");
    }

    #[test]
    fn machine_state_two_ping_rule() {
        let both_ok = ScriptedProvider::new(0.0).with_pings(vec![true, true]);
        assert_eq!(machine_state(&both_ok, 0, 100.0, 10.0), MachState::Up);

        let second_saves = ScriptedProvider::new(0.0).with_pings(vec![false, true]);
        assert_eq!(machine_state(&second_saves, 0, 100.0, 10.0), MachState::Up);

        let both_fail = ScriptedProvider::new(0.0).with_pings(vec![false, false]);
        assert_eq!(machine_state(&both_fail, 0, 100.0, 10.0), MachState::Down);
    }

    #[test]
    fn task_state_detection_rules() {
        let pid = TaskPid(42);

        // host down -> dead
        let down = ScriptedProvider::new(0.0).with_pings(vec![false, false]);
        assert_eq!(
            task_state(&down, &TaskState::Running { pid }, 0, 100.0, 10.0),
            TaskState::Dead
        );

        // host up, pid present -> running
        let mut up = ScriptedProvider::new(0.0);
        up.pids = vec![pid];
        assert_eq!(
            task_state(&up, &TaskState::Running { pid }, 0, 100.0, 10.0),
            TaskState::Running { pid }
        );

        // host up, pid absent -> dead
        let gone = ScriptedProvider::new(0.0);
        assert_eq!(
            task_state(&gone, &TaskState::Running { pid }, 0, 100.0, 10.0),
            TaskState::Dead
        );

        // terminal states pass through untouched
        assert_eq!(task_state(&gone, &TaskState::Completed, 0, 100.0, 10.0), TaskState::Completed);
        assert_eq!(task_state(&gone, &TaskState::Init, 0, 100.0, 10.0), TaskState::Init);
    }

    #[test]
    fn oscillate_pattern_flips_exactly_on_period_multiples() {
        let p = LoadPattern::Oscillate { peak: 2.0, half_period_ms: 6000 };
        assert_eq!(p.at(0.0), 2.0);
        assert_eq!(p.at(5999.999), 2.0);
        assert_eq!(p.at(6000.0), 0.0);
        assert_eq!(p.at(11999.0), 0.0);
        assert_eq!(p.at(12000.0), 2.0);
        assert_eq!(p.next_change_after(0.0), Some(6000.0));
        assert_eq!(p.next_change_after(6000.0), Some(12000.0));
    }

    #[test]
    fn scenario_parsing_and_defaults() {
        let sc = LoadScenario::parse(
            "# comment\nload m4 static 2\nload m5 oscillate 2 6000\nload m6 at 0 1\nload m6 at 500 3\n",
        )
        .unwrap();
        assert_eq!(sc.pattern_for("m4"), LoadPattern::Static(2.0));
        assert_eq!(sc.pattern_for("other"), LoadPattern::Static(0.0));
        assert_eq!(sc.pattern_for("m6").at(0.0), 1.0);
        assert_eq!(sc.pattern_for("m6").at(499.0), 1.0);
        assert_eq!(sc.pattern_for("m6").at(500.0), 3.0);
    }

    #[test]
    fn scenario_rejects_bad_lines() {
        assert!(LoadScenario::parse("load m1 wiggle 2\n").is_err());
        assert!(LoadScenario::parse("load m1 at 100 2\nload m1 at 100 3\n").is_err());
        assert!(LoadScenario::parse("boost m1 static 2\n").is_err());
    }

    #[test]
    fn host_load_average_reads_proc() {
        // Smoke check on the host surfaces used by the real provider.
        let load = host::load_average_1min().unwrap();
        assert!(load >= 0.0);
        assert!(host::min_cpu_speed_mhz() > 0.0);
    }
}
