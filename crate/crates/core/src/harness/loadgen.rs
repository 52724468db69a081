//! Real-host load generator: keeps a target number of compute jobs runnable
//! by repeatedly transforming a large array, relaunching each job after a
//! short delay. In simulation the same patterns drive the load scenario
//! directly, so this module is for real deployments only.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_complex::Complex64;

use crate::circuit::ifft;
use crate::probes::LoadPattern;

#[derive(Debug, Clone)]
pub struct LoadGenConfig {
    /// Informational: the machines this load is meant for (the generator
    /// itself always loads the host it runs on).
    pub targets: Vec<String>,
    pub pattern: LoadPattern,
    /// Doubles per job array.
    pub array_len: usize,
    pub relaunch_delay_ms: u64,
    /// None runs until the stop flag flips.
    pub duration_ms: Option<u64>,
}

impl Default for LoadGenConfig {
    fn default() -> Self {
        LoadGenConfig {
            targets: Vec::new(),
            pattern: LoadPattern::Static(1.0),
            array_len: 5120,
            relaunch_delay_ms: 100,
            duration_ms: None,
        }
    }
}

fn one_job(array_len: usize) {
    let data: Vec<Complex64> =
        (0..array_len).map(|i| Complex64::new((i % 97) as f64 * 0.125, 0.0)).collect();
    let spectrum = ifft(&data);
    std::hint::black_box(spectrum);
}

/// Runs the generator until the duration elapses or `stop` flips. The number
/// of concurrently runnable jobs follows the pattern's value at elapsed time.
pub fn run_loadgen(cfg: &LoadGenConfig, stop: Arc<AtomicBool>) {
    let origin = Instant::now();
    let deadline = cfg.duration_ms.map(|ms| origin + Duration::from_millis(ms));
    let mut workers = Vec::new();
    let target_count = |elapsed_ms: f64, pattern: &LoadPattern| pattern.at(elapsed_ms).round().max(0.0) as usize;

    let max_jobs = match cfg.pattern {
        LoadPattern::Static(k) => k.round() as usize,
        LoadPattern::Oscillate { peak, .. } => peak.round() as usize,
        LoadPattern::Steps(ref steps) => steps
            .iter()
            .map(|(_, v)| v.round() as usize)
            .max()
            .unwrap_or(0),
    };

    // One thread per potential job slot; each slot computes only while the
    // pattern says it should be runnable.
    let slot_active: Arc<Vec<AtomicBool>> =
        Arc::new((0..max_jobs).map(|_| AtomicBool::new(false)).collect());
    for slot in 0..max_jobs {
        let stop = Arc::clone(&stop);
        let active = Arc::clone(&slot_active);
        let array_len = cfg.array_len;
        let delay = cfg.relaunch_delay_ms;
        workers.push(std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                if active[slot].load(Ordering::Relaxed) {
                    one_job(array_len);
                    std::thread::sleep(Duration::from_millis(delay));
                } else {
                    std::thread::sleep(Duration::from_millis(20));
                }
            }
        }));
    }

    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        if let Some(d) = deadline {
            if Instant::now() >= d {
                stop.store(true, Ordering::Relaxed);
                break;
            }
        }
        let elapsed_ms = origin.elapsed().as_secs_f64() * 1000.0;
        let want = target_count(elapsed_ms, &cfg.pattern).min(max_jobs);
        for (slot, flag) in slot_active.iter().enumerate() {
            flag.store(slot < want, Ordering::Relaxed);
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    for w in workers {
        let _ = w.join();
    }
}

/// Parses the CLI pattern grammar: `static:K` or `oscillate:PEAK,PERIOD_MS`.
pub fn parse_pattern(text: &str) -> Result<LoadPattern, String> {
    if let Some(k) = text.strip_prefix("static:") {
        let k: f64 = k.parse().map_err(|_| format!("bad static level `{}`", k))?;
        if k < 0.0 {
            return Err("load level must be non-negative".into());
        }
        return Ok(LoadPattern::Static(k));
    }
    if let Some(rest) = text.strip_prefix("oscillate:") {
        let (peak, period) =
            rest.split_once(',').ok_or_else(|| "expected oscillate:PEAK,PERIOD_MS".to_string())?;
        let peak: f64 = peak.parse().map_err(|_| format!("bad peak `{}`", peak))?;
        let period: u64 = period.parse().map_err(|_| format!("bad period `{}`", period))?;
        if period == 0 {
            return Err("period must be positive".into());
        }
        return Ok(LoadPattern::Oscillate { peak, half_period_ms: period });
    }
    Err(format!("unknown pattern `{}` (use static:K or oscillate:PEAK,PERIOD_MS)", text))
}
