//! Manager-worker demo: time-domain currents of an N-port circuit.
//!
//! The frequency-domain current entering port `n` is the admittance-weighted
//! sum of the port voltages, `I_n[s] = sum_k Y[n][k] * V_k[s]`; the inverse
//! DFT turns each FD current into a TD current. The manager splits the N
//! currents over W workers (evenly, or by measured machine workloads when a
//! QoS service is supplied), scatters per-worker jobs, and gathers the TD
//! vectors keyed by row. Workers whose task state reads dead are skipped and
//! their rows re-dispatched to survivors in one recovery round.
//!
//! Job payload: header `n:4 BE | s:4 BE | row_start:4 BE | row_count:4 BE`,
//! then the Y rows (row-sliced by default, the full matrix behind a flag) and
//! all N voltage vectors, as little-endian f64 (re, im) pairs. A TD reply is
//! its vector's S pairs under the row's key. `row_start = 0xffffffff` is the
//! terminate marker.

use std::collections::BTreeSet;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::partition::CalcPlanner;
use crate::ports::{Port, PortError};
use crate::qos::data::TaskState;
use crate::qos::service::QosService;
use crate::runtime::{Runtime, TaskCtx, TaskError};

/// Modeled CPU cost of one current: `(N*S + S^2) * CALIB` work units
/// (a 333 MHz machine retires 333 units per millisecond in simulation).
pub const COMPUTE_CALIB: f64 = 0.8;

const TERMINATE: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum CircuitError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("malformed job payload: {0}")]
    Payload(String),
    #[error("all workers dead; rows {0:?} not computed")]
    AllWorkersDead(Vec<usize>),
    #[error("port error: {0}")]
    Port(#[from] PortError),
}

/// The problem instance: Y parameters and FD voltage stimuli.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitSpec {
    pub num_ports: usize,
    pub vector_size: usize,
    /// N x N admittance matrix, row-major.
    pub y: Vec<Complex64>,
    /// N voltage vectors of S samples each.
    pub voltages: Vec<Vec<Complex64>>,
}

impl CircuitSpec {
    /// Reproducible random instance. With `conjugate_symmetric`, the voltage
    /// spectra are conjugate-symmetric and Y is real, so TD currents are real.
    pub fn generate(seed: u64, num_ports: usize, vector_size: usize, conjugate_symmetric: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |rng: &mut ChaCha8Rng| rng.gen_range(-1.0..1.0);
        let y: Vec<Complex64> = (0..num_ports * num_ports)
            .map(|_| {
                let re = unit(&mut rng);
                let im = if conjugate_symmetric { 0.0 } else { unit(&mut rng) };
                Complex64::new(re, im)
            })
            .collect();
        let voltages: Vec<Vec<Complex64>> = (0..num_ports)
            .map(|_| {
                let mut v: Vec<Complex64> = (0..vector_size)
                    .map(|_| Complex64::new(unit(&mut rng), unit(&mut rng)))
                    .collect();
                if conjugate_symmetric {
                    let s = vector_size;
                    v[0] = Complex64::new(v[0].re, 0.0);
                    if s % 2 == 0 && s > 1 {
                        v[s / 2] = Complex64::new(v[s / 2].re, 0.0);
                    }
                    for k in 1..(s + 1) / 2 {
                        v[s - k] = v[k].conj();
                    }
                }
                v
            })
            .collect();
        CircuitSpec { num_ports, vector_size, y, voltages }
    }
}

/// FD currents for the requested rows: `I_n[s] = sum_k Y[n][k] V_k[s]`.
pub fn fd_currents(
    y: &[Complex64],
    num_ports: usize,
    voltages: &[Vec<Complex64>],
    rows: std::ops::Range<usize>,
) -> Result<Vec<Vec<Complex64>>, CircuitError> {
    if y.len() != num_ports * num_ports {
        return Err(CircuitError::Dimension(format!(
            "Y has {} entries, expected {}",
            y.len(),
            num_ports * num_ports
        )));
    }
    if voltages.len() != num_ports {
        return Err(CircuitError::Dimension(format!(
            "{} voltage vectors, expected {}",
            voltages.len(),
            num_ports
        )));
    }
    if rows.end > num_ports {
        return Err(CircuitError::Dimension(format!("row range end {} > {}", rows.end, num_ports)));
    }
    let s = voltages.first().map(|v| v.len()).unwrap_or(0);
    if voltages.iter().any(|v| v.len() != s) {
        return Err(CircuitError::Dimension("ragged voltage vectors".into()));
    }
    let mut out = Vec::with_capacity(rows.len());
    for n in rows {
        let mut current = vec![Complex64::new(0.0, 0.0); s];
        for k in 0..num_ports {
            let ynk = y[n * num_ports + k];
            for (sample, v) in current.iter_mut().zip(&voltages[k]) {
                *sample += ynk * v;
            }
        }
        out.push(current);
    }
    Ok(out)
}

/// Inverse DFT with 1/S normalization: `y[t] = (1/S) sum_s x[s] e^{+2πi ts/S}`.
/// Radix-2 in-place transform when S is a power of two, direct evaluation
/// otherwise (the interesting vector sizes are not powers of two).
pub fn ifft(x: &[Complex64]) -> Vec<Complex64> {
    let s = x.len();
    if s <= 1 {
        return x.to_vec();
    }
    let mut out = if s.is_power_of_two() { radix2_inverse(x) } else { direct_inverse(x) };
    let scale = 1.0 / s as f64;
    for v in &mut out {
        *v *= scale;
    }
    out
}

fn direct_inverse(x: &[Complex64]) -> Vec<Complex64> {
    let s = x.len();
    // twiddle table: e^{2πi k/S}, indexed by (t*s) mod S
    let table: Vec<Complex64> = (0..s)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / s as f64;
            Complex64::new(angle.cos(), angle.sin())
        })
        .collect();
    (0..s)
        .map(|t| {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut idx = 0usize;
            for v in x {
                acc += v * table[idx];
                idx += t;
                if idx >= s {
                    idx -= s;
                }
            }
            acc
        })
        .collect()
}

fn radix2_inverse(x: &[Complex64]) -> Vec<Complex64> {
    let s = x.len();
    let mut buf = x.to_vec();
    // bit-reversal permutation
    let bits = s.trailing_zeros();
    for i in 0..s {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) & (s - 1);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut width = 2;
    while width <= s {
        let step = 2.0 * std::f64::consts::PI / width as f64;
        let w_base = Complex64::new(step.cos(), step.sin());
        for chunk in buf.chunks_mut(width) {
            let mut w = Complex64::new(1.0, 0.0);
            let half = width / 2;
            for k in 0..half {
                let a = chunk[k];
                let b = chunk[k + half] * w;
                chunk[k] = a + b;
                chunk[k + half] = a - b;
                w *= w_base;
            }
        }
        width <<= 1;
    }
    buf
}

/// Gathered TD currents, indexed by row regardless of worker assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentResult {
    /// One real-valued TD vector per port; rows listed in `missing_rows`
    /// are empty.
    pub currents: Vec<Vec<f64>>,
    pub missing_rows: Vec<usize>,
    /// Largest imaginary component discarded when taking real parts.
    pub max_imag_residue: f64,
}

/// Single-process evaluation, used as the baseline and by workers.
pub fn compute_rows(
    spec_y: &[Complex64],
    num_ports: usize,
    voltages: &[Vec<Complex64>],
    rows: std::ops::Range<usize>,
) -> Result<Vec<Vec<Complex64>>, CircuitError> {
    let fd = fd_currents(spec_y, num_ports, voltages, rows)?;
    Ok(fd.iter().map(|v| ifft(v)).collect())
}

/// Work units for computing `rows` currents of size `s` with an `n`-port Y.
pub fn compute_work_units(n: usize, s: usize, rows: usize) -> f64 {
    rows as f64 * (n as f64 * s as f64 + (s as f64) * (s as f64)) * COMPUTE_CALIB
}

// --- job payload codec ---------------------------------------------------

fn push_complex(buf: &mut Vec<u8>, v: Complex64) {
    buf.extend_from_slice(&v.re.to_le_bytes());
    buf.extend_from_slice(&v.im.to_le_bytes());
}

fn read_complex(bytes: &[u8], idx: &mut usize) -> Result<Complex64, CircuitError> {
    if *idx + 16 > bytes.len() {
        return Err(CircuitError::Payload("truncated complex data".into()));
    }
    let re = f64::from_le_bytes(bytes[*idx..*idx + 8].try_into().unwrap());
    let im = f64::from_le_bytes(bytes[*idx + 8..*idx + 16].try_into().unwrap());
    *idx += 16;
    Ok(Complex64::new(re, im))
}

/// One unit of worker work: a contiguous row range plus the data to do it.
#[derive(Debug, Clone, PartialEq)]
pub enum Job {
    Compute {
        num_ports: usize,
        vector_size: usize,
        row_start: usize,
        row_count: usize,
        /// Either `row_count` rows (sliced) or the full N x N matrix.
        y_rows: Vec<Complex64>,
        voltages: Vec<Vec<Complex64>>,
    },
    Terminate,
}

pub fn encode_job(job: &Job) -> Vec<u8> {
    match job {
        Job::Terminate => {
            let mut buf = Vec::with_capacity(16);
            buf.extend_from_slice(&0u32.to_be_bytes());
            buf.extend_from_slice(&0u32.to_be_bytes());
            buf.extend_from_slice(&TERMINATE.to_be_bytes());
            buf.extend_from_slice(&0u32.to_be_bytes());
            buf
        }
        Job::Compute { num_ports, vector_size, row_start, row_count, y_rows, voltages } => {
            let mut buf =
                Vec::with_capacity(16 + 16 * (y_rows.len() + num_ports * vector_size));
            buf.extend_from_slice(&(*num_ports as u32).to_be_bytes());
            buf.extend_from_slice(&(*vector_size as u32).to_be_bytes());
            buf.extend_from_slice(&(*row_start as u32).to_be_bytes());
            buf.extend_from_slice(&(*row_count as u32).to_be_bytes());
            for v in y_rows {
                push_complex(&mut buf, *v);
            }
            for vector in voltages {
                for v in vector {
                    push_complex(&mut buf, *v);
                }
            }
            buf
        }
    }
}

pub fn decode_job(bytes: &[u8]) -> Result<Job, CircuitError> {
    if bytes.len() < 16 {
        return Err(CircuitError::Payload("short job header".into()));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (num_ports, vector_size, row_start, row_count) = (word(0), word(1), word(2), word(3));
    if row_start == TERMINATE as usize {
        return Ok(Job::Terminate);
    }
    let volt_entries = num_ports * vector_size;
    let data_entries = (bytes.len() - 16) / 16;
    if data_entries < volt_entries {
        return Err(CircuitError::Payload("job payload shorter than voltage block".into()));
    }
    let y_entries = data_entries - volt_entries;
    let sliced = row_count * num_ports;
    let full = num_ports * num_ports;
    if y_entries != sliced && y_entries != full {
        return Err(CircuitError::Payload(format!(
            "Y block has {} entries, expected {} (sliced) or {} (full)",
            y_entries, sliced, full
        )));
    }
    let mut idx = 16;
    let mut y_rows = Vec::with_capacity(y_entries);
    for _ in 0..y_entries {
        y_rows.push(read_complex(bytes, &mut idx)?);
    }
    let mut voltages = Vec::with_capacity(num_ports);
    for _ in 0..num_ports {
        let mut v = Vec::with_capacity(vector_size);
        for _ in 0..vector_size {
            v.push(read_complex(bytes, &mut idx)?);
        }
        voltages.push(v);
    }
    Ok(Job::Compute { num_ports, vector_size, row_start, row_count, y_rows, voltages })
}

pub fn encode_td_vector(v: &[Complex64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 * v.len());
    for sample in v {
        push_complex(&mut buf, *sample);
    }
    buf
}

pub fn decode_td_vector(bytes: &[u8]) -> Result<Vec<Complex64>, CircuitError> {
    if bytes.len() % 16 != 0 {
        return Err(CircuitError::Payload("TD vector not a whole number of samples".into()));
    }
    let mut idx = 0;
    let mut out = Vec::with_capacity(bytes.len() / 16);
    while idx < bytes.len() {
        out.push(read_complex(bytes, &mut idx)?);
    }
    Ok(out)
}

// --- manager / worker task bodies ----------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Adaptive,
    NonAdaptive,
}

#[derive(Debug, Clone)]
pub struct ManagerCfg {
    pub mode: Mode,
    /// Re-dispatch dead workers' rows to survivors in one recovery round.
    pub recovery: bool,
    /// Send only each worker's Y rows (default) or the full matrix.
    pub full_y: bool,
    /// Workers compute real numerics; off for timing-only simulation runs.
    pub compute_numerics: bool,
    /// Gather poll interval while waiting for a worker's next vector.
    pub poll_ms: f64,
    /// Weight costs by effective speed for heterogeneous clusters.
    pub heterogeneous: bool,
}

impl Default for ManagerCfg {
    fn default() -> Self {
        ManagerCfg {
            mode: Mode::NonAdaptive,
            recovery: true,
            full_y: false,
            compute_numerics: true,
            poll_ms: 50.0,
            heterogeneous: false,
        }
    }
}

/// Partition actually used for a scatter round, reported for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionRound {
    pub counts: Vec<u64>,
    pub stamp: u64,
}

pub struct ManagerOutcome {
    pub result: CurrentResult,
    pub rounds: Vec<PartitionRound>,
}

fn peer_state(qos: &QosService, port: usize) -> TaskState {
    qos.get_port_view(port).map(|pv| pv.peer_task_state).unwrap_or(TaskState::Init)
}

fn make_job(spec: &CircuitSpec, row_start: usize, row_count: usize, full_y: bool) -> Job {
    let n = spec.num_ports;
    let y_rows = if full_y {
        spec.y.clone()
    } else {
        spec.y[row_start * n..(row_start + row_count) * n].to_vec()
    };
    Job::Compute {
        num_ports: n,
        vector_size: spec.vector_size,
        row_start,
        row_count,
        y_rows,
        voltages: spec.voltages.clone(),
    }
}

struct Gatherer<'a> {
    runtime: &'a Arc<dyn Runtime>,
    qos: &'a QosService,
    poll_ms: f64,
}

impl<'a> Gatherer<'a> {
    /// Polls for the keyed reply, checking the worker's state before every
    /// wait so a dead worker is abandoned instead of blocking forever.
    fn read_reply(&self, port: &Port, key: u32) -> Result<Option<Vec<u8>>, TaskError> {
        loop {
            if let Some(msg) = port.async_read(key) {
                return Ok(Some(msg.payload));
            }
            if peer_state(self.qos, port.port_index()) == TaskState::Dead {
                return Ok(None);
            }
            self.runtime.sleep_ms(self.poll_ms)?;
        }
    }
}

/// The manager body: partition, scatter, gather, recover, terminate.
pub fn run_manager(
    ctx: &mut TaskCtx,
    spec: &CircuitSpec,
    cfg: &ManagerCfg,
) -> Result<ManagerOutcome, TaskError> {
    let n = spec.num_ports;
    let s = spec.vector_size;
    let workers = ctx.ports.len();
    if workers == 0 {
        return Err(TaskError::Failed("manager has no worker ports".into()));
    }

    let mut planner = CalcPlanner::new(cfg.heterogeneous);
    let qos_for_plan = match cfg.mode {
        Mode::Adaptive => Some(&ctx.qos),
        Mode::NonAdaptive => None,
    };
    let counts = planner.calc_l(n as u64, workers, qos_for_plan);
    let mut rounds = vec![PartitionRound { counts: counts.clone(), stamp: ctx.qos.get_meas_stamp() }];

    let mut currents: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut max_imag: f64 = 0.0;
    let mut alive = vec![true; workers];
    let mut missing: BTreeSet<usize> = BTreeSet::new();

    // row ranges per worker
    let mut starts = Vec::with_capacity(workers);
    let mut next = 0usize;
    for m in 0..workers {
        starts.push(next);
        next += counts[m] as usize;
    }

    // scatter, skipping workers already known dead
    for m in 0..workers {
        let rows = starts[m]..starts[m] + counts[m] as usize;
        if peer_state(&ctx.qos, m) == TaskState::Dead {
            alive[m] = false;
            missing.extend(rows);
            continue;
        }
        let job = make_job(spec, starts[m], counts[m] as usize, cfg.full_y);
        if ctx.ports[m].sync_write(0, encode_job(&job)).is_err() {
            alive[m] = false;
            missing.extend(rows);
        }
    }

    let gatherer = Gatherer { runtime: &ctx.runtime, qos: &ctx.qos, poll_ms: cfg.poll_ms };
    let collect =
        |port: &Port, row: usize, key: u32, currents: &mut Vec<Vec<f64>>, max_imag: &mut f64| -> Result<bool, TaskError> {
            match gatherer.read_reply(port, key)? {
                Some(payload) => {
                    let vector = decode_td_vector(&payload)
                        .map_err(|e| TaskError::Failed(e.to_string()))?;
                    if vector.len() != s {
                        return Err(TaskError::Failed("TD reply has wrong length".into()));
                    }
                    let mut real = Vec::with_capacity(s);
                    for v in &vector {
                        *max_imag = max_imag.max(v.im.abs());
                        real.push(v.re);
                    }
                    currents[row] = real;
                    Ok(true)
                }
                None => Ok(false),
            }
        };

    // gather round one
    for m in 0..workers {
        if !alive[m] {
            continue;
        }
        for k in 0..counts[m] as usize {
            let row = starts[m] + k;
            if !collect(&ctx.ports[m], row, k as u32, &mut currents, &mut max_imag)? {
                alive[m] = false;
                missing.extend(row..starts[m] + counts[m] as usize);
                break;
            }
        }
    }

    // one recovery round: re-dispatch missing rows over the survivors
    if cfg.recovery && !missing.is_empty() && alive.iter().any(|a| *a) {
        let survivors: Vec<usize> = (0..workers).filter(|m| alive[*m]).collect();
        let todo: Vec<usize> = missing.iter().copied().collect();
        let quota = crate::partition::even_split(todo.len() as u64, survivors.len());
        rounds.push(PartitionRound {
            counts: {
                let mut by_worker = vec![0u64; workers];
                for (i, m) in survivors.iter().enumerate() {
                    by_worker[*m] = quota[i];
                }
                by_worker
            },
            stamp: ctx.qos.get_meas_stamp(),
        });

        let mut cursor = 0usize;
        let mut assignments: Vec<(usize, Vec<(usize, usize)>)> = Vec::new(); // worker -> jobs
        for (i, m) in survivors.iter().enumerate() {
            let mut jobs = Vec::new();
            let mut remaining = quota[i] as usize;
            while remaining > 0 {
                let start_row = todo[cursor];
                let mut len = 1;
                while len < remaining
                    && cursor + len < todo.len()
                    && todo[cursor + len] == start_row + len
                {
                    len += 1;
                }
                jobs.push((start_row, len));
                cursor += len;
                remaining -= len;
            }
            assignments.push((*m, jobs));
        }

        for (m, jobs) in &assignments {
            for (row_start, row_count) in jobs {
                let job = make_job(spec, *row_start, *row_count, cfg.full_y);
                if ctx.ports[*m].sync_write(0, encode_job(&job)).is_err() {
                    alive[*m] = false;
                    break;
                }
            }
        }
        for (m, jobs) in &assignments {
            if !alive[*m] {
                continue;
            }
            'jobs: for (row_start, row_count) in jobs {
                for k in 0..*row_count {
                    let row = row_start + k;
                    if collect(&ctx.ports[*m], row, k as u32, &mut currents, &mut max_imag)? {
                        missing.remove(&row);
                    } else {
                        alive[*m] = false;
                        break 'jobs;
                    }
                }
            }
        }
    }

    // release surviving workers
    for m in 0..workers {
        if alive[m] {
            let _ = ctx.ports[m].sync_write(0, encode_job(&Job::Terminate));
        }
    }

    if alive.iter().all(|a| !*a) && !missing.is_empty() {
        return Err(TaskError::Failed(
            CircuitError::AllWorkersDead(missing.into_iter().collect()).to_string(),
        ));
    }

    Ok(ManagerOutcome {
        result: CurrentResult {
            currents,
            missing_rows: missing.into_iter().collect(),
            max_imag_residue: max_imag,
        },
        rounds,
    })
}

#[derive(Debug, Clone)]
pub struct WorkerCfg {
    /// Compute real numerics (cheap sizes) or send zero vectors of the right
    /// shape (timing-only simulation benches).
    pub compute_numerics: bool,
}

impl Default for WorkerCfg {
    fn default() -> Self {
        WorkerCfg { compute_numerics: true }
    }
}

/// The worker body: read jobs until the terminate marker, compute the
/// assigned rows, reply one keyed TD vector per row.
pub fn run_worker(ctx: &mut TaskCtx, cfg: &WorkerCfg) -> Result<(), TaskError> {
    let port = &ctx.ports[0];
    ctx.runtime.checkpoint("worker_started")?;
    loop {
        let msg = port.sync_read(0)?;
        let job = decode_job(&msg.payload).map_err(|e| TaskError::Failed(e.to_string()))?;
        let Job::Compute { num_ports, vector_size, row_start, row_count, y_rows, voltages } = job
        else {
            return Ok(());
        };
        ctx.runtime.checkpoint("payload_received")?;
        if row_count == 0 {
            continue;
        }
        let full = y_rows.len() == num_ports * num_ports;
        let replies: Vec<Vec<Complex64>> = if cfg.compute_numerics {
            let (y, rows) = if full {
                (y_rows, row_start..row_start + row_count)
            } else {
                (y_rows, 0..row_count)
            };
            // sliced jobs carry rows re-based at zero
            let fd = if full {
                fd_currents(&y, num_ports, &voltages, rows)
                    .map_err(|e| TaskError::Failed(e.to_string()))?
            } else {
                let mut out = Vec::with_capacity(row_count);
                for r in 0..row_count {
                    let row = &y[r * num_ports..(r + 1) * num_ports];
                    let mut current = vec![Complex64::new(0.0, 0.0); vector_size];
                    for k in 0..num_ports {
                        for (sample, v) in current.iter_mut().zip(&voltages[k]) {
                            *sample += row[k] * v;
                        }
                    }
                    out.push(current);
                }
                out
            };
            fd.iter().map(|v| ifft(v)).collect()
        } else {
            vec![vec![Complex64::new(0.0, 0.0); vector_size]; row_count]
        };
        ctx.runtime.checkpoint("compute_begin")?;
        ctx.runtime
            .charge_compute(ctx.machine_rank, compute_work_units(num_ports, vector_size, row_count))?;
        for (k, vector) in replies.iter().enumerate() {
            port.sync_write(k as u32, encode_td_vector(vector))?;
        }
    }
}
