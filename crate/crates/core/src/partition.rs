//! Adaptive work split across workers.
//!
//! The balance system equalizes expected load: with per-unit cost `c_m` for
//! worker `m` (cost = 1 + measured workload, so an idle machine still has
//! positive cost), solve
//!
//! ```text
//! c_1 L_1 = c_2 L_2 = ... = c_M L_M,     L_1 + ... + L_M = N
//! ```
//!
//! as an M x M linear system by LU decomposition with partial pivoting, then
//! round the real solution to integer work counts by largest remainder. The
//! closed form `L_m = N (1/c_m) / sum_k (1/c_k)` serves as an independent
//! cross-check.

use thiserror::Error;

/// Relative residual bound for an accepted solve.
pub const SOLVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("workload must be non-negative, got {0}")]
    NegativeWorkload(f64),
    #[error("cost must be positive, got {0}")]
    NonPositiveCost(f64),
    #[error("need at least one worker")]
    NoWorkers,
    #[error("total work must be positive")]
    NoWork,
    #[error("singular system")]
    Singular,
    #[error("solver residual {0} exceeds tolerance")]
    Residual(f64),
}

/// The balance problem: `total_work` units split over workers with the given
/// positive per-unit costs.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceProblem {
    pub total_work: u64,
    pub costs: Vec<f64>,
}

/// The solved split: the real solution of the balance system and its
/// integer rounding (counts sum to the total work).
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub real_solution: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Builds the balance problem from measured peer workloads:
/// `cost_m = 1 + workload_m` for homogeneous machines. With `speeds_mhz`
/// given, costs are scaled by inverse effective speed for heterogeneous
/// clusters.
pub fn build_problem(
    total_work: u64,
    workloads: &[f64],
    speeds_mhz: Option<&[f64]>,
) -> Result<BalanceProblem, PartitionError> {
    if workloads.is_empty() {
        return Err(PartitionError::NoWorkers);
    }
    if total_work == 0 {
        return Err(PartitionError::NoWork);
    }
    let mut costs = Vec::with_capacity(workloads.len());
    for (m, w) in workloads.iter().enumerate() {
        if !(*w >= 0.0) {
            return Err(PartitionError::NegativeWorkload(*w));
        }
        let mut cost = 1.0 + w;
        if let Some(speeds) = speeds_mhz {
            let s = speeds.get(m).copied().unwrap_or(1.0);
            if s > 0.0 {
                cost /= s;
            }
        }
        if !(cost > 0.0) {
            return Err(PartitionError::NonPositiveCost(cost));
        }
        costs.push(cost);
    }
    Ok(BalanceProblem { total_work, costs })
}

/// In-place LU decomposition with partial pivoting; returns the row
/// permutation. `a` is row-major n x n.
fn lu_decompose(a: &mut [f64], n: usize) -> Result<Vec<usize>, PartitionError> {
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = a[col * n + col].abs();
        for row in col + 1..n {
            let v = a[row * n + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val < f64::EPSILON {
            return Err(PartitionError::Singular);
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
            perm.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            a[row * n + col] = factor;
            for k in col + 1..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
        }
    }
    Ok(perm)
}

fn lu_solve(a: &[f64], perm: &[usize], b: &[f64], n: usize) -> Vec<f64> {
    let mut x: Vec<f64> = perm.iter().map(|p| b[*p]).collect();
    for row in 1..n {
        for k in 0..row {
            x[row] = x[row] - a[row * n + k] * x[k];
        }
    }
    for row in (0..n).rev() {
        for k in row + 1..n {
            x[row] = x[row] - a[row * n + k] * x[k];
        }
        x[row] /= a[row * n + row];
    }
    x
}

/// Solves the balance system for the real work counts.
pub fn solve_balance(problem: &BalanceProblem) -> Result<Vec<f64>, PartitionError> {
    let m = problem.costs.len();
    if m == 0 {
        return Err(PartitionError::NoWorkers);
    }
    for c in &problem.costs {
        if !(*c > 0.0) {
            return Err(PartitionError::NonPositiveCost(*c));
        }
    }
    let n_total = problem.total_work as f64;
    if m == 1 {
        return Ok(vec![n_total]);
    }
    // Rows 0..m-2: c_i L_i - c_{i+1} L_{i+1} = 0. Last row: sum L_i = N.
    let mut a = vec![0.0; m * m];
    let mut b = vec![0.0; m];
    for i in 0..m - 1 {
        a[i * m + i] = problem.costs[i];
        a[i * m + i + 1] = -problem.costs[i + 1];
    }
    for k in 0..m {
        a[(m - 1) * m + k] = 1.0;
    }
    b[m - 1] = n_total;

    let original = {
        let mut copy = vec![0.0; m * m];
        copy.copy_from_slice(&a);
        copy
    };
    let perm = lu_decompose(&mut a, m)?;
    let x = lu_solve(&a, &perm, &b, m);

    // Residual in the infinity norm against the untouched system.
    let mut residual: f64 = 0.0;
    for i in 0..m {
        let mut ax = 0.0;
        for k in 0..m {
            ax += original[i * m + k] * x[k];
        }
        residual = residual.max((ax - b[i]).abs());
    }
    if residual > SOLVE_TOLERANCE * n_total {
        return Err(PartitionError::Residual(residual));
    }
    Ok(x)
}

/// Largest-remainder rounding: floor every entry, then hand the remaining
/// units to the largest fractional parts, ties broken by lowest index.
/// Remainders are quantized so solver noise around exact ties cannot flip
/// the tie-break.
pub fn round_counts(real_solution: &[f64], total_work: u64) -> Vec<u64> {
    let mut counts: Vec<u64> = real_solution.iter().map(|v| v.max(0.0).floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut spare = total_work.saturating_sub(assigned) as usize;
    let quantized = |v: f64| ((v - v.floor()) * 1e9).round() as i64;
    let mut order: Vec<usize> = (0..real_solution.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = quantized(real_solution[i]);
        let fj = quantized(real_solution[j]);
        fj.cmp(&fi).then(i.cmp(&j))
    });
    let mut idx = 0;
    while spare > 0 {
        counts[order[idx % order.len()]] += 1;
        idx += 1;
        spare -= 1;
    }
    counts
}

/// Full pipeline: build, solve, round.
pub fn partition(
    total_work: u64,
    workloads: &[f64],
    speeds_mhz: Option<&[f64]>,
) -> Result<Partition, PartitionError> {
    let problem = build_problem(total_work, workloads, speeds_mhz)?;
    let real_solution = solve_balance(&problem)?;
    let counts = round_counts(&real_solution, total_work);
    Ok(Partition { real_solution, counts })
}

/// Even split used without QoS support: `floor(N/W)` each, the remainder to
/// the lowest indices.
pub fn even_split(total_work: u64, workers: usize) -> Vec<u64> {
    let w = workers as u64;
    let base = total_work / w;
    let extra = (total_work % w) as usize;
    (0..workers).map(|m| base + if m < extra { 1 } else { 0 }).collect()
}

/// Per-caller work-split planner with a measurement-stamp cache: when the
/// stamp has not advanced since the last call, the cached counts are reused
/// without re-reading views or re-solving.
pub struct CalcPlanner {
    last_stamp: Option<u64>,
    cached: Vec<u64>,
    heterogeneous: bool,
    /// Set when the last adaptive call fell back to an even split.
    pub fell_back: bool,
}

impl CalcPlanner {
    pub fn new(heterogeneous: bool) -> Self {
        CalcPlanner { last_stamp: None, cached: Vec::new(), heterogeneous, fell_back: false }
    }

    /// The work counts for `workers` workers over `total_work` units.
    /// Without a QoS service this is the even split; with one, peer machine
    /// workloads are read from the task view's ports and balanced.
    pub fn calc_l(
        &mut self,
        total_work: u64,
        workers: usize,
        qos: Option<&crate::qos::service::QosService>,
    ) -> Vec<u64> {
        let Some(qos) = qos else {
            return even_split(total_work, workers);
        };
        let stamp = qos.get_meas_stamp();
        if self.last_stamp == Some(stamp) && self.cached.len() == workers {
            return self.cached.clone();
        }
        let view = qos.get_task_view();
        if view.ports.len() < workers {
            self.fell_back = true;
            return even_split(total_work, workers);
        }
        let workloads: Vec<f64> =
            view.ports.iter().take(workers).map(|p| p.peer_machine.workload).collect();
        let speeds: Vec<f64> = view
            .ports
            .iter()
            .take(workers)
            .map(|p| p.peer_machine.effective_speed_mhz.max(f64::MIN_POSITIVE))
            .collect();
        let result = partition(
            total_work,
            &workloads,
            if self.heterogeneous { Some(&speeds) } else { None },
        );
        match result {
            Ok(p) => {
                self.fell_back = false;
                self.last_stamp = Some(stamp);
                self.cached = p.counts.clone();
                p.counts
            }
            Err(_) => {
                self.fell_back = true;
                even_split(total_work, workers)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent closed-form oracle: L_m = N (1/c_m) / sum(1/c_k).
    fn closed_form(total: u64, costs: &[f64]) -> Vec<f64> {
        let inv_sum: f64 = costs.iter().map(|c| 1.0 / c).sum();
        costs.iter().map(|c| total as f64 * (1.0 / c) / inv_sum).collect()
    }

    #[test]
    fn build_problem_costs_are_one_plus_workload() {
        let p = build_problem(60, &[0.0, 0.0, 2.0, 2.0], None).unwrap();
        assert_eq!(p.costs, vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn build_problem_equal_workloads_equal_costs() {
        let p = build_problem(10, &[1.5, 1.5, 1.5], None).unwrap();
        assert!(p.costs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn build_problem_rejects_negative_workload() {
        assert_eq!(
            build_problem(10, &[0.0, -1.0], None),
            Err(PartitionError::NegativeWorkload(-1.0))
        );
    }

    #[test]
    fn solve_six_workers_half_loaded() {
        let p = BalanceProblem { total_work: 60, costs: vec![1.0, 1.0, 1.0, 3.0, 3.0, 3.0] };
        let x = solve_balance(&p).unwrap();
        let expected = closed_form(60, &p.costs); // (15,15,15,5,5,5)
        for (got, want) in x.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        }
        assert_eq!(round_counts(&x, 60), vec![15, 15, 15, 5, 5, 5]);
    }

    #[test]
    fn solve_two_workers_hand_case() {
        let p = BalanceProblem { total_work: 40, costs: vec![1.0, 3.0] };
        let x = solve_balance(&p).unwrap();
        assert!((x[0] - 30.0).abs() < 1e-9);
        assert!((x[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn equal_costs_split_evenly() {
        let p = BalanceProblem { total_work: 24, costs: vec![2.0; 4] };
        let x = solve_balance(&p).unwrap();
        for v in x {
            assert!((v - 6.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_worker_takes_everything() {
        let p = BalanceProblem { total_work: 17, costs: vec![5.0] };
        assert_eq!(solve_balance(&p).unwrap(), vec![17.0]);
    }

    #[test]
    fn rounding_examples() {
        // equal remainders: lowest index wins the spare unit
        assert_eq!(round_counts(&[7.5, 2.5], 10), vec![8, 2]);
        // integer input unchanged
        assert_eq!(round_counts(&[3.0, 4.0, 3.0], 10), vec![3, 4, 3]);
        // largest remainder gets the spare unit
        assert_eq!(round_counts(&[3.2, 3.2, 3.6], 10), vec![3, 3, 4]);
    }

    #[test]
    fn even_split_examples() {
        assert_eq!(even_split(60, 6), vec![10; 6]);
        assert_eq!(even_split(10, 4), vec![3, 3, 2, 2]);
    }

    proptest! {
        #[test]
        fn lu_matches_closed_form(
            total in 1u64..10_000,
            costs in proptest::collection::vec(0.05f64..50.0, 1..=16),
        ) {
            let p = BalanceProblem { total_work: total, costs: costs.clone() };
            let x = solve_balance(&p).unwrap();
            let oracle = closed_form(total, &costs);
            for (got, want) in x.iter().zip(&oracle) {
                let scale = want.abs().max(1.0);
                prop_assert!((got - want).abs() <= 1e-9 * scale.max(total as f64));
            }
            let counts = round_counts(&x, total);
            prop_assert_eq!(counts.iter().sum::<u64>(), total);
            for (c, r) in counts.iter().zip(&x) {
                prop_assert!((*c as f64 - r).abs() < 1.0 + 1e-9);
            }
        }

        #[test]
        fn scale_invariance(
            total in 1u64..1000,
            costs in proptest::collection::vec(0.1f64..10.0, 2..=8),
            scale in 0.1f64..100.0,
        ) {
            let a = solve_balance(&BalanceProblem { total_work: total, costs: costs.clone() }).unwrap();
            let scaled: Vec<f64> = costs.iter().map(|c| c * scale).collect();
            let b = solve_balance(&BalanceProblem { total_work: total, costs: scaled }).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-7 * total as f64);
            }
        }

        #[test]
        fn raising_one_cost_lowers_its_share(
            total in 10u64..1000,
            costs in proptest::collection::vec(0.2f64..5.0, 2..=8),
            victim_seed in 0usize..8,
            bump in 0.1f64..5.0,
        ) {
            let victim = victim_seed % costs.len();
            let before = solve_balance(&BalanceProblem { total_work: total, costs: costs.clone() }).unwrap();
            let mut bumped = costs.clone();
            bumped[victim] += bump;
            let after = solve_balance(&BalanceProblem { total_work: total, costs: bumped }).unwrap();
            prop_assert!(after[victim] < before[victim]);
        }
    }
}
