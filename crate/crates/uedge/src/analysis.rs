//! Numerical analysis of the homogeneous serial-dispatch model.
//!
//! Under the simplifying assumptions (homogeneous devices, exponential
//! per-type service rates, the N tasks of an instance dispatched in order to
//! the device with the shortest queue), each queue's length evolves as a
//! birth-jump chain whose rates depend on the stationary distribution itself:
//! down-crossings at the rate of the type at the head (determined by the
//! queue length), up-crossings of +N at the arrival rate thinned by the
//! probability that this queue is the shortest. The solver finds the
//! self-consistent stationary distribution by damped fixed-point iteration,
//! then evaluates the closed-form expected service time, which upper-bounds
//! the simulated mean because it charges every task as if its whole queue
//! were processed serially.

use std::error::Error;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameters of the queueing chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    /// Tasks per application instance.
    pub n: usize,
    /// Number of devices (at least 2; a single queue has no "other" queues
    /// to compare against).
    pub q: usize,
    /// Instance arrival rate.
    pub lambda: f64,
    /// Service rate per task type, length n.
    pub mu: Vec<f64>,
    /// Largest queue length represented.
    pub truncation: usize,
    /// Fixed-point damping in (0, 1].
    pub damping: f64,
    /// L1 convergence tolerance on successive iterates.
    pub tol: f64,
    pub max_iters: usize,
}

impl ChainConfig {
    pub fn new(n: usize, q: usize, lambda: f64, mu: Vec<f64>) -> Self {
        Self { n, q, lambda, mu, truncation: 400, damping: 0.5, tol: 1e-10, max_iters: 10_000 }
    }

    /// Offered load per device; must stay below 1 for stability.
    pub fn rho(&self) -> f64 {
        self.mu.iter().map(|m| self.lambda / m).sum::<f64>() / self.q as f64
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.n == 0 || self.mu.len() != self.n {
            return Err(AnalysisError::Config("mu must have one rate per task type".into()));
        }
        if self.q < 2 {
            return Err(AnalysisError::Config("q must be at least 2".into()));
        }
        if self.mu.iter().any(|&m| m <= 0.0 || m.is_nan()) {
            return Err(AnalysisError::Config("service rates must be positive".into()));
        }
        if self.lambda <= 0.0 || self.lambda.is_nan() {
            return Err(AnalysisError::Config("lambda must be positive".into()));
        }
        let rho = self.rho();
        if rho >= 1.0 {
            return Err(AnalysisError::Unstable { rho });
        }
        if !(0.0 < self.damping && self.damping <= 1.0) {
            return Err(AnalysisError::Config("damping must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Stationary solution of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueChainSolution {
    /// Stationary queue-length distribution over 0..=truncation.
    pub pi: Vec<f64>,
    /// Smallest queue length that can no longer receive a batch.
    pub tau: usize,
    /// Expected service time of an instance, summed over its task types.
    pub t_q: f64,
    /// t_q normalized per task, unit-compatible with the simulator's
    /// mean-completion-time metric.
    pub t_q_per_task: f64,
    /// Largest absolute net flow of the global balance equations.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisError {
    Config(String),
    Unstable { rho: f64 },
    /// Stationary mass reaches too close to the truncation boundary.
    TruncationTooSmall { tail_mass: f64 },
    NoConvergence { iterations: usize, delta: f64 },
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "invalid chain config: {msg}"),
            Self::Unstable { rho } => write!(f, "offered load {rho} is not below 1"),
            Self::TruncationTooSmall { tail_mass } => {
                write!(f, "tail mass {tail_mass} near truncation; raise the truncation limit")
            }
            Self::NoConvergence { iterations, delta } => {
                write!(f, "fixed point not reached after {iterations} iterations (delta {delta})")
            }
        }
    }
}

impl Error for AnalysisError {}

/// Service rate of the task at the head of a queue of length `i` (1-based):
/// the head type cycles as ceil(i/n)*n - i + 1.
pub fn service_rate_at(i: usize, n: usize, mu: &[f64]) -> f64 {
    assert!(i > 0, "queue must be non-empty");
    mu[head_type(i, n) - 1]
}

fn head_type(i: usize, n: usize) -> usize {
    i.div_ceil(n) * n - i + 1
}

/// Per-state transition rates of the chain given a believed distribution:
/// `down[i]` is the rate from i to i-1, `up[i]` the rate from i to i+n.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRates {
    pub up: Vec<f64>,
    pub down: Vec<f64>,
    pub tau: usize,
}

/// Builds the rates the dispatch rule induces on one queue at steady state.
/// The up rate from state i is the arrival rate thinned by the probability
/// that no other queue is shorter, with ties sharing uniformly; it vanishes
/// from tau onward and for states whose +n jump would leave the truncated
/// space.
pub fn transition_rates(pi: &[f64], cfg: &ChainConfig) -> TransitionRates {
    let l = pi.len() - 1;
    let qm1 = (cfg.q - 1) as f64;
    let mut cum = Vec::with_capacity(pi.len());
    let mut acc = 0.0;
    for &p in pi {
        acc += p;
        cum.push(acc);
    }
    let threshold = 1.0 / qm1;
    let tau = (0..=l)
        .find(|&j| {
            let below = if j >= 1 { cum[j - 1] } else { 0.0 };
            below >= threshold - 1e-12
        })
        .unwrap_or(l + 1);
    let mut up = vec![0.0; pi.len()];
    for i in 0..=l {
        if i >= tau || i + cfg.n > l {
            continue;
        }
        let below = if i >= 1 { cum[i - 1] } else { 0.0 };
        let numerator = (1.0 - qm1 * below).max(0.0);
        let denominator = 1.0 + qm1 * cum[i];
        up[i] = cfg.lambda * numerator / denominator;
    }
    let down: Vec<f64> = (0..=l)
        .map(|i| if i == 0 { 0.0 } else { service_rate_at(i, cfg.n, &cfg.mu) })
        .collect();
    TransitionRates { up, down, tau }
}

/// Exact stationary distribution of the truncated chain under frozen rates,
/// via the level-crossing recursion (the chain is skip-free downward).
fn stationary_for_rates(rates: &TransitionRates, n: usize) -> Vec<f64> {
    let l = rates.up.len() - 1;
    let mut un = vec![0.0; l + 1];
    un[0] = 1.0;
    for j in 1..=l {
        let lo = j.saturating_sub(n);
        let inflow: f64 =
            un[lo..j].iter().zip(&rates.up[lo..j]).map(|(u, r)| u * r).sum();
        un[j] = inflow / rates.down[j];
    }
    let total: f64 = un.iter().sum();
    for v in &mut un {
        *v /= total;
    }
    un
}

fn balance_residual(pi: &[f64], rates: &TransitionRates, n: usize) -> f64 {
    let l = pi.len() - 1;
    let mut worst = 0.0f64;
    for j in 0..=l {
        let mut net = -pi[j] * (rates.up[j] + rates.down[j]);
        if j < l {
            net += pi[j + 1] * rates.down[j + 1];
        }
        if j >= n {
            net += pi[j - n] * rates.up[j - n];
        }
        worst = worst.max(net.abs());
    }
    worst
}

/// Damped fixed-point iteration for the self-consistent stationary
/// distribution.
pub fn solve_stationary(cfg: &ChainConfig) -> Result<QueueChainSolution, AnalysisError> {
    cfg.validate()?;
    let l = cfg.truncation;
    let rho = cfg.rho();
    // geometric initial guess
    let mut pi: Vec<f64> = (0..=l).map(|j| (1.0 - rho) * rho.powi(j as i32)).collect();
    let norm: f64 = pi.iter().sum();
    for v in &mut pi {
        *v /= norm;
    }

    let mut iterations = 0;
    let mut delta = f64::INFINITY;
    let mut residual = f64::INFINITY;
    while iterations < cfg.max_iters {
        iterations += 1;
        let rates = transition_rates(&pi, cfg);
        let fresh = stationary_for_rates(&rates, cfg.n);
        delta = 0.0;
        for (v, f) in pi.iter_mut().zip(&fresh) {
            let mixed = cfg.damping * f + (1.0 - cfg.damping) * *v;
            delta += (mixed - *v).abs();
            *v = mixed;
        }
        if delta <= cfg.tol {
            let rates = transition_rates(&pi, cfg);
            residual = balance_residual(&pi, &rates, cfg.n);
            if residual <= 10.0 * cfg.tol {
                break;
            }
        }
    }
    if delta > cfg.tol || residual > 10.0 * cfg.tol {
        return Err(AnalysisError::NoConvergence { iterations, delta });
    }
    let tail_mass: f64 = pi[(l * 9) / 10 + 1..].iter().sum();
    if tail_mass >= 1e-8 {
        return Err(AnalysisError::TruncationTooSmall { tail_mass });
    }
    let rates = transition_rates(&pi, cfg);
    let t_q = expected_service_time(&pi, cfg);
    Ok(QueueChainSolution {
        tau: rates.tau,
        t_q,
        t_q_per_task: t_q / cfg.n as f64,
        residual,
        iterations,
        pi,
    })
}

/// Closed-form expected service time of an instance: for every task type
/// offset r and queue position i, the serial completion time of that
/// position, weighted by the probability that the batch lands on a queue of
/// length i-1 (the minimum of q independent draws from pi).
pub fn expected_service_time(pi: &[f64], cfg: &ChainConfig) -> f64 {
    let l = pi.len() - 1;
    let n = cfg.n;
    let inv: Vec<f64> = cfg.mu.iter().map(|m| 1.0 / m).collect();
    let full_cycle: f64 = inv.iter().sum();
    // suffix sums: tail[i] = P(length >= i)
    let mut tail = vec![0.0; l + 2];
    for i in (0..=l).rev() {
        tail[i] = tail[i + 1] + pi[i];
    }
    let mut total = 0.0;
    for r in 0..n {
        for i in 1..=l {
            let weight = tail[i - 1].powi(cfg.q as i32) - tail[i].powi(cfg.q as i32);
            if weight == 0.0 {
                continue;
            }
            let s = head_type(i, n);
            let mut time = ((i - 1) / n) as f64 * full_cycle;
            if s > r {
                // partial cycle from the shifted head type to the task's type
                for m in (s - r)..=(n - r) {
                    time += inv[m - 1];
                }
            } else {
                for m in (n - r)..=(s + n - r) {
                    time += inv[m - 1];
                }
            }
            total += weight * time;
        }
    }
    total
}

/// What one simulated point of the comparison produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SerialSimResult {
    /// Mean instance service time (mean task completion time from arrival).
    pub mean_service_time: f64,
    /// Time-weighted queue-length distribution across all devices.
    pub queue_histogram: Vec<f64>,
}

/// Monte Carlo of the exact dispatch dynamics: q coupled queues, batch
/// join-shortest-queue with uniform tie-break, exponential service. With
/// `serial_processing` the device works the queue head-first one task at a
/// time (the analysis model); without it every queued task runs concurrently
/// (the main simulator's processing model).
pub fn simulate_inorder(
    cfg: &ChainConfig,
    serial_processing: bool,
    instances: u64,
    seed: u64,
) -> Result<SerialSimResult, AnalysisError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n;
    let q = cfg.q;
    let hist_len = 4 * cfg.truncation;
    let warmup = (instances / 10).max(1);

    // serial mode: FIFO contents + one pending completion per queue
    let mut fifo: Vec<std::collections::VecDeque<(u64, usize)>> =
        vec![std::collections::VecDeque::new(); q];
    let mut next_done = vec![f64::INFINITY; q];
    // concurrent mode: per-queue in-flight count + a completion heap keyed by
    // (time bits, sequence); times are non-negative so the bit order works
    let mut qlen = vec![0usize; q];
    let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<(u64, u64, usize, u64)>> =
        std::collections::BinaryHeap::new();
    let mut heap_seq = 0u64;

    let len_of = |k: usize, fifo: &[std::collections::VecDeque<(u64, usize)>], qlen: &[usize]| {
        if serial_processing {
            fifo[k].len()
        } else {
            qlen[k]
        }
    };

    let mut time;
    let mut next_arrival = exp_draw(cfg.lambda, &mut rng);
    let mut arrived = 0u64;
    let mut inst_state: std::collections::BTreeMap<u64, (f64, f64, usize)> =
        std::collections::BTreeMap::new();
    let mut sum_service = 0.0;
    let mut counted = 0u64;
    let mut hist = vec![0.0f64; hist_len];
    let mut hist_open = false;
    let mut last_t = 0.0f64;

    loop {
        let next_completion = if serial_processing {
            next_done.iter().copied().fold(f64::INFINITY, f64::min)
        } else {
            heap.peek().map_or(f64::INFINITY, |r| f64::from_bits(r.0 .0))
        };
        let t_next = next_arrival.min(next_completion);
        if t_next.is_infinite() {
            break;
        }
        if hist_open {
            for k in 0..q {
                hist[len_of(k, &fifo, &qlen).min(hist_len - 1)] += t_next - last_t;
            }
        }
        last_t = t_next;
        time = t_next;

        if next_arrival <= next_completion && arrived < instances {
            // batch arrival to the shortest queue, ties uniform
            let min_len = (0..q).map(|k| len_of(k, &fifo, &qlen)).min().unwrap();
            let candidates: Vec<usize> =
                (0..q).filter(|&k| len_of(k, &fifo, &qlen) == min_len).collect();
            let target = candidates[rng.random_range(0..candidates.len())];
            let inst = arrived;
            inst_state.insert(inst, (time, 0.0, 0));
            if serial_processing {
                let was_empty = fifo[target].is_empty();
                for task_type in 1..=n {
                    fifo[target].push_back((inst, task_type));
                }
                if was_empty {
                    let head = fifo[target].front().unwrap().1;
                    next_done[target] = time + exp_draw(cfg.mu[head - 1], &mut rng);
                }
            } else {
                for task_type in 1..=n {
                    let done = time + exp_draw(cfg.mu[task_type - 1], &mut rng);
                    heap.push(std::cmp::Reverse((done.to_bits(), heap_seq, target, inst)));
                    heap_seq += 1;
                }
                qlen[target] += n;
            }
            arrived += 1;
            if arrived == warmup {
                hist_open = true;
                last_t = time;
            }
            next_arrival = if arrived < instances {
                time + exp_draw(cfg.lambda, &mut rng)
            } else {
                f64::INFINITY
            };
        } else {
            let inst = if serial_processing {
                let target = (0..q)
                    .min_by(|&a, &b| next_done[a].total_cmp(&next_done[b]))
                    .unwrap();
                let (inst, _) = fifo[target].pop_front().unwrap();
                next_done[target] = match fifo[target].front() {
                    Some(&(_, head)) => time + exp_draw(cfg.mu[head - 1], &mut rng),
                    None => f64::INFINITY,
                };
                inst
            } else {
                let std::cmp::Reverse((_, _, target, inst)) = heap.pop().unwrap();
                qlen[target] -= 1;
                inst
            };
            let entry = inst_state.get_mut(&inst).unwrap();
            entry.1 += time - entry.0;
            entry.2 += 1;
            if entry.2 == n {
                if inst >= warmup {
                    sum_service += entry.1 / n as f64;
                    counted += 1;
                }
                inst_state.remove(&inst);
            }
        }
    }

    let hist_total: f64 = hist.iter().sum();
    let queue_histogram = hist.iter().map(|h| h / hist_total).collect();
    Ok(SerialSimResult { mean_service_time: sum_service / counted as f64, queue_histogram })
}

/// Monte Carlo of the solved chain itself (rates frozen from pi): an
/// independent check that the stationary solver and the rate construction
/// agree.
pub fn simulate_chain(
    rates: &TransitionRates,
    n: usize,
    events: u64,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rates.up.len() - 1;
    let mut hist = vec![0.0f64; l + 1];
    let mut state = 0usize;
    for _ in 0..events {
        let up = rates.up[state];
        let down = rates.down[state];
        let total = up + down;
        if total == 0.0 {
            // truncated corner: nothing can happen, restart from empty
            state = 0;
            continue;
        }
        let dwell = exp_draw(total, &mut rng);
        hist[state] += dwell;
        let roll: f64 = rng.random_range(0.0..total);
        if roll < up {
            state += n;
        } else {
            state -= 1;
        }
    }
    let total: f64 = hist.iter().sum();
    hist.iter().map(|h| h / total).collect()
}

/// One row of the analysis-versus-simulation comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub lambda: f64,
    pub t_analytical_raw: f64,
    pub t_analytical_per_task: f64,
    /// Mean from the concurrent-processing exponential-service simulator
    /// (the main simulator's processing model).
    pub t_simulated: f64,
    /// Mean from the serial-processing variant, reported as a diagnostic.
    pub t_serial_sim: f64,
}

/// Sweeps lambda and pairs the analytical expected service time with the
/// simulated means at each point.
pub fn compare_analysis_vs_simulation(
    base: &ChainConfig,
    lambdas: &[f64],
    instances: u64,
    seed: u64,
) -> Result<Vec<ComparisonRow>, AnalysisError> {
    let mut rows = Vec::with_capacity(lambdas.len());
    for (k, &lambda) in lambdas.iter().enumerate() {
        let cfg = ChainConfig { lambda, ..base.clone() };
        let solution = solve_stationary(&cfg)?;
        let concurrent = simulate_inorder(&cfg, false, instances, seed.wrapping_add(k as u64))?;
        let serial = simulate_inorder(&cfg, true, instances, seed.wrapping_add(k as u64) ^ 0xa5)?;
        rows.push(ComparisonRow {
            lambda,
            t_analytical_raw: solution.t_q,
            t_analytical_per_task: solution.t_q_per_task,
            t_simulated: concurrent.mean_service_time,
            t_serial_sim: serial.mean_service_time,
        });
    }
    Ok(rows)
}

fn exp_draw(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -u.ln() / rate
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().max(b.len());
    let mut tv = 0.0;
    for i in 0..len {
        let x = a.get(i).copied().unwrap_or(0.0);
        let y = b.get(i).copied().unwrap_or(0.0);
        tv += (x - y).abs();
    }
    tv / 2.0
}

/// Total variation distance between two distributions (padded with zeros).
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    total_variation(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_cfg(lambda: f64) -> ChainConfig {
        ChainConfig::new(2, 3, lambda, vec![10.0, 30.0])
    }

    #[test]
    fn head_type_follows_batch_structure() {
        // n=2: lengths 1,2,3,4 serve types 2,1,2,1
        assert_eq!(service_rate_at(1, 2, &[10.0, 30.0]), 30.0);
        assert_eq!(service_rate_at(2, 2, &[10.0, 30.0]), 10.0);
        assert_eq!(service_rate_at(3, 2, &[10.0, 30.0]), 30.0);
        // n=1: always type 1
        for i in 1..9 {
            assert_eq!(service_rate_at(i, 1, &[7.0]), 7.0);
        }
    }

    #[test]
    fn tau_from_half_threshold() {
        let cfg = reference_cfg(5.0);
        // q=3: threshold 1/2; pi0 = 0.6 puts tau at 1
        let mut pi = vec![0.0; cfg.truncation + 1];
        pi[0] = 0.6;
        pi[1] = 0.4;
        let rates = transition_rates(&pi, &cfg);
        assert_eq!(rates.tau, 1);
        assert!(rates.up[1] == 0.0 && rates.up[2] == 0.0);
        // up rate from empty: lambda * 1 / (1 + (q-1) pi0)
        assert!((rates.up[0] - 5.0 / (1.0 + 2.0 * 0.6)).abs() < 1e-12);
    }

    #[test]
    fn uniform_small_pi_up_rate_from_zero() {
        let cfg = reference_cfg(4.0);
        let l = cfg.truncation;
        let pi = vec![1.0 / (l as f64 + 1.0); l + 1];
        let rates = transition_rates(&pi, &cfg);
        let pi0 = pi[0];
        assert!((rates.up[0] - 4.0 / (1.0 + 2.0 * pi0)).abs() < 1e-12);
    }

    #[test]
    fn q1_rejected() {
        let cfg = ChainConfig::new(1, 1, 0.5, vec![10.0]);
        assert!(matches!(solve_stationary(&cfg), Err(AnalysisError::Config(_))));
    }

    #[test]
    fn unstable_lambda_rejected() {
        let cfg = reference_cfg(23.0); // rho = 23/3 * (0.1 + 1/30) > 1
        assert!(matches!(solve_stationary(&cfg), Err(AnalysisError::Unstable { .. })));
    }

    #[test]
    fn light_traffic_concentrates_at_zero() {
        let cfg = ChainConfig::new(1, 2, 0.05, vec![10.0]);
        let sol = solve_stationary(&cfg).unwrap();
        assert!(sol.pi[0] > 0.99);
        for w in sol.pi.windows(2).take(20) {
            assert!(w[1] <= w[0] + 1e-15, "pi must decrease in light traffic");
        }
        assert!(sol.residual <= 1e-9);
    }

    #[test]
    fn converged_solutions_satisfy_global_balance() {
        for lambda in [1.0, 5.0, 10.0, 15.0, 20.0] {
            let sol = solve_stationary(&reference_cfg(lambda)).unwrap();
            assert!(sol.residual <= 1e-9, "lambda {lambda}: residual {}", sol.residual);
            let mass: f64 = sol.pi.iter().sum();
            assert!((mass - 1.0).abs() < 1e-12);
            assert!(sol.pi.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn n1_formula_reduces_to_position_expectation() {
        // For n=1 the printed expression collapses to sum_i (i/mu) * w_i.
        let cfg = ChainConfig::new(1, 2, 4.0, vec![10.0]);
        let sol = solve_stationary(&cfg).unwrap();
        let l = sol.pi.len() - 1;
        let mut tail = vec![0.0; l + 2];
        for i in (0..=l).rev() {
            tail[i] = tail[i + 1] + sol.pi[i];
        }
        let mut direct = 0.0;
        for i in 1..=l {
            let w = tail[i - 1].powi(2) - tail[i].powi(2);
            direct += w * i as f64 / 10.0;
        }
        assert!((sol.t_q - direct).abs() < 1e-12);
    }

    #[test]
    fn light_traffic_service_time_is_serial_instance() {
        // lambda -> 0: a lone instance served serially takes sum_k 1/mu_k
        let cfg = reference_cfg(0.01);
        let sol = solve_stationary(&cfg).unwrap();
        let serial_sum = 0.1 + 1.0 / 30.0;
        assert!(
            (sol.t_q - serial_sum).abs() < 1e-3,
            "t_q {} vs serial sum {serial_sum}",
            sol.t_q
        );
    }

    #[test]
    fn tau_shrinks_when_mass_moves_toward_zero() {
        // If pi' stochastically dominates pi from below (more mass at small
        // lengths), tau cannot grow.
        let cfg = reference_cfg(5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let l = 30;
            let mut pi: Vec<f64> = (0..=l).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|v| *v /= s);
            // shift: move a random slice of mass down to state 0
            let mut shifted = pi.clone();
            let from = rng.random_range(1..=l);
            let moved = shifted[from] * rng.random_range(0.1..1.0);
            shifted[from] -= moved;
            shifted[0] += moved;
            let mut big = vec![0.0; cfg.truncation + 1];
            let mut big_shifted = vec![0.0; cfg.truncation + 1];
            big[..=l].copy_from_slice(&pi);
            big_shifted[..=l].copy_from_slice(&shifted);
            let tau = transition_rates(&big, &cfg).tau;
            let tau_shifted = transition_rates(&big_shifted, &cfg).tau;
            assert!(tau_shifted <= tau);
        }
    }

    #[test]
    fn solver_matches_chain_monte_carlo() {
        let cfg = reference_cfg(10.0);
        let sol = solve_stationary(&cfg).unwrap();
        let rates = transition_rates(&sol.pi, &cfg);
        let hist = simulate_chain(&rates, cfg.n, 2_000_000, 7);
        let tv = tv_distance(&sol.pi, &hist);
        assert!(tv <= 0.01, "solver vs chain MC total variation {tv}");
    }

    #[test]
    fn analysis_upper_bounds_concurrent_simulation() {
        let base = reference_cfg(1.0);
        let rows =
            compare_analysis_vs_simulation(&base, &[1.0, 5.0, 10.0, 15.0, 20.0], 40_000, 11)
                .unwrap();
        let mut prev_gap = 0.0;
        for row in &rows {
            assert!(
                row.t_analytical_raw >= row.t_simulated,
                "lambda {}: {} < {}",
                row.lambda,
                row.t_analytical_raw,
                row.t_simulated
            );
            let gap = row.t_analytical_raw - row.t_simulated;
            assert!(gap >= prev_gap - 1e-3, "gap must grow with lambda");
            prev_gap = gap;
        }
    }

    #[test]
    fn serial_histogram_stays_near_pi() {
        // The mean-field pi is an approximation of the coupled system; the
        // total variation gap at lambda=10 is real but bounded.
        let cfg = reference_cfg(10.0);
        let sol = solve_stationary(&cfg).unwrap();
        let sim = simulate_inorder(&cfg, true, 150_000, 5).unwrap();
        let tv = tv_distance(&sol.pi, &sim.queue_histogram);
        assert!(tv <= 0.10, "serial-system TV {tv}");
    }
}
