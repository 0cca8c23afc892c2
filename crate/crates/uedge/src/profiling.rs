//! Building a new device's profile row.
//!
//! A row is either measured in full (two probe points per pairwise line, all
//! N^2 lines) or measured partially within a probing time budget and then
//! completed by low-rank factorization against the fully measured rows of
//! devices already in the system — the same idea recommender systems use to
//! rate unseen items for a new user: find devices that behave similarly.

use std::error::Error;
use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::interference::{fit_pair, InterferenceError, ProbePoint, INTERCEPT_FLOOR};
use crate::model::{EntryMask, InterferencePair, ProfileMatrix, ProfileRow};

/// Co-location counts probed for each pairwise line. Wide spacing keeps the
/// fitted slope robust to observation noise.
pub const PROBE_LEVELS: [u32; 2] = [0, 4];

/// Ordered probing schedule with a uniform per-probe cost estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePlan {
    /// (task, co-located type) pairs to measure, 1-based.
    pub pairs: Vec<(usize, usize)>,
    /// Estimated seconds per pair (covers both probe points).
    pub per_probe_cost: f64,
}

/// Settings of the low-rank completion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionConfig {
    pub rank: usize,
    pub learn_rate: f64,
    pub regularization: f64,
    pub max_epochs: usize,
    /// Stop once the training RMSE over observed entries drops this low.
    pub convergence_tol: f64,
    /// Cap on total stochastic updates (epochs x observed cells); keeps the
    /// completion in the low-millisecond range as the pair count grows.
    pub max_cell_updates: usize,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            rank: 3,
            learn_rate: 0.01,
            regularization: 0.02,
            max_epochs: 500,
            convergence_tol: 1e-4,
            max_cell_updates: 400_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfilingError {
    /// The device exited mid-profile; the partial row is discarded.
    DeviceLeft,
    /// Completion needs at least `need` fully measured rows to anchor on.
    InsufficientAnchors { have: usize, need: usize },
    /// The probing budget does not admit a single probe.
    BudgetTooSmall,
    /// A probe observation could not be fitted.
    ProbeFailed(InterferenceError),
}

impl fmt::Display for ProfilingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DeviceLeft => write!(f, "device left during profiling"),
            Self::InsufficientAnchors { have, need } => {
                write!(f, "completion needs {need} fully measured rows, have {have}")
            }
            Self::BudgetTooSmall => write!(f, "profiling budget admits zero probes"),
            Self::ProbeFailed(e) => write!(f, "probe failed: {e}"),
        }
    }
}

impl Error for ProfilingError {}

impl From<InterferenceError> for ProfilingError {
    fn from(e: InterferenceError) -> Self {
        Self::ProbeFailed(e)
    }
}

/// Runs probe measurements on a device: the observed service time of one
/// task of type `task` while `co_located` tasks of type `other` run there.
/// `None` means the device has left the system.
pub trait ProbeRunner {
    fn probe(&mut self, task: usize, other: usize, co_located: u32) -> Option<f64>;
}

/// Probing schedule: self-interference pairs (i, i) first, then off-diagonal
/// pairs in row-major order, truncated to the prefix affordable within
/// `budget`. Deterministic.
pub fn probe_order(n: usize, budget: f64, per_probe_cost: f64) -> ProbePlan {
    assert!(per_probe_cost > 0.0, "per-probe cost must be positive");
    let mut pairs = Vec::with_capacity(n * n);
    for i in 1..=n {
        pairs.push((i, i));
    }
    for i in 1..=n {
        for j in 1..=n {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    let affordable = (budget / per_probe_cost).floor() as usize;
    pairs.truncate(affordable);
    ProbePlan { pairs, per_probe_cost }
}

fn measure_pair(
    runner: &mut dyn ProbeRunner,
    task: usize,
    other: usize,
) -> Result<InterferencePair, ProfilingError> {
    let mut points = [ProbePoint { co_located: 0, service_time: 0.0 }; 2];
    for (slot, &level) in points.iter_mut().zip(PROBE_LEVELS.iter()) {
        let st = runner.probe(task, other, level).ok_or(ProfilingError::DeviceLeft)?;
        *slot = ProbePoint { co_located: level, service_time: st };
    }
    Ok(fit_pair(points[0], points[1])?)
}

/// Measures all N^2 pairwise lines. Any mid-profile exit discards the row.
pub fn full_profile(n: usize, runner: &mut dyn ProbeRunner) -> Result<ProfileRow, ProfilingError> {
    let plan = probe_order(n, f64::INFINITY, 1.0);
    let mut row = ProfileRow::empty(n);
    for (i, j) in plan.pairs {
        let pair = measure_pair(runner, i, j)?;
        row.set(i, j, pair, EntryMask::Measured);
    }
    debug_assert!(row.is_complete());
    Ok(row)
}

/// Probes as many pairs as the budget allows and fills the rest by low-rank
/// completion against the fully measured rows of `existing`.
///
/// Measured entries are preserved bit-exact; reconstructed entries are read
/// from the factorization with slopes clamped non-negative and intercepts
/// clamped positive.
pub fn partial_profile_and_complete(
    n: usize,
    budget: f64,
    per_probe_cost: f64,
    runner: &mut dyn ProbeRunner,
    existing: &ProfileMatrix,
    cfg: &CompletionConfig,
) -> Result<ProfileRow, ProfilingError> {
    let plan = probe_order(n, budget, per_probe_cost);
    if plan.pairs.is_empty() {
        return Err(ProfilingError::BudgetTooSmall);
    }
    let anchors = existing.fully_measured_rows();
    if anchors.len() < cfg.rank {
        return Err(ProfilingError::InsufficientAnchors { have: anchors.len(), need: cfg.rank });
    }
    let mut row = ProfileRow::empty(n);
    for (i, j) in &plan.pairs {
        let pair = measure_pair(runner, *i, *j)?;
        row.set(*i, *j, pair, EntryMask::Measured);
    }
    if row.is_complete() {
        return Ok(row);
    }
    Ok(complete_row(&anchors, &row, cfg))
}

/// Fills the missing entries of `partial` from a rank-`cfg.rank`
/// factorization fitted over the anchor rows plus the partial row, treating
/// every slope and intercept as its own column (device similarity spans
/// both parameters).
pub fn complete_row(anchors: &[&ProfileRow], partial: &ProfileRow, cfg: &CompletionConfig) -> ProfileRow {
    let n = partial.task_count();
    let cols = 2 * n * n;
    let rows = anchors.len() + 1;
    let new_row = rows - 1;

    // observed value or NaN, row-major
    let mut data = Vec::with_capacity(rows * cols);
    for anchor in anchors {
        assert_eq!(anchor.task_count(), n, "anchor row width mismatch");
        data.extend(anchor.to_scalars());
    }
    data.extend(partial.to_scalars());
    let observed = |r: usize, c: usize| -> bool {
        r < new_row || partial.masks()[c / 2] == EntryMask::Measured
    };

    // mean-impute missing cells, then seed the factors from the SVD
    let mut col_mean = vec![0.0f64; cols];
    for (c, mean) in col_mean.iter_mut().enumerate() {
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for r in 0..rows {
            if observed(r, c) {
                sum += data[r * cols + c];
                cnt += 1;
            }
        }
        *mean = sum / cnt as f64;
    }
    let imputed = DMatrix::from_fn(rows, cols, |r, c| {
        if observed(r, c) {
            data[r * cols + c]
        } else {
            col_mean[c]
        }
    });
    let svd = imputed.svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let rank = cfg.rank.min(svd.singular_values.len());
    let mut p = vec![0.0f64; rows * rank];
    let mut q = vec![0.0f64; cols * rank];
    for f in 0..rank {
        let scale = svd.singular_values[f].max(0.0).sqrt();
        for r in 0..rows {
            p[r * rank + f] = u[(r, f)] * scale;
        }
        for c in 0..cols {
            q[c * rank + f] = v_t[(f, c)] * scale;
        }
    }

    // stochastic gradient refinement on the observed entries; stops when the
    // training RMSE reaches the tolerance or stops improving at its scale
    let mut cells: Vec<(u32, u32)> = (0..rows as u32)
        .flat_map(|r| (0..cols as u32).map(move |c| (r, c)))
        .filter(|&(r, c)| observed(r as usize, c as usize))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = cfg.learn_rate;
    let reg = cfg.regularization;
    let mut scratch = vec![0.0f64; rank];
    let epochs = cfg
        .max_epochs
        .min((cfg.max_cell_updates / cells.len().max(1)).max(1));
    for _ in 0..epochs {
        cells.shuffle(&mut rng);
        let mut sq_err = 0.0;
        for &(r, c) in &cells {
            let (r, c) = (r as usize, c as usize);
            let pr = &mut p[r * rank..(r + 1) * rank];
            let qc = &mut q[c * rank..(c + 1) * rank];
            let mut pred = 0.0;
            for f in 0..rank {
                pred += pr[f] * qc[f];
            }
            let err = data[r * cols + c] - pred;
            scratch.copy_from_slice(pr);
            for f in 0..rank {
                pr[f] += lr * (err * qc[f] - reg * pr[f]);
                qc[f] += lr * (err * scratch[f] - reg * qc[f]);
            }
            sq_err += err * err;
        }
        let rmse = (sq_err / cells.len() as f64).sqrt();
        if rmse <= cfg.convergence_tol {
            break;
        }
    }

    // read reconstructed entries; measured ones stay untouched
    let mut out = partial.clone();
    for i in 1..=n {
        for j in 1..=n {
            if out.mask_at(i, j) == EntryMask::Measured {
                continue;
            }
            let pair_col = ((i - 1) * n + (j - 1)) * 2;
            let mut slope = 0.0;
            let mut intercept = 0.0;
            for f in 0..rank {
                slope += p[new_row * rank + f] * q[pair_col * rank + f];
                intercept += p[new_row * rank + f] * q[(pair_col + 1) * rank + f];
            }
            let pair = InterferencePair {
                slope: slope.max(0.0),
                intercept: intercept.max(INTERCEPT_FLOOR),
            };
            out.set(i, j, pair, EntryMask::Reconstructed);
        }
    }
    out
}
