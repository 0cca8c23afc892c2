//! Expected service time under co-location, and fitting of the pairwise
//! incremental service-time lines from probe observations.
//!
//! The model: on a given device, the service time of a task of type i with k
//! co-located tasks of type j follows a straight line `m_ij * k + c_ij`, and
//! the effect of a mixed load is the sum of the per-type lines (interference
//! patterns are treated as independent and additive).

use std::error::Error;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{EntryMask, InterferencePair, ProfileRow};

/// Smallest intercept any fit, completion or readjustment may produce;
/// keeps believed service times strictly positive.
pub const INTERCEPT_FLOOR: f64 = 1e-6;

/// How the per-type lines compose into one service-time estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionMode {
    /// Sum every pairwise line including all N intercepts:
    /// `sum_j (m_ij * a_j + c_ij)`. Matches the validated additive-curve
    /// experiments; intercepts act as per-type shares of the base time.
    #[default]
    Additive,
    /// One base intercept plus the slope contributions:
    /// `c_ii + sum_j m_ij * a_j`.
    Marginal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InterferenceError {
    /// The row block for this task has an entry that is neither measured nor
    /// reconstructed.
    MissingEntry { task: usize, other: usize },
    /// Probe points share the same co-location count; no line through them.
    DegenerateProbe { count: u32 },
    /// Probe observations must be positive service times.
    NonPositiveObservation(f64),
}

impl fmt::Display for InterferenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingEntry { task, other } => {
                write!(f, "missing pair ({task}, {other}) in profile row")
            }
            Self::DegenerateProbe { count } => {
                write!(f, "both probe points at co-location count {count}")
            }
            Self::NonPositiveObservation(st) => {
                write!(f, "probe observed non-positive service time {st}")
            }
        }
    }
}

impl Error for InterferenceError {}

/// Expected service time of task `task` (1-based) on a device whose believed
/// row is `row`, given `counts[j]` tasks of type j+1 already running there.
///
/// Network delay is not included; callers add their own delay estimate.
pub fn expected_service_time(
    task: usize,
    row: &ProfileRow,
    counts: &[u32],
    mode: CompositionMode,
) -> Result<f64, InterferenceError> {
    let n = row.task_count();
    assert_eq!(counts.len(), n, "count vector length must equal task count");
    let block = row.task_block(task);
    let masks = row.task_block_mask(task);
    if let Some(j) = masks.iter().position(|m| *m == EntryMask::Missing) {
        return Err(InterferenceError::MissingEntry { task, other: j + 1 });
    }
    let mut total = 0.0;
    match mode {
        CompositionMode::Additive => {
            for (j, pair) in block.iter().enumerate() {
                total += pair.slope * counts[j] as f64 + pair.intercept;
            }
        }
        CompositionMode::Marginal => {
            total = block[task - 1].intercept;
            for (j, pair) in block.iter().enumerate() {
                total += pair.slope * counts[j] as f64;
            }
        }
    }
    Ok(total)
}

/// One probe observation: measured service time with `co_located` tasks of
/// the probed type running alongside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePoint {
    pub co_located: u32,
    pub service_time: f64,
}

/// Fits the line through two probe points.
///
/// A fitted negative slope is clamped to zero (measurement noise can produce
/// tiny negatives; the model asserts non-negative interference), and a
/// non-positive intercept is clamped to a small epsilon. Both clamps are
/// logged.
pub fn fit_pair(p1: ProbePoint, p2: ProbePoint) -> Result<InterferencePair, InterferenceError> {
    if p1.co_located == p2.co_located {
        return Err(InterferenceError::DegenerateProbe { count: p1.co_located });
    }
    for p in [&p1, &p2] {
        if p.service_time <= 0.0 || p.service_time.is_nan() {
            return Err(InterferenceError::NonPositiveObservation(p.service_time));
        }
    }
    let dk = p2.co_located as f64 - p1.co_located as f64;
    let mut slope = (p2.service_time - p1.service_time) / dk;
    if slope < 0.0 {
        log::debug!("clamping fitted negative slope {slope} to 0");
        slope = 0.0;
    }
    let mut intercept = p1.service_time - slope * p1.co_located as f64;
    if intercept <= 0.0 {
        log::debug!("clamping fitted non-positive intercept {intercept}");
        intercept = INTERCEPT_FLOOR;
    }
    Ok(InterferencePair { slope, intercept })
}
