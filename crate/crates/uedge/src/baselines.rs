//! Reference schedulers the orchestrator is evaluated against.
//!
//! None of them model interference or predict availability: they see the set
//! of currently-up devices and whatever coarse signals they were designed
//! around (queue lengths, an advertised processor speed, nothing at all).
//! They may therefore hand a task to a device about to exit, which the
//! availability-filtering orchestrator avoids.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{
    ApplicationProfile, Assignment, DeviceId, TaskAssignment, TaskCountMatrix,
};

/// Shortest-queue-length-first: each task goes to the eligible device with
/// the fewest tasks currently assigned, counting the tasks of the same
/// instance placed just before it (balancing semantics). Ties break to the
/// lowest device id.
pub fn sqlf_schedule(
    profile: &ApplicationProfile,
    eligible: &[DeviceId],
    counts: &TaskCountMatrix,
) -> Assignment {
    assert!(!eligible.is_empty());
    let mut sorted = eligible.to_vec();
    sorted.sort_unstable();
    let mut totals: BTreeMap<DeviceId, u32> =
        sorted.iter().map(|&d| (d, counts.total(d))).collect();
    let tasks = profile
        .tasks
        .iter()
        .map(|_| {
            let dev = *sorted
                .iter()
                .min_by_key(|d| totals[d])
                .expect("eligible set non-empty");
            *totals.get_mut(&dev).unwrap() += 1;
            TaskAssignment { device: dev, expected_st: None }
        })
        .collect();
    Assignment { tasks }
}

/// Power-of-two-choices: per task, sample two distinct eligible devices and
/// send the task to the one with the lower speed-based service-time estimate
/// `(1 + queued) * base_time / nominal_speed`. Counts placed within the same
/// instance are visible to later tasks.
pub fn two_choice_schedule(
    profile: &ApplicationProfile,
    eligible: &[DeviceId],
    counts: &TaskCountMatrix,
    speeds: &BTreeMap<DeviceId, f64>,
    rng: &mut ChaCha8Rng,
) -> Assignment {
    assert!(!eligible.is_empty());
    let mut sorted = eligible.to_vec();
    sorted.sort_unstable();
    let mut totals: BTreeMap<DeviceId, u32> =
        sorted.iter().map(|&d| (d, counts.total(d))).collect();
    let estimate = |dev: DeviceId, queued: u32, base: f64| -> f64 {
        (1.0 + queued as f64) * base / speeds[&dev]
    };
    let tasks = profile
        .tasks
        .iter()
        .map(|task| {
            let (a, b) = if sorted.len() == 1 {
                (sorted[0], sorted[0])
            } else {
                let first = rng.random_range(0..sorted.len());
                let delta = rng.random_range(1..sorted.len());
                (sorted[first], sorted[(first + delta) % sorted.len()])
            };
            let st_a = estimate(a, totals[&a], task.base_service_time);
            let st_b = estimate(b, totals[&b], task.base_service_time);
            let (dev, st) = if st_a < st_b || (st_a == st_b && a <= b) {
                (a, st_a)
            } else {
                (b, st_b)
            };
            *totals.get_mut(&dev).unwrap() += 1;
            TaskAssignment { device: dev, expected_st: Some(st) }
        })
        .collect();
    Assignment { tasks }
}

/// Round-robin over the eligible set (sorted by id); the cursor persists
/// across instances.
pub fn round_robin_schedule(
    profile: &ApplicationProfile,
    eligible: &[DeviceId],
    cursor: &mut u64,
) -> Assignment {
    assert!(!eligible.is_empty());
    let mut sorted = eligible.to_vec();
    sorted.sort_unstable();
    let tasks = profile
        .tasks
        .iter()
        .map(|_| {
            let dev = sorted[(*cursor % sorted.len() as u64) as usize];
            *cursor += 1;
            TaskAssignment { device: dev, expected_st: None }
        })
        .collect();
    Assignment { tasks }
}

/// Uniformly random eligible device per task.
pub fn random_schedule(
    profile: &ApplicationProfile,
    eligible: &[DeviceId],
    rng: &mut ChaCha8Rng,
) -> Assignment {
    assert!(!eligible.is_empty());
    let mut sorted = eligible.to_vec();
    sorted.sort_unstable();
    let tasks = profile
        .tasks
        .iter()
        .map(|_| TaskAssignment {
            device: *sorted.choose(rng).expect("eligible set non-empty"),
            expected_st: None,
        })
        .collect();
    Assignment { tasks }
}
