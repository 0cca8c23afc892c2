//! Semi-Markov availability model.
//!
//! A device alternates between up and down; the next transition depends on
//! how long it has been in the current state, not just on the state. We fit
//! empirical holding-time distributions from the device's per-day history and
//! answer "what is the probability it stays up for the next t seconds"
//! by residual-life conditioning on the current age.

use std::error::Error;
use std::fmt;

use crate::interference::{expected_service_time, CompositionMode};
use crate::model::{Availability, AvailabilityTrace, ProfileRow};

/// Two-state semi-Markov model with empirical holding distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct SmpModel {
    /// Completed up durations, sorted ascending.
    up_holding: Vec<f64>,
    /// Completed down durations, sorted ascending.
    down_holding: Vec<f64>,
    pub current_state: Availability,
    /// Seconds spent in the current state.
    pub current_age: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AvailabilityError {
    /// The trace has no completed up interval to learn from.
    EmptyHistory,
    /// No device rows to compute the task horizon over.
    NoDevices,
}

impl fmt::Display for AvailabilityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyHistory => write!(f, "availability history has no up intervals"),
            Self::NoDevices => write!(f, "no device rows available"),
        }
    }
}

impl Error for AvailabilityError {}

/// Pools up/down durations across all days of the trace and returns a model
/// positioned at (up, age 0); the live state is maintained by the caller as
/// transitions happen.
pub fn fit_smp(trace: &AvailabilityTrace) -> Result<SmpModel, AvailabilityError> {
    let mut up = Vec::new();
    let mut down = Vec::new();
    for day in &trace.days {
        for seg in day {
            match seg.state {
                Availability::Up => up.push(seg.duration),
                Availability::Down => down.push(seg.duration),
            }
        }
    }
    if up.is_empty() {
        return Err(AvailabilityError::EmptyHistory);
    }
    up.sort_by(f64::total_cmp);
    down.sort_by(f64::total_cmp);
    Ok(SmpModel { up_holding: up, down_holding: down, current_state: Availability::Up, current_age: 0.0 })
}

impl SmpModel {
    pub fn up_samples(&self) -> &[f64] {
        &self.up_holding
    }

    pub fn down_samples(&self) -> &[f64] {
        &self.down_holding
    }

    /// Rebuilds a model from raw samples (snapshot restore path).
    pub fn from_samples(
        mut up: Vec<f64>,
        mut down: Vec<f64>,
        state: Availability,
        age: f64,
    ) -> Self {
        up.sort_by(f64::total_cmp);
        down.sort_by(f64::total_cmp);
        Self { up_holding: up, down_holding: down, current_state: state, current_age: age }
    }

    /// Records a live transition: the device is now in `state` with age 0.
    pub fn note_transition(&mut self, state: Availability) {
        self.current_state = state;
        self.current_age = 0.0;
    }

    pub fn set_age(&mut self, age: f64) {
        self.current_age = age;
    }

    fn count_above(samples: &[f64], threshold: f64) -> usize {
        // samples sorted ascending; count strictly greater
        let idx = samples.partition_point(|&s| s <= threshold);
        samples.len() - idx
    }
}

/// Probability that the device stays continuously up for the next `t`
/// seconds, conditioned on its current state and age:
/// `P(U > age + t | U > age)` from the empirical up-holding survival
/// function. Returns 0 when the device is down, and 0 when the age already
/// exceeds every observed up duration (conservative).
pub fn reliability(model: &SmpModel, t: f64) -> f64 {
    assert!(t >= 0.0, "horizon must be non-negative");
    if model.current_state == Availability::Down {
        return 0.0;
    }
    if t == 0.0 {
        return 1.0;
    }
    let denom = SmpModel::count_above(&model.up_holding, model.current_age);
    if denom == 0 {
        return 0.0;
    }
    let num = SmpModel::count_above(&model.up_holding, model.current_age + t);
    num as f64 / denom as f64
}

/// Horizon used for availability filtering: the longest zero-load service
/// time of any task over the given device rows (the most demanding task on
/// the slowest device that could receive it).
pub fn t_max<'a>(
    rows: impl IntoIterator<Item = &'a ProfileRow>,
    mode: CompositionMode,
) -> Result<f64, AvailabilityError> {
    let mut best: Option<f64> = None;
    for row in rows {
        let n = row.task_count();
        let zeros = vec![0u32; n];
        for task in 1..=n {
            let st = expected_service_time(task, row, &zeros, mode)
                .expect("rows used for scheduling must be complete");
            best = Some(best.map_or(st, |b: f64| b.max(st)));
        }
    }
    best.ok_or(AvailabilityError::NoDevices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AvailabilitySegment, InterferencePair, ProfileRow};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn up(d: f64) -> AvailabilitySegment {
        AvailabilitySegment { state: Availability::Up, duration: d }
    }
    fn down(d: f64) -> AvailabilitySegment {
        AvailabilitySegment { state: Availability::Down, duration: d }
    }

    #[test]
    fn pooled_samples_across_days() {
        let day: Vec<_> = vec![up(3600.0), down(600.0), up(3600.0)];
        let trace = AvailabilityTrace { days: vec![day.clone(); 5] };
        let model = fit_smp(&trace).unwrap();
        assert_eq!(model.up_samples().len(), 10);
        assert!(model.up_samples().iter().all(|&s| s == 3600.0));
        assert_eq!(model.down_samples().len(), 5);
    }

    #[test]
    fn always_up_day_leaves_down_empty() {
        let trace = AvailabilityTrace { days: vec![vec![up(86400.0)]] };
        let model = fit_smp(&trace).unwrap();
        assert!(model.down_samples().is_empty());
        // R(t) is the survival of the up distribution alone
        assert_eq!(reliability(&model, 1000.0), 1.0);
        let mut old = model.clone();
        old.set_age(90000.0); // older than every sample
        assert_eq!(reliability(&old, 1.0), 0.0);
    }

    #[test]
    fn empty_history_rejected() {
        let trace = AvailabilityTrace { days: vec![vec![down(60.0)]] };
        assert_eq!(fit_smp(&trace), Err(AvailabilityError::EmptyHistory));
    }

    #[test]
    fn zero_horizon_and_down_device() {
        let trace = AvailabilityTrace { days: vec![vec![up(100.0)]] };
        let mut model = fit_smp(&trace).unwrap();
        assert_eq!(reliability(&model, 0.0), 1.0);
        model.note_transition(Availability::Down);
        assert_eq!(reliability(&model, 10.0), 0.0);
        assert_eq!(reliability(&model, 0.0), 0.0);
    }

    #[test]
    fn exponential_up_times_follow_memoryless_survival() {
        // Exp(mean 1800): R(t) should track e^{-t/1800} regardless of age.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mean = 1800.0;
        let mut days = Vec::new();
        let mut day = Vec::new();
        for i in 0..10_000 {
            let u: f64 = rng.random();
            day.push(up(-mean * u.ln()));
            day.push(down(1.0));
            if i % 1000 == 999 {
                days.push(std::mem::take(&mut day));
            }
        }
        let trace = AvailabilityTrace { days };
        let mut model = fit_smp(&trace).unwrap();
        for age in [0.0, 500.0, 1800.0] {
            model.set_age(age);
            for t in [60.0, 600.0, 1800.0] {
                let expect = (-t / mean).exp();
                assert!(
                    (reliability(&model, t) - expect).abs() <= 0.03,
                    "age {age} t {t}: {} vs {expect}",
                    reliability(&model, t)
                );
            }
        }
    }

    #[test]
    fn empirical_survival_close_to_exponential_in_ks_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mean = 1800.0;
        let day: Vec<_> = (0..10_000)
            .flat_map(|_| {
                let u: f64 = rng.random();
                [up(-mean * u.ln()), down(1.0)]
            })
            .collect();
        let model = fit_smp(&AvailabilityTrace { days: vec![day] }).unwrap();
        // KS distance between the empirical survival at age 0 and the true
        // exponential survival, probed on a grid.
        let mut ks: f64 = 0.0;
        for i in 0..200 {
            let t = i as f64 * 50.0;
            let emp = reliability(
                &SmpModel::from_samples(
                    model.up_samples().to_vec(),
                    vec![],
                    Availability::Up,
                    0.0,
                ),
                t.max(f64::MIN_POSITIVE),
            );
            ks = ks.max((emp - (-t / mean).exp()).abs());
        }
        assert!(ks < 0.05, "KS distance {ks}");
    }

    #[test]
    fn reliability_non_increasing_in_horizon_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let day: Vec<_> = (0..500)
            .flat_map(|_| [up(rng.random_range(10.0..5000.0)), down(60.0)])
            .collect();
        let mut model = fit_smp(&AvailabilityTrace { days: vec![day] }).unwrap();
        model.set_age(100.0);
        let mut prev = 1.0;
        for i in 0..100 {
            let r = reliability(&model, i as f64 * 60.0);
            assert!((0.0..=1.0).contains(&r));
            assert!(r <= prev + 1e-15);
            prev = r;
        }
    }

    #[test]
    fn scaling_durations_scales_crossing_times() {
        // If every duration is scaled by k, the t at which R crosses a level
        // scales by k too.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base: Vec<f64> = (0..2000).map(|_| rng.random_range(100.0..3000.0)).collect();
        let k = 3.5;
        let m1 = SmpModel::from_samples(base.clone(), vec![], Availability::Up, 0.0);
        let scaled: Vec<f64> = base.iter().map(|d| d * k).collect();
        let m2 = SmpModel::from_samples(scaled, vec![], Availability::Up, 0.0);
        for level in [0.8, 0.5, 0.2] {
            let cross = |m: &SmpModel, step: f64| {
                let mut t = 0.0;
                while reliability(m, t) > level {
                    t += step;
                }
                t
            };
            let t1 = cross(&m1, 1.0);
            let t2 = cross(&m2, k);
            assert!((t2 - k * t1).abs() <= k, "level {level}: {t2} vs {}", k * t1);
        }
    }

    fn diag_row(n: usize, bases: &[f64]) -> ProfileRow {
        let mut row = ProfileRow::empty(n);
        for i in 1..=n {
            for j in 1..=n {
                let c = if i == j { bases[i - 1] } else { bases[i - 1] / n as f64 };
                row.set(
                    i,
                    j,
                    InterferencePair { slope: 0.01, intercept: c },
                    crate::model::EntryMask::Measured,
                );
            }
        }
        row
    }

    #[test]
    fn t_max_is_heaviest_zero_load_task() {
        let heavy = crate::model::ApplicationProfile::heavy();
        let bases: Vec<f64> = heavy.tasks.iter().map(|t| t.base_service_time).collect();
        let row = diag_row(6, &bases);
        let t = t_max([&row], CompositionMode::Marginal).unwrap();
        assert_eq!(t, 0.60);
    }

    #[test]
    fn t_max_single_task_single_device() {
        let row = diag_row(1, &[0.25]);
        assert_eq!(t_max([&row], CompositionMode::Marginal).unwrap(), 0.25);
    }

    #[test]
    fn t_max_over_dominating_device() {
        let slow = diag_row(3, &[0.2, 0.3, 0.9]);
        let fast = diag_row(3, &[0.1, 0.2, 0.4]);
        // exhaustive max over the 2 x N table
        let mut expected: f64 = 0.0;
        for row in [&fast, &slow] {
            for task in 1..=3 {
                expected = expected.max(
                    expected_service_time(task, row, &[0, 0, 0], CompositionMode::Marginal)
                        .unwrap(),
                );
            }
        }
        let got = t_max([&fast, &slow], CompositionMode::Marginal).unwrap();
        assert_eq!(got, expected);
        assert_eq!(got, 0.9);
    }

    #[test]
    fn t_max_without_rows_errors() {
        assert_eq!(
            t_max(std::iter::empty(), CompositionMode::Additive),
            Err(AvailabilityError::NoDevices)
        );
    }
}
