//! Synthetic fleet generation: true interference tables, network delays,
//! availability histories, churn schedules and capacity-variation events.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::interference::CompositionMode;
use crate::model::{
    ApplicationProfile, Availability, AvailabilitySegment, AvailabilityTrace, CapacityEvent,
    DeviceId, DeviceSpec, InterferencePair, ProfileRow,
};

const DAY_SECONDS: f64 = 86_400.0;

/// Fleet-level generator knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceGenParams {
    pub count: usize,
    /// Per-device interference slopes are drawn uniformly from this range.
    pub slope_range: (f64, f64),
    /// Multiplies every service time on the device: < 1 is faster than the
    /// reference device, > 1 slower.
    pub speed_factor_range: (f64, f64),
    /// Extra per-device-per-task speed variation on top of the device speed
    /// factor; models devices being relatively better at some task types.
    pub task_speed_jitter: f64,
    pub delay_range: (f64, f64),
    pub history_days: usize,
}

impl Default for DeviceGenParams {
    fn default() -> Self {
        Self {
            count: 15,
            slope_range: (0.0, 0.1),
            speed_factor_range: (0.6, 1.6),
            task_speed_jitter: 0.22,
            delay_range: (0.005, 0.030),
            history_days: 5,
        }
    }
}

/// Devices that repeatedly leave and rejoin during the run. Durations are
/// drawn uniformly from the given ranges; bounded (non-memoryless) up-times
/// are what makes imminent exits predictable from a device's age.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChurnParams {
    pub devices: usize,
    pub up_range: (f64, f64),
    pub down_range: (f64, f64),
    /// Speed factors for churning devices; defaults to the fleet range.
    /// Frequently-departing personal devices are typically also the busy,
    /// slower ones.
    pub speed_factor_range: Option<(f64, f64)>,
}

/// Devices whose compute capacity periodically degrades and recovers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityParams {
    pub devices: usize,
    /// Slow-down factor applied during a degradation window (> 1).
    pub scale: f64,
    pub start: f64,
    pub period: f64,
    pub duration: f64,
}

/// A scheduled up/down transition the simulator will enact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceEvent {
    pub time: f64,
    pub device: DeviceId,
    pub state: Availability,
}

/// Builds the fleet and its in-run churn schedule. Churning devices take the
/// highest ids; capacity variation hits the fastest non-churning devices,
/// where it matters most.
pub fn generate_fleet(
    profile: &ApplicationProfile,
    mode: CompositionMode,
    params: &DeviceGenParams,
    churn: Option<ChurnParams>,
    capacity: Option<CapacityParams>,
    horizon: f64,
    seed: u64,
) -> (Vec<DeviceSpec>, Vec<DeviceEvent>) {
    let n = profile.task_count();
    let churn_count = churn.map_or(0, |c| c.devices.min(params.count));
    let churn_start = params.count - churn_count;

    let mut specs = Vec::with_capacity(params.count);
    let mut events = Vec::new();
    for idx in 0..params.count {
        let id = DeviceId(idx as u32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(idx as u64 + 1)));
        let speed_range = if idx >= churn_start {
            churn.and_then(|c| c.speed_factor_range).unwrap_or(params.speed_factor_range)
        } else {
            params.speed_factor_range
        };
        let speed_factor = rng.random_range(speed_range.0..=speed_range.1);
        let delay = rng.random_range(params.delay_range.0..=params.delay_range.1);
        let jitter = params.task_speed_jitter;
        let task_factor: Vec<f64> =
            (0..n).map(|_| speed_factor * rng.random_range(1.0 - jitter..=1.0 + jitter)).collect();

        let mut pairs = Vec::with_capacity(n * n);
        for (task, factor) in profile.tasks.iter().zip(&task_factor) {
            let base = task.base_service_time * factor;
            for _j in 0..n {
                let slope = rng.random_range(params.slope_range.0..=params.slope_range.1);
                let intercept = match mode {
                    // the N intercepts sum back to the device's base time
                    CompositionMode::Additive => base / n as f64,
                    // every pairwise line starts at the device's base time
                    CompositionMode::Marginal => base,
                };
                pairs.push(InterferencePair { slope, intercept });
            }
        }
        let true_row = ProfileRow::from_pairs(n, pairs);

        let churning = idx >= churn_start;
        let availability = if churning {
            let c = churn.expect("churning device implies churn params");
            churn_history(params.history_days, c, &mut rng)
        } else {
            stable_history(params.history_days)
        };
        if churning {
            let c = churn.expect("churning device implies churn params");
            churn_schedule(id, c, horizon, &mut rng, &mut events);
        }

        specs.push(DeviceSpec {
            id,
            network_delay: delay,
            true_row,
            capacity_events: Vec::new(),
            availability,
            nominal_speed: 1.0 / speed_factor,
        });
    }

    if let Some(cap) = capacity {
        // fastest non-churning devices by generated speed
        let mut candidates: Vec<usize> = (0..churn_start).collect();
        candidates.sort_by(|&a, &b| {
            specs[b]
                .nominal_speed
                .partial_cmp(&specs[a].nominal_speed)
                .unwrap()
                .then(a.cmp(&b))
        });
        for &idx in candidates.iter().take(cap.devices) {
            let mut t = cap.start;
            let mut ev = Vec::new();
            while t < horizon {
                ev.push(CapacityEvent { time: t, scale: cap.scale });
                ev.push(CapacityEvent { time: t + cap.duration, scale: 1.0 / cap.scale });
                t += cap.period;
            }
            specs[idx].capacity_events = ev;
        }
    }

    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.device.cmp(&b.device)));
    (specs, events)
}

fn stable_history(days: usize) -> AvailabilityTrace {
    let day = vec![AvailabilitySegment { state: Availability::Up, duration: DAY_SECONDS }];
    AvailabilityTrace { days: vec![day; days.max(1)] }
}

fn churn_history(days: usize, churn: ChurnParams, rng: &mut ChaCha8Rng) -> AvailabilityTrace {
    let mut out = Vec::with_capacity(days.max(1));
    for _ in 0..days.max(1) {
        let mut day = Vec::new();
        let mut elapsed = 0.0;
        let mut state = Availability::Up;
        while elapsed < DAY_SECONDS {
            let range = match state {
                Availability::Up => churn.up_range,
                Availability::Down => churn.down_range,
            };
            let d = uniform_draw(range, rng).min(DAY_SECONDS - elapsed).max(1e-3);
            day.push(AvailabilitySegment { state, duration: d });
            elapsed += d;
            state = match state {
                Availability::Up => Availability::Down,
                Availability::Down => Availability::Up,
            };
        }
        out.push(day);
    }
    AvailabilityTrace { days: out }
}

fn churn_schedule(
    id: DeviceId,
    churn: ChurnParams,
    horizon: f64,
    rng: &mut ChaCha8Rng,
    events: &mut Vec<DeviceEvent>,
) {
    // device starts up at t = 0
    let mut t = uniform_draw(churn.up_range, rng);
    while t < horizon {
        events.push(DeviceEvent { time: t, device: id, state: Availability::Down });
        t += uniform_draw(churn.down_range, rng);
        if t >= horizon {
            break;
        }
        events.push(DeviceEvent { time: t, device: id, state: Availability::Up });
        t += uniform_draw(churn.up_range, rng);
    }
}

fn uniform_draw(range: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(range.0..=range.1)
}
