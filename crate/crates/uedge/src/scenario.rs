//! Scenario files: a TOML document with sections `[profile]`, `[devices]`,
//! `[hyperparams]`, `[scheduler]`, `[churn]`, `[capacity]` and `[seeds]`.
//! Unknown keys are rejected, and every random stream derives from the
//! explicit master seed — nothing is ever seeded from the clock.

use std::error::Error;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::interference::CompositionMode;
use crate::model::{ApplicationProfile, HyperParams};
use crate::orchestrator::CountSemantics;
use crate::profiling::CompletionConfig;
use crate::sim::generate::{
    generate_fleet, CapacityParams, ChurnParams, DeviceGenParams,
};
use crate::sim::{OverheadMode, Scenario, SchedulerKind, Seeds};

#[derive(Debug)]
pub struct ScenarioError(pub String);

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Error for ScenarioError {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub profile: ProfileSection,
    pub devices: DevicesSection,
    #[serde(default)]
    pub hyperparams: HyperSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub churn: ChurnSection,
    #[serde(default)]
    pub capacity: CapacitySection,
    pub seeds: SeedsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    /// Built-in preset: light, medium or heavy.
    pub preset: String,
    #[serde(default = "default_instances")]
    pub instances: u64,
}

fn default_instances() -> u64 {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DevicesSection {
    pub count: usize,
    pub slope_range: [f64; 2],
    pub speed_factor_range: [f64; 2],
    pub task_speed_jitter: f64,
    pub delay_range: [f64; 2],
    pub history_days: usize,
    pub noise_sigma: f64,
    pub probe_cost: f64,
}

impl Default for DevicesSection {
    fn default() -> Self {
        let d = DeviceGenParams::default();
        Self {
            count: d.count,
            slope_range: [d.slope_range.0, d.slope_range.1],
            speed_factor_range: [d.speed_factor_range.0, d.speed_factor_range.1],
            task_speed_jitter: d.task_speed_jitter,
            delay_range: [d.delay_range.0, d.delay_range.1],
            history_days: d.history_days,
            noise_sigma: 0.0,
            probe_cost: 3.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSection {
    pub lambda: f64,
    pub delta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub profiling_budget: f64,
    pub running_avg_window: usize,
    /// Devices profiled in full before budgeted profiling starts.
    pub anchor_devices: usize,
    /// Low-rank completion settings; its seed derives from `[seeds]`.
    pub completion: CompletionConfig,
}

impl Default for HyperSection {
    fn default() -> Self {
        let h = HyperParams::default();
        Self {
            lambda: h.lambda,
            delta: h.delta,
            beta: h.beta,
            gamma: h.gamma,
            profiling_budget: h.profiling_budget,
            running_avg_window: h.running_avg_window,
            anchor_devices: CompletionConfig::default().rank,
            completion: CompletionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub scheme: SchedulerKind,
    pub composition: CompositionMode,
    pub count_semantics: CountSemantics,
    /// "simulated" charges the deterministic cost model; "wallclock" measures
    /// real scheduling time.
    pub overhead_mode: String,
    pub redispatch_restart: bool,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            scheme: SchedulerKind::InterferenceFull,
            composition: CompositionMode::Additive,
            count_semantics: CountSemantics::ArrivalSnapshot,
            overhead_mode: "simulated".to_string(),
            redispatch_restart: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChurnSection {
    pub enabled: bool,
    pub devices: usize,
    pub up_range: [f64; 2],
    pub down_range: [f64; 2],
    /// Speed factors of churning devices; omitted means the fleet range.
    pub speed_factor_range: Option<[f64; 2]>,
}

impl Default for ChurnSection {
    fn default() -> Self {
        Self {
            enabled: false,
            devices: 0,
            up_range: [0.6, 1.5],
            down_range: [0.4, 1.0],
            speed_factor_range: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CapacitySection {
    pub enabled: bool,
    pub devices: usize,
    pub scale: f64,
    pub start: f64,
    pub period: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub master: u64,
    pub arrivals: Option<u64>,
    pub noise: Option<u64>,
    pub scheduler: Option<u64>,
    pub devices: Option<u64>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sweepable parameters.
    pub const SWEEP_PARAMS: [&'static str; 6] =
        ["lambda", "delta", "beta", "churn_pct", "capacity_pct", "q"];

    /// Applies one sweep value. Percent knobs convert to a number of affected
    /// devices (rounded up so any positive value hits at least one device).
    pub fn apply_param(&mut self, param: &str, value: f64) -> Result<(), ScenarioError> {
        match param {
            "lambda" => self.hyperparams.lambda = value,
            "delta" => self.hyperparams.delta = value,
            "beta" => self.hyperparams.beta = value,
            "q" => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(ScenarioError(format!("q must be a positive integer, got {value}")));
                }
                self.devices.count = value as usize;
            }
            "churn_pct" => {
                let devices = ((self.devices.count as f64) * value / 100.0).ceil() as usize;
                self.churn.enabled = devices > 0;
                self.churn.devices = devices;
            }
            "capacity_pct" => {
                let devices = ((self.devices.count as f64) * value / 100.0).ceil() as usize;
                self.capacity.enabled = devices > 0;
                self.capacity.devices = devices;
                if self.capacity.scale == 0.0 {
                    self.capacity.scale = 2.0;
                }
                if self.capacity.period == 0.0 {
                    self.capacity.period = 40.0;
                }
                if self.capacity.duration == 0.0 {
                    self.capacity.duration = 15.0;
                }
            }
            other => {
                return Err(ScenarioError(format!(
                    "unknown sweep parameter '{other}' (one of {:?})",
                    Self::SWEEP_PARAMS
                )))
            }
        }
        Ok(())
    }

    /// Resolves the file into a runnable scenario: builds the fleet, the
    /// churn schedule and the capacity events from the seeds.
    pub fn build(&self) -> Result<Scenario, ScenarioError> {
        let profile = ApplicationProfile::preset(&self.profile.preset).ok_or_else(|| {
            ScenarioError(format!(
                "profile.preset '{}' unknown (light, medium, heavy)",
                self.profile.preset
            ))
        })?;
        for (name, range) in [
            ("devices.slope_range", &self.devices.slope_range),
            ("devices.speed_factor_range", &self.devices.speed_factor_range),
            ("devices.delay_range", &self.devices.delay_range),
        ] {
            if range[0] > range[1] || range[0] < 0.0 {
                return Err(ScenarioError(format!("{name} is not a valid range")));
            }
        }
        if self.devices.count == 0 {
            return Err(ScenarioError("devices.count must be at least 1".into()));
        }
        if self.churn.enabled
            && (self.churn.up_range[0] <= 0.0
                || self.churn.up_range[0] > self.churn.up_range[1]
                || self.churn.down_range[0] <= 0.0
                || self.churn.down_range[0] > self.churn.down_range[1])
        {
            return Err(ScenarioError("churn ranges must be positive and ordered".into()));
        }
        if self.capacity.enabled && self.capacity.scale <= 0.0 {
            return Err(ScenarioError("capacity.scale must be positive".into()));
        }

        let master = self.seeds.master;
        let derive = |tag: u64| master.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(tag);
        let seeds = Seeds {
            arrivals: self.seeds.arrivals.unwrap_or_else(|| derive(1)),
            noise: self.seeds.noise.unwrap_or_else(|| derive(2)),
            scheduler: self.seeds.scheduler.unwrap_or_else(|| derive(3)),
        };
        let device_seed = self.seeds.devices.unwrap_or_else(|| derive(4));

        let hyper = HyperParams {
            lambda: self.hyperparams.lambda,
            delta: self.hyperparams.delta,
            beta: self.hyperparams.beta,
            gamma: self.hyperparams.gamma,
            profiling_budget: self.hyperparams.profiling_budget,
            running_avg_window: self.hyperparams.running_avg_window,
        };
        hyper.validate().map_err(|e| ScenarioError(format!("hyperparams: {e}")))?;

        let churn = if self.churn.enabled && self.churn.devices > 0 {
            Some(ChurnParams {
                devices: self.churn.devices,
                up_range: (self.churn.up_range[0], self.churn.up_range[1]),
                down_range: (self.churn.down_range[0], self.churn.down_range[1]),
                speed_factor_range: self.churn.speed_factor_range.map(|r| (r[0], r[1])),
            })
        } else {
            None
        };
        let capacity = if self.capacity.enabled && self.capacity.devices > 0 {
            Some(CapacityParams {
                devices: self.capacity.devices,
                scale: self.capacity.scale,
                start: self.capacity.start,
                period: self.capacity.period,
                duration: self.capacity.duration,
            })
        } else {
            None
        };
        let gen = DeviceGenParams {
            count: self.devices.count,
            slope_range: (self.devices.slope_range[0], self.devices.slope_range[1]),
            speed_factor_range: (
                self.devices.speed_factor_range[0],
                self.devices.speed_factor_range[1],
            ),
            task_speed_jitter: self.devices.task_speed_jitter,
            delay_range: (self.devices.delay_range[0], self.devices.delay_range[1]),
            history_days: self.devices.history_days,
        };
        // generous horizon so churn and capacity events outlast the arrivals
        let horizon = self.profile.instances as f64 / self.hyperparams.lambda * 1.5 + 300.0;
        let mode = self.scheduler.composition;
        let (devices, device_events) =
            generate_fleet(&profile, mode, &gen, churn, capacity, horizon, device_seed);

        let overhead = match self.scheduler.overhead_mode.as_str() {
            "simulated" => OverheadMode::default(),
            "wallclock" => OverheadMode::WallClock,
            other => {
                return Err(ScenarioError(format!(
                    "scheduler.overhead_mode '{other}' (use simulated or wallclock)"
                )))
            }
        };

        Ok(Scenario {
            profile,
            mode,
            hyper,
            scheduler: self.scheduler.scheme,
            count_semantics: self.scheduler.count_semantics,
            devices,
            device_events,
            instances: self.profile.instances,
            noise_sigma: self.devices.noise_sigma,
            probe_cost: self.devices.probe_cost,
            completion: CompletionConfig {
                seed: derive(5),
                ..self.hyperparams.completion
            },
            anchor_devices: self.hyperparams.anchor_devices,
            overhead,
            seeds,
            redispatch_restart: self.scheduler.redispatch_restart,
        })
    }
}
