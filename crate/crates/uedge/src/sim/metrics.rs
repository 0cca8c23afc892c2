//! Per-instance measurements and run-level aggregates.

use std::collections::BTreeMap;
use std::error::Error;
use std::fmt;

use crate::model::DeviceId;

/// One finished instance's metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMetrics {
    pub instance_id: u64,
    pub arrival_time: f64,
    /// Mean completion time of the instance's tasks, measured from arrival.
    pub service_time: f64,
    /// Mean service time over the trailing window of instances; defined from
    /// instance `window` onward.
    pub running_avg: Option<f64>,
    /// Share of avoidable input transmissions actually incurred, in percent:
    /// for each input group spanning d devices, d-1 of its transmissions were
    /// avoidable overhead out of a possible group-size-1.
    pub bandwidth_overhead_pct: f64,
    /// Time the scheduler spent deciding where this instance's tasks go.
    pub orchestration_overhead: f64,
}

/// Everything a simulation run reports.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub per_instance: Vec<InstanceMetrics>,
    pub mean_service_time: f64,
    pub mean_bandwidth_overhead_pct: f64,
    pub mean_orchestration_overhead: f64,
    /// Gini coefficient of per-device dispatch counts (0 = perfectly even).
    pub gini: f64,
    pub dispatches_per_device: BTreeMap<DeviceId, u64>,
    pub total_dispatches: u64,
    pub total_completions: u64,
    /// Tasks whose device exited mid-execution and were sent elsewhere.
    pub redispatches: u64,
    /// Gradient-descent corrections fired by feedback errors above delta.
    pub readjustments: u64,
}

impl MetricsRecord {
    /// Stable per-instance CSV; running averages before the window print
    /// empty. Floats use the shortest round-trip representation, so equal
    /// runs render byte-identical files.
    pub fn per_instance_csv(&self) -> String {
        let mut out =
            String::from("instance_id,arrival_t,service_time,running_avg,bw_overhead_pct,orch_overhead_s\n");
        for i in &self.per_instance {
            let avg = i.running_avg.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i.instance_id,
                i.arrival_time,
                i.service_time,
                avg,
                i.bandwidth_overhead_pct,
                i.orchestration_overhead
            ));
        }
        out
    }

    /// One-row aggregate CSV.
    pub fn summary_csv(&self, scheme: &str) -> String {
        let mut out = String::from(
            "scheme,instances,mean_service_time_s,mean_bw_overhead_pct,mean_orch_overhead_s,gini,total_dispatches,total_completions,redispatches,readjustments\n",
        );
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            scheme,
            self.per_instance.len(),
            self.mean_service_time,
            self.mean_bandwidth_overhead_pct,
            self.mean_orchestration_overhead,
            self.gini,
            self.total_dispatches,
            self.total_completions,
            self.redispatches,
            self.readjustments
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    AllZero,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AllZero => write!(f, "gini undefined for all-zero counts"),
        }
    }
}

impl Error for MetricsError {}

/// Gini coefficient of non-negative counts:
/// `sum_p sum_q |x_p - x_q| / (2 * Q^2 * mean)`.
pub fn gini(counts: &[u64]) -> Result<f64, MetricsError> {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(MetricsError::AllZero);
    }
    let q = counts.len() as f64;
    let mean = total as f64 / q;
    let mut abs_diff_sum = 0.0;
    for &a in counts {
        for &b in counts {
            abs_diff_sum += (a as f64 - b as f64).abs();
        }
    }
    Ok(abs_diff_sum / (2.0 * q * q * mean))
}

/// Running averages over a trailing window, defined from the `window`-th
/// instance onward.
pub fn running_averages(service_times: &[f64], window: usize) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(service_times.len());
    let mut sum = 0.0;
    for (i, &st) in service_times.iter().enumerate() {
        sum += st;
        if i + 1 > window {
            sum -= service_times[i - window];
        }
        if window > 0 && i + 1 >= window {
            out.push(Some(sum / window as f64));
        } else {
            out.push(None);
        }
    }
    out
}

/// Avoidable-transmission share for one instance, in percent. Groups of one
/// task never incur overhead; an instance without multi-task groups scores 0.
pub fn bandwidth_overhead_pct(groups: &[Vec<usize>], device_of: impl Fn(usize) -> DeviceId) -> f64 {
    let mut avoidable = 0usize;
    let mut incurred = 0usize;
    for group in groups {
        if group.len() < 2 {
            continue;
        }
        let mut devices: Vec<DeviceId> = group.iter().map(|&t| device_of(t)).collect();
        devices.sort_unstable();
        devices.dedup();
        avoidable += group.len() - 1;
        incurred += devices.len() - 1;
    }
    if avoidable == 0 {
        0.0
    } else {
        100.0 * incurred as f64 / avoidable as f64
    }
}
