//! Runs one scenario under every scheduler and prints the headline metrics.
//!
//! Usage: cargo run --example compare_schedulers [scenario.toml]

use uedge::scenario::ScenarioFile;
use uedge::sim::{self, SchedulerKind};

fn main() {
    let path = std::env::args().nth(1);
    let text = match path {
        Some(p) => std::fs::read_to_string(p).expect("readable scenario file"),
        None => DEFAULT_SCENARIO.to_string(),
    };
    let file = ScenarioFile::parse(&text).expect("valid scenario");
    println!(
        "{:<24} {:>12} {:>10} {:>12} {:>8} {:>8}",
        "scheduler", "mean_st_s", "bw_pct", "overhead_s", "gini", "redisp"
    );
    for scheme in [
        SchedulerKind::InterferenceFull,
        SchedulerKind::InterferenceBudgeted,
        SchedulerKind::Sqlf,
        SchedulerKind::TwoChoice,
        SchedulerKind::RoundRobin,
        SchedulerKind::Random,
    ] {
        let mut variant = file.clone();
        variant.scheduler.scheme = scheme;
        let scenario = variant.build().expect("scenario builds");
        let record = sim::run(&scenario).expect("run completes");
        println!(
            "{:<24} {:>12.4} {:>10.2} {:>12.6} {:>8.4} {:>8}",
            format!("{scheme:?}"),
            record.mean_service_time,
            record.mean_bandwidth_overhead_pct,
            record.mean_orchestration_overhead,
            record.gini,
            record.redispatches
        );
    }
}

const DEFAULT_SCENARIO: &str = r#"
[profile]
preset = "heavy"
instances = 500

[devices]
count = 15

[seeds]
master = 42
"#;
