//! Batch entry point: runs scenarios, parameter sweeps, the queueing-model
//! comparison, and state snapshots. All output is CSV; nothing is seeded
//! from the clock. The output directory can be overridden with the
//! `UEDGE_OUT_DIR` environment variable.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use uedge::analysis::{compare_analysis_vs_simulation, solve_stationary, ChainConfig};
use uedge::interference::CompositionMode;
use uedge::model::HyperParams;
use uedge::orchestrator::OrchestratorState;
use uedge::scenario::ScenarioFile;
use uedge::sim::{self, OverheadMode, Scenario, SchedulerKind};
use uedge::snapshot;

#[derive(Parser)]
#[command(name = "uedge", version, about = "Interference-aware edge orchestration simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write per_instance.csv and summary.csv.
    Simulate(SimulateArgs),
    /// Re-run a scenario across a list of values for one parameter.
    Sweep(SweepArgs),
    /// Solve the queueing chain over a lambda range and compare against the
    /// in-order dispatch simulators.
    Analyze(AnalyzeArgs),
    /// Save or inspect orchestrator state snapshots.
    #[command(subcommand)]
    Snapshot(SnapshotCmd),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Force the deterministic simulated overhead model regardless of the
    /// scenario's overhead_mode.
    #[arg(long)]
    sim_overhead: bool,
    /// Override the scenario's scheduler.
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<SchedulerKind>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// One of: lambda, delta, beta, churn_pct, capacity_pct, q.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    sim_overhead: bool,
    /// Override the scenario's scheduler.
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<SchedulerKind>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Tasks per instance.
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Device count.
    #[arg(long, default_value_t = 3)]
    q: usize,
    /// Per-type service rates, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![10.0, 30.0])]
    mu: Vec<f64>,
    /// Arrival rates to evaluate.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 5.0, 10.0, 15.0, 20.0])]
    lambdas: Vec<f64>,
    /// Instances per simulated point.
    #[arg(long, default_value_t = 40_000)]
    instances: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    truncation: usize,
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Write the CSV but keep stdout quiet.
    #[arg(long)]
    csv_only: bool,
}

#[derive(Subcommand)]
enum SnapshotCmd {
    /// Profile a scenario's fleet and persist the resulting orchestrator
    /// state (rows, delays, availability models).
    Save {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a snapshot and print what it holds.
    Load {
        #[arg(long)]
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Snapshot(cmd) => cmd_snapshot(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn parse_scheme(name: &str) -> Result<SchedulerKind, String> {
    match name {
        "interference-full" => Ok(SchedulerKind::InterferenceFull),
        "interference-budgeted" => Ok(SchedulerKind::InterferenceBudgeted),
        "sqlf" => Ok(SchedulerKind::Sqlf),
        "two-choice" => Ok(SchedulerKind::TwoChoice),
        "round-robin" => Ok(SchedulerKind::RoundRobin),
        "random" => Ok(SchedulerKind::Random),
        other => Err(format!(
            "unknown scheme '{other}' (interference-full, interference-budgeted, sqlf, two-choice, round-robin, random)"
        )),
    }
}

fn out_dir(flag: &Path) -> PathBuf {
    match std::env::var_os("UEDGE_OUT_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => flag.to_path_buf(),
    }
}

/// Writes a file atomically: temp file in the same directory, then rename.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn load_scenario(path: &Path, sim_overhead: bool) -> Result<(ScenarioFile, Scenario)> {
    let file = ScenarioFile::load(path).map_err(|e| anyhow!("{e}"))?;
    let mut scenario = file.build().map_err(|e| anyhow!("{e}"))?;
    if sim_overhead {
        scenario.overhead = OverheadMode::default();
    }
    Ok((file, scenario))
}

fn scheme_name(file: &ScenarioFile) -> String {
    format!("{:?}", file.scheduler.scheme)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let (mut file, mut scenario) = load_scenario(&args.scenario, args.sim_overhead)?;
    if let Some(scheme) = args.scheme {
        file.scheduler.scheme = scheme;
        scenario = file.build().map_err(|e| anyhow!("{e}"))?;
        if args.sim_overhead {
            scenario.overhead = OverheadMode::default();
        }
    }
    let record = sim::run(&scenario).map_err(|e| anyhow!("{e}"))?;
    let dir = out_dir(&args.out);
    write_atomic(&dir.join("per_instance.csv"), &record.per_instance_csv())?;
    write_atomic(&dir.join("summary.csv"), &record.summary_csv(&scheme_name(&file)))?;
    println!(
        "{} instances | mean service time {:.6} s | bandwidth overhead {:.2}% | gini {:.4}",
        record.per_instance.len(),
        record.mean_service_time,
        record.mean_bandwidth_overhead_pct,
        record.gini
    );
    println!("wrote {}", dir.join("per_instance.csv").display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.values.is_empty() {
        return Err(anyhow!("sweep needs at least one value"));
    }
    if !ScenarioFile::SWEEP_PARAMS.contains(&args.param.as_str()) {
        return Err(anyhow!(
            "unknown sweep parameter '{}' (one of {:?})",
            args.param,
            ScenarioFile::SWEEP_PARAMS
        ));
    }
    let (mut base_file, _) = load_scenario(&args.scenario, args.sim_overhead)?;
    if let Some(scheme) = args.scheme {
        base_file.scheduler.scheme = scheme;
    }
    let mut rows = String::from(
        "param,value,mean_service_time_s,mean_bw_overhead_pct,mean_orch_overhead_s,gini,redispatches,readjustments\n",
    );
    for &value in &args.values {
        let mut file = base_file.clone();
        file.apply_param(&args.param, value).map_err(|e| anyhow!("{e}"))?;
        let mut scenario = file.build().map_err(|e| anyhow!("{e}"))?;
        if args.sim_overhead {
            scenario.overhead = OverheadMode::default();
        }
        let record = sim::run(&scenario).map_err(|e| anyhow!("{e}"))?;
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            args.param,
            value,
            record.mean_service_time,
            record.mean_bandwidth_overhead_pct,
            record.mean_orchestration_overhead,
            record.gini,
            record.redispatches,
            record.readjustments
        ));
        println!(
            "{} = {value}: mean service time {:.6} s, bandwidth overhead {:.2}%",
            args.param, record.mean_service_time, record.mean_bandwidth_overhead_pct
        );
    }
    let dir = out_dir(&args.out);
    write_atomic(&dir.join("sweep.csv"), &rows)?;
    println!("wrote {}", dir.join("sweep.csv").display());
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let base = ChainConfig {
        truncation: args.truncation,
        damping: args.damping,
        tol: args.tol,
        ..ChainConfig::new(args.n, args.q, 1.0, args.mu.clone())
    };
    // surface configuration problems (q=1, instability) before simulating
    for &lambda in &args.lambdas {
        let cfg = ChainConfig { lambda, ..base.clone() };
        solve_stationary(&cfg).map_err(|e| anyhow!("lambda {lambda}: {e}"))?;
    }
    let rows = compare_analysis_vs_simulation(&base, &args.lambdas, args.instances, args.seed)
        .map_err(|e| anyhow!("{e}"))?;
    let mut csv =
        String::from("lambda,t_analytical_raw,t_analytical_per_task,t_simulated,t_serial_sim\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.lambda,
            row.t_analytical_raw,
            row.t_analytical_per_task,
            row.t_simulated,
            row.t_serial_sim
        ));
    }
    let dir = out_dir(&args.out);
    write_atomic(&dir.join("analysis.csv"), &csv)?;
    if !args.csv_only {
        println!(
            "{:>8} {:>16} {:>20} {:>14} {:>14}",
            "lambda", "t_analytical", "t_analytical/task", "t_simulated", "t_serial_sim"
        );
        for row in &rows {
            println!(
                "{:>8} {:>16.6} {:>20.6} {:>14.6} {:>14.6}",
                row.lambda,
                row.t_analytical_raw,
                row.t_analytical_per_task,
                row.t_simulated,
                row.t_serial_sim
            );
        }
    }
    println!("wrote {}", dir.join("analysis.csv").display());
    Ok(())
}

fn cmd_snapshot(cmd: SnapshotCmd) -> Result<()> {
    match cmd {
        SnapshotCmd::Save { scenario, out } => {
            let (_, scenario) = load_scenario(&scenario, false)?;
            let state = sim::build_orchestrator_state(&scenario);
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    fs::create_dir_all(dir)?;
                }
            }
            snapshot::save(&state, &out).map_err(|e| anyhow!("{e}"))?;
            println!(
                "saved {} device rows ({} archived) to {}",
                state.matrix.len(),
                state.saved.len(),
                out.display()
            );
            Ok(())
        }
        SnapshotCmd::Load { path } => {
            let n = snapshot::task_count(&path).map_err(|e| anyhow!("{e}"))?;
            let mut state =
                OrchestratorState::new(n, CompositionMode::Additive, HyperParams::default());
            snapshot::load(&path, &mut state).map_err(|e| anyhow!("{e}"))?;
            println!(
                "snapshot v{}: {} tasks per instance, {} live device rows, {} archived",
                snapshot::VERSION,
                n,
                state.matrix.len(),
                state.saved.len()
            );
            for (id, row) in state.matrix.rows() {
                println!(
                    "  {id}: {} measured / {} total entries, delay {:.4} s",
                    row.measured_count(),
                    row.entries().len(),
                    state.delays[&id]
                );
            }
            Ok(())
        }
    }
}
