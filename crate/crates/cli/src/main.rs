use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cranesafe::harness::{
    compare_nominal_robust, compute_metrics, export_csv, export_plot, run_scenario_with, PlotKind, RunOptions,
    ScenarioConfig, SimulationLog, SAFETY_TOLERANCE,
};
use cranesafe::mpc::SafetyMode;

#[derive(Parser)]
#[command(name = "cranesafe", version, about = "Robust barrier MPC for a ship-mounted crane")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one closed-loop run and export its log, plots and metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the mode of the scenario file.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Simulated duration (s).
        #[arg(long)]
        duration: Option<f64>,
        /// Record the controller wall time per step in the `solve_ms` column.
        #[arg(long)]
        timing: bool,
    },
    /// Run the scenario in both modes and report them side by side.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timing: bool,
    },
    /// Check that a scenario file parses and is consistent.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Nominal,
    Robust,
}

impl From<Mode> for SafetyMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Nominal => SafetyMode::Nominal,
            Mode::Robust => SafetyMode::Robust,
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig> {
    ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn write_artifacts(log: &SimulationLog, out: &Path) -> Result<()> {
    let mode = log.mode;
    export_csv(log, &out.join(format!("log_{mode}.csv")))?;
    export_plot(log, PlotKind::Tracking, &out.join(format!("tracking_{mode}.svg")))?;
    export_plot(log, PlotKind::Safety, &out.join(format!("safety_{mode}.svg")))?;
    Ok(())
}

fn write_report(out: &Path, text: &str) -> Result<()> {
    let path = out.join("report.txt");
    fs::write(&path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))
}

/// Exit status 0 iff the run finished and, in robust mode, stayed safe.
fn run(
    config: &Path,
    mode: Option<Mode>,
    seed: Option<u64>,
    out: &Path,
    duration: Option<f64>,
    timing: bool,
) -> Result<bool> {
    let mut cfg = load(config)?;
    if let Some(m) = mode {
        cfg.mode = m.into();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = duration {
        cfg.duration = d;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log = run_scenario_with(&cfg, &RunOptions { record_timing: timing })?;
    write_artifacts(&log, out)?;
    let metrics = compute_metrics(&log.rows, log.period, &cfg.thresholds)?;
    let safe = cfg.mode == SafetyMode::Nominal || metrics.min_h_t >= -SAFETY_TOLERANCE;
    let text = format!(
        "mode {}, seed {}, {} samples\n{metrics}\nverdict: {}",
        cfg.mode,
        cfg.seed,
        log.rows.len(),
        if safe { "PASS" } else { "FAIL" }
    );
    write_report(out, &text)?;
    println!("{text}");
    Ok(safe)
}

/// Exit status 0 iff the nominal run leaves the safe set and the robust run does not.
fn compare(config: &Path, out: &Path, timing: bool) -> Result<bool> {
    let cfg = load(config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cmp = compare_nominal_robust(&cfg, &RunOptions { record_timing: timing })?;
    write_artifacts(&cmp.nominal, out)?;
    write_artifacts(&cmp.robust, out)?;
    let text = cmp.report.to_string();
    write_report(out, &text)?;
    println!("{text}");
    Ok(cmp.report.verdict())
}

fn validate(config: &Path) -> Result<bool> {
    let cfg = load(config)?;
    println!(
        "{}: valid ({} mode, {} s, seed {}, {} steps)",
        config.display(),
        cfg.mode,
        cfg.duration,
        cfg.seed,
        cfg.step_count()
    );
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, mode, seed, out, duration, timing } => run(config, *mode, *seed, out, *duration, *timing),
        Command::Compare { config, out, timing } => compare(config, out, *timing),
        Command::Validate { config } => validate(config),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
