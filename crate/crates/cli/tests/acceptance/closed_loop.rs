use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use cranesafe::barrier::{class_k, rzocbf_margin, theta_gap, CraneBarrier};
use cranesafe::dynamics::{CraneModel, UncertaintyRealization, VelocityCommand};
use cranesafe::harness::{compute_metrics, run_scenario, BaseMotionProfile, ScenarioConfig, SAFETY_TOLERANCE};
use cranesafe::mpc::{ReferenceFrame, ReferenceTrajectory, SafetyMode, Waypoint};

use crate::{ensure, Outcome};

fn default_scenario() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/default.toml")
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cranesafe-acceptance-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn cranesafe(args: &[&str]) -> Result<(i32, String), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cranesafe")).args(args).output().map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    match out.status.code() {
        Some(2) | None => Err(format!("cranesafe {args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim())),
        Some(c) => Ok((c, stdout)),
    }
}

/// The nominal and robust columns of one row of the compare table.
fn report_row(report: &str, name: &str) -> Option<(f64, f64)> {
    let line = report.lines().find(|l| l.starts_with(name))?;
    let mut cols = line[name.len()..].split_whitespace().map(str::parse::<f64>);
    Some((cols.next()?.ok()?, cols.next()?.ok()?))
}

pub fn sign_separation() -> Outcome {
    let out = scratch_dir("compare");
    let config = default_scenario();
    let clock = std::time::Instant::now();
    let (code, report) = cranesafe(&["compare", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
    let wall = clock.elapsed().as_secs_f64();
    let (nominal, robust) = report_row(&report, "min h_t (m)").ok_or("no min h_t row in the report")?;
    let _ = fs::remove_dir_all(&out);
    let summary = format!("nominal min h_t {nominal:.4}, robust min h_t {robust:.4}, wall {wall:.1} s");
    ensure!(nominal < 0.0 && robust >= 0.0, "{summary}");
    ensure!(code == 0, "{summary}, but compare exited with {code}");
    Ok(summary)
}

/// Payload starts 0.2 m above the mouth and is commanded 0.1 m into the target.
fn invariance_scenario(seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig { seed, mode: SafetyMode::Robust, duration: 3.0, ..Default::default() };
    cfg.uncertainty.noise_fraction = 0.0;
    cfg.reference = ReferenceTrajectory {
        frame: ReferenceFrame::Platform,
        waypoints: vec![
            Waypoint { t: 0.0, position: [2.29, 0.0, 0.2] },
            Waypoint { t: 0.5, position: [2.29, 0.0, 0.2] },
            Waypoint { t: 2.0, position: [2.29, 0.0, -0.1] },
        ],
    };
    cfg
}

pub fn invariance_suite() -> Outcome {
    let (mut min_h, mut premise_steps, mut total_steps) = (f64::INFINITY, 0, 0);
    // (seed, t, chain margin, barrier-row margin of the applied input)
    let mut violations: Vec<(u64, f64, f64, f64)> = Vec::new();
    for seed in 1..=50 {
        let cfg = invariance_scenario(seed);
        let log = run_scenario(&cfg).map_err(|e| format!("seed {seed}: {e}"))?;
        let h0 = log.rows[0].h_t;
        ensure!(h0 >= 0.0 && log.rows[0].boxes.iter().all(|h| *h >= 0.0), "seed {seed}: x0 outside the safe set");

        let model = CraneModel::new(cfg.crane.clone(), Arc::new(cfg.base_profile.clone()));
        let sys = CraneBarrier { model, flow: cfg.model_flow().map_err(|e| e.to_string())?, target: cfg.target.clone() };
        let u = &cfg.uncertainty;
        let [lo, hi] = u.model_error_band;
        let realization = UncertaintyRealization::sinusoidal(u.model_error, u.model_error_terms, lo, hi, seed);
        for (k, row) in log.rows.iter().enumerate() {
            min_h = min_h.min(row.h_t);
            ensure!(row.h_t >= -SAFETY_TOLERANCE, "seed {seed}: h_t {:.3e} at t = {:.3}", row.h_t, row.t);
            let Some(next) = log.rows.get(k + 1) else { continue };
            total_steps += 1;
            let input = VelocityCommand::from_array(row.input);
            let theta =
                theta_gap(&sys, row.t, &row.state, &input, &realization, &cfg.barrier).map_err(|e| e.to_string())?;
            if row.delta < theta {
                continue;
            }
            premise_steps += 1;
            let chain = next.h_t - row.h_t + class_k(row.h_t, cfg.barrier.alpha_gain);
            if chain < 0.0 {
                let margin = rzocbf_margin(&sys, row.t, &row.state, &input, row.delta, &cfg.barrier)
                    .map_err(|e| e.to_string())?;
                violations.push((seed, row.t, chain, margin));
            }
        }
    }
    let summary = format!("min h_t {min_h:.4}, chain checked on {premise_steps}/{total_steps} steps");
    if let Some(&(seed, t, chain, margin)) = violations.first() {
        let infeasible = violations.iter().filter(|v| v.3 < 0.0).count();
        return Err(format!(
            "{summary}; {} chain violations ({infeasible} where the applied input breaks the soft barrier row), \
             first at seed {seed}, t = {t:.3}: chain {chain:.3e}, row margin {margin:.3e}",
            violations.len()
        ));
    }
    Ok(summary)
}

/// Static base, no uncertainty: move 0.3 m sideways and 0.2 m down over 1 s, then hold.
fn regulation_scenario() -> ScenarioConfig {
    let mut cfg =
        ScenarioConfig { base_profile: BaseMotionProfile::still(), duration: 20.0, ..Default::default() }.without_uncertainty();
    cfg.reference = ReferenceTrajectory {
        frame: ReferenceFrame::Platform,
        waypoints: vec![
            Waypoint { t: 0.0, position: [2.29, 0.0, 0.5] },
            Waypoint { t: 1.0, position: [2.0, 0.3, 0.3] },
        ],
    };
    cfg
}

pub fn regulation() -> Outcome {
    let cfg = regulation_scenario();
    let log = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let m = compute_metrics(&log.rows, log.period, &cfg.thresholds).map_err(|e| e.to_string())?;
    let settle = m.settling_time.ok_or("never settled")?;
    let summary = format!(
        "settled at {settle:.2} s, final error {:.1e} m, max rope swing {:.3}",
        m.final_position_error, m.max_rope_swing
    );
    ensure!(settle <= 15.0, "{summary}");
    Ok(summary)
}

pub fn determinism() -> Outcome {
    let config = default_scenario();
    let mut logs = Vec::new();
    for name in ["first", "second"] {
        let out = scratch_dir(name);
        cranesafe(&["run", "--config", config.to_str().unwrap(), "--duration", "3", "--out", out.to_str().unwrap()])?;
        logs.push(fs::read(out.join("log_robust.csv")).map_err(|e| e.to_string())?);
        let _ = fs::remove_dir_all(&out);
    }
    ensure!(logs[0] == logs[1], "logs differ");
    Ok(format!("two 3 s runs, {} identical bytes", logs[0].len()))
}
