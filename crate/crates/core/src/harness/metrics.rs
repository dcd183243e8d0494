//! Performance and safety summaries computed from a log alone.

use std::fmt;

use super::simulate::{run_scenario_with, LogRow, RunOptions, SimulationLog};
use super::{MetricThresholds, ScenarioConfig};
use crate::dynamics::NQ;
use crate::error::{Error, Result};
use crate::mpc::SafetyMode;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub min_h_t: f64,
    /// Minimum over `h_t` and the six box functions.
    pub min_composite: f64,
    /// Time spent with `h_t < 0` (s).
    pub violation_duration: f64,
    /// Root mean square of `|p_p - r_p|` (m).
    pub tracking_rms: f64,
    pub final_position_error: f64,
    /// Finite-difference payload velocity error at the last sample (m/s).
    pub final_velocity_error: f64,
    /// Largest squared rope and payload swing-rate norms over the run.
    pub max_rope_swing: f64,
    pub max_payload_swing: f64,
    /// Earliest time after which position error and both swing-rate norms
    /// stay within their thresholds.
    pub settling_time: Option<f64>,
    /// Ended on the reference without ever violating `h_t >= 0`.
    pub insertion_success: bool,
    /// Steps that fell back to the hold command.
    pub fallback_steps: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn squared(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn tracking_error(r: &LogRow) -> [f64; 3] {
    std::array::from_fn(|i| r.payload[i] - r.reference[i])
}

/// Central difference of the tracking error, one-sided at the ends.
fn velocity_error(rows: &[LogRow], k: usize) -> f64 {
    if rows.len() < 2 {
        return 0.0;
    }
    let (a, b) = (k.saturating_sub(1), (k + 1).min(rows.len() - 1));
    let (ea, eb) = (tracking_error(&rows[a]), tracking_error(&rows[b]));
    let dt = rows[b].t - rows[a].t;
    norm(&std::array::from_fn::<f64, 3, _>(|i| (eb[i] - ea[i]) / dt))
}

pub fn compute_metrics(rows: &[LogRow], period: f64, th: &MetricThresholds) -> Result<Metrics> {
    let last = rows.last().ok_or(Error::EmptyLog)?;
    let rope = |r: &LogRow| squared(&r.state[NQ + 3..NQ + 5]);
    let payload = |r: &LogRow| squared(&r.state[NQ + 5..NQ + 7]);
    let settled = |r: &LogRow| norm(&tracking_error(r)) <= th.position && rope(r) <= th.rope_swing && payload(r) <= th.payload_swing;

    let min_h_t = rows.iter().map(|r| r.h_t).fold(f64::INFINITY, f64::min);
    let min_composite = rows.iter().flat_map(|r| r.boxes.iter().copied().chain([r.h_t])).fold(f64::INFINITY, f64::min);
    let violations = rows.iter().filter(|r| r.h_t < 0.0).count();
    let mean_sq = rows.iter().map(|r| squared(&tracking_error(r))).sum::<f64>() / rows.len() as f64;
    let unsettled_tail = rows.iter().rposition(|r| !settled(r));
    let settling_time = match unsettled_tail {
        None => Some(rows[0].t),
        Some(i) if i + 1 < rows.len() => Some(rows[i + 1].t),
        Some(_) => None,
    };
    let final_position_error = norm(&tracking_error(last));
    Ok(Metrics {
        min_h_t,
        min_composite,
        violation_duration: violations as f64 * period,
        tracking_rms: mean_sq.sqrt(),
        final_position_error,
        final_velocity_error: velocity_error(rows, rows.len() - 1),
        max_rope_swing: rows.iter().map(rope).fold(0.0, f64::max),
        max_payload_swing: rows.iter().map(payload).fold(0.0, f64::max),
        settling_time,
        insertion_success: final_position_error <= th.position && min_h_t >= 0.0,
        fallback_steps: rows.iter().filter(|r| r.fell_back()).count(),
    })
}

/// Side-by-side metrics of the two safety modes.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub nominal: Metrics,
    pub robust: Metrics,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: [(&str, f64); 9] = [
            ("min h_t (m)", self.min_h_t),
            ("min composite (m)", self.min_composite),
            ("violation duration (s)", self.violation_duration),
            ("tracking rms (m)", self.tracking_rms),
            ("final position err (m)", self.final_position_error),
            ("final velocity err (m/s)", self.final_velocity_error),
            ("max rope swing (rad2/s2)", self.max_rope_swing),
            ("max payload swing", self.max_payload_swing),
            ("fallback steps", self.fallback_steps as f64),
        ];
        for (name, v) in rows {
            writeln!(f, "{name:<26}{v:>16.6}")?;
        }
        let settle = self.settling_time.map_or("never".to_string(), |t| format!("{t:.3}"));
        writeln!(f, "{:<26}{settle:>16}", "settling time (s)")?;
        write!(f, "{:<26}{:>16}", "insertion success", self.insertion_success)
    }
}

impl CompareReport {
    /// The nominal controller leaves the safe set and the robust one does not.
    pub fn verdict(&self) -> bool {
        self.nominal.min_h_t < 0.0 && self.robust.min_h_t >= 0.0
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (n, r) = (&self.nominal, &self.robust);
        let settle = |m: &Metrics| m.settling_time.map_or("never".to_string(), |t| format!("{t:.3}"));
        writeln!(f, "{:<26}{:>16}{:>16}", "metric", "nominal", "robust")?;
        let rows: [(&str, f64, f64); 9] = [
            ("min h_t (m)", n.min_h_t, r.min_h_t),
            ("min composite (m)", n.min_composite, r.min_composite),
            ("violation duration (s)", n.violation_duration, r.violation_duration),
            ("tracking rms (m)", n.tracking_rms, r.tracking_rms),
            ("final position err (m)", n.final_position_error, r.final_position_error),
            ("final velocity err (m/s)", n.final_velocity_error, r.final_velocity_error),
            ("max rope swing (rad2/s2)", n.max_rope_swing, r.max_rope_swing),
            ("max payload swing", n.max_payload_swing, r.max_payload_swing),
            ("fallback steps", n.fallback_steps as f64, r.fallback_steps as f64),
        ];
        for (name, a, b) in rows {
            writeln!(f, "{name:<26}{a:>16.6}{b:>16.6}")?;
        }
        writeln!(f, "{:<26}{:>16}{:>16}", "settling time (s)", settle(n), settle(r))?;
        writeln!(f, "{:<26}{:>16}{:>16}", "insertion success", n.insertion_success, r.insertion_success)?;
        write!(
            f,
            "verdict: {} (nominal min h_t {} 0, robust min h_t {} 0)",
            if self.verdict() { "PASS" } else { "FAIL" },
            if n.min_h_t < 0.0 { "<" } else { ">=" },
            if r.min_h_t >= 0.0 { ">=" } else { "<" },
        )
    }
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub nominal: SimulationLog,
    pub robust: SimulationLog,
    pub report: CompareReport,
}

/// Runs the scenario in both modes with the same seed.
pub fn compare_nominal_robust(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<Comparison> {
    let with_mode = |mode| ScenarioConfig { mode, ..cfg.clone() };
    let (nominal, robust) = rayon::join(
        || run_scenario_with(&with_mode(SafetyMode::Nominal), opts),
        || run_scenario_with(&with_mode(SafetyMode::Robust), opts),
    );
    let (nominal, robust) = (nominal?, robust?);
    let report = CompareReport {
        nominal: compute_metrics(&nominal.rows, nominal.period, &cfg.thresholds)?,
        robust: compute_metrics(&robust.rows, robust.period, &cfg.thresholds)?,
    };
    Ok(Comparison { nominal, robust, report })
}
