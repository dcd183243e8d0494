//! Closed-loop simulation of the truth plant, the noisy estimator and the
//! controller.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ScenarioConfig;
use crate::barrier::BarrierConfig;
use crate::dynamics::{hanging_state, CraneModel, CraneState, UncertaintyRealization, NU, NX};
use crate::error::{Error, Result};
use crate::integrator::{perturbed_flow, step};
use crate::mpc::{ControllerSetup, MeasuredInput, MpcController, ReferenceFrame, SafetyMode};
use crate::safety::{box_safety, target_safety};

/// Consecutive solver fallbacks after which a run is abandoned.
const MAX_CONSECUTIVE_FAILURES: usize = 15;
/// Offset separating the measurement-noise stream from the model-error stream.
const NOISE_STREAM: u64 = 0x006e_6f69_7365;

/// One sample instant. Positions are inertial; `state` is the true state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub state: [f64; NX],
    /// Command applied over the following period.
    pub input: [f64; NU],
    pub measured_input: [f64; NU],
    pub payload: [f64; 3],
    pub reference: [f64; 3],
    pub h_t: f64,
    pub boxes: [f64; 6],
    pub delta: f64,
    /// KKT residual of the solve; negative when the step fell back to the hold command.
    pub kkt: f64,
    pub qp_iters: usize,
    /// Wall time of the control step (ms); zero unless timing is recorded.
    pub solve_ms: f64,
}

impl LogRow {
    pub fn is_finite(&self) -> bool {
        let scalars = [self.t, self.h_t, self.delta, self.kkt, self.solve_ms];
        self.state
            .iter()
            .chain(&self.input)
            .chain(&self.measured_input)
            .chain(&self.payload)
            .chain(&self.reference)
            .chain(&self.boxes)
            .chain(&scalars)
            .all(|v| v.is_finite())
    }

    pub fn fell_back(&self) -> bool {
        self.kkt < 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationLog {
    pub mode: SafetyMode,
    pub seed: u64,
    pub period: f64,
    pub rows: Vec<LogRow>,
    /// State handed to the controller at each row.
    pub measured: Vec<[f64; NX]>,
}

impl SimulationLog {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Log the wall time of each control step. Timed logs are not reproducible.
    pub record_timing: bool,
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimulationLog> {
    run_scenario_with(cfg, &RunOptions::default())
}

/// Controller configuration derived from a scenario.
pub(crate) fn controller_setup(cfg: &ScenarioConfig, model: &CraneModel) -> Result<ControllerSetup> {
    Ok(ControllerSetup {
        model: model.clone(),
        flow: cfg.model_flow()?,
        target: cfg.target.clone(),
        free_space: cfg.free_space(),
        reference: cfg.reference.clone(),
        ocp: cfg.ocp.clone(),
        barrier: cfg.barrier.clone(),
        mode: cfg.mode,
    })
}

/// At rest, hanging straight down at the start of the reference.
pub(crate) fn initial_state(cfg: &ScenarioConfig, model: &CraneModel) -> Result<CraneState> {
    let (start, _) = cfg.reference.local(0.0);
    let local = match cfg.reference.frame {
        ReferenceFrame::Platform => start,
        ReferenceFrame::Inertial => {
            let base = model.base_at(0.0);
            let r = base.rotation();
            let d: [f64; 3] = std::array::from_fn(|i| start[i] - base.translation[i]);
            std::array::from_fn(|j| (0..3).map(|i| r[i][j] * d[i]).sum())
        }
    };
    hanging_state(local, &cfg.crane)
}

fn measurement_noise(barrier: &BarrierConfig, fraction: f64, rng: &mut ChaCha8Rng) -> [f64; NX] {
    std::array::from_fn(|i| fraction * barrier.ball_radii[i] * rng.random_range(-1.0..=1.0))
}

/// Simulates the closed loop for `cfg.duration`, logging every sample
/// instant including the last.
pub fn run_scenario_with(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<SimulationLog> {
    cfg.validate()?;
    let model = CraneModel::new(cfg.crane.clone(), Arc::new(cfg.base_profile.clone()));
    let truth = cfg.truth_flow()?;
    let period = cfg.period();
    let free_space = cfg.free_space();
    let u = &cfg.uncertainty;
    let model_error = if u.model_error.iter().all(|a| *a == 0.0) {
        UncertaintyRealization::zero()
    } else {
        let [lo, hi] = u.model_error_band;
        UncertaintyRealization::sinusoidal(u.model_error, u.model_error_terms, lo, hi, cfg.seed)
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let mut controller = MpcController::new(controller_setup(cfg, &model)?)?;

    let steps = cfg.step_count();
    let mut x = initial_state(cfg, &model)?;
    let mut log = SimulationLog {
        mode: cfg.mode,
        seed: cfg.seed,
        period,
        rows: Vec::with_capacity(steps + 1),
        measured: Vec::with_capacity(steps + 1),
    };
    let mut failures = 0;
    for k in 0..=steps {
        let t = k as f64 * period;
        let noise = measurement_noise(&cfg.barrier, u.noise_fraction, &mut noise_rng);
        let x_arr = x.to_array();
        let x_meas = CraneState::from_array(std::array::from_fn(|i| x_arr[i] + noise[i]));
        let measured_input = MeasuredInput::from_state(&x);

        let clock = Instant::now();
        let out = controller.step(t, &x_meas, &measured_input)?;
        let solve_ms = if opts.record_timing { clock.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        failures = if out.failure.is_some() { failures + 1 } else { 0 };
        if failures >= MAX_CONSECUTIVE_FAILURES {
            let reason = out.failure.map(|e| e.to_string()).unwrap_or_default();
            return Err(Error::SimulationAborted { t, reason: format!("{failures} consecutive solver failures, last: {reason}") });
        }

        let base = model.base_at(t);
        let safety_box = free_space.box_at(&base)?;
        let row = LogRow {
            t,
            state: x_arr,
            input: out.command.to_array(),
            measured_input: measured_input.0,
            payload: model.payload_pose(t, &x.q),
            reference: cfg.reference.sample(t, &base).position,
            h_t: target_safety(t, &x, &cfg.target, &model, [0.0; 3]),
            boxes: box_safety(t, &x, &safety_box, &model),
            delta: out.delta.delta,
            kkt: if out.failure.is_some() { -1.0 } else { out.solution.kkt_residual },
            qp_iters: if out.failure.is_some() { 0 } else { out.solution.qp_iterations },
            solve_ms,
        };
        if !row.is_finite() {
            return Err(Error::SimulationAborted { t, reason: "non-finite log entry".into() });
        }
        log.rows.push(row);
        log.measured.push(x_meas.to_array());

        if k < steps {
            x = if model_error.is_zero() {
                step(&model, &truth, t, &x, &out.command)?
            } else {
                perturbed_flow(&model, &truth, t, &x, &out.command, &model_error, period)?
            };
            if !x.is_finite() {
                return Err(Error::SimulationAborted { t: t + period, reason: "non-finite plant state".into() });
            }
        }
    }
    Ok(log)
}
