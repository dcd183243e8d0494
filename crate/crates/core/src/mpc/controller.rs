//! One control step: margin adaptation, box update, transcription and the
//! SQP real-time iteration, with a zero-rate hold on failure.

use serde::{Deserialize, Serialize};

use super::ocp::{sqp_rti_step, transcribe, BarrierRow, OcpSolution};
use super::{MeasuredInput, OcpConfig, ReferenceTrajectory};
use crate::barrier::{adapt_delta, BarrierConfig, CraneBarrier, DeltaResult};
use crate::dynamics::{CraneModel, CraneState, VelocityCommand, NX};
use crate::error::{Error, Result};
use crate::integrator::FlowConfig;
use crate::safety::{FreeSpace, TargetSafetyParams};

/// `Nominal` enforces `h_t >= 0` at the next node; `Robust` enforces the
/// barrier condition with the adapted margin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyMode {
    Nominal,
    Robust,
}

impl std::fmt::Display for SafetyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SafetyMode::Nominal => "nominal",
            SafetyMode::Robust => "robust",
        })
    }
}

/// Everything the controller knows about the plant and the task.
#[derive(Clone, Debug)]
pub struct ControllerSetup {
    pub model: CraneModel,
    pub flow: FlowConfig,
    pub target: TargetSafetyParams,
    pub free_space: FreeSpace,
    pub reference: ReferenceTrajectory,
    pub ocp: OcpConfig,
    pub barrier: BarrierConfig,
    pub mode: SafetyMode,
}

impl ControllerSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.params.validate()?;
        self.flow.validate()?;
        self.target.validate()?;
        self.free_space.validate()?;
        self.reference.validate()?;
        self.ocp.validate(&self.flow)?;
        self.barrier.validate(NX, &self.flow)
    }

    fn barrier_system(&self) -> CraneBarrier {
        CraneBarrier { model: self.model.clone(), flow: self.flow, target: self.target.clone() }
    }
}

#[derive(Debug)]
pub struct ControlOutput {
    /// First input of the solution, clamped to the input bounds; zero after a failure.
    pub command: VelocityCommand,
    pub solution: OcpSolution,
    pub delta: DeltaResult,
    /// Why the step fell back to the hold command.
    pub failure: Option<Error>,
}

/// Computes the command at `t_k` from the measured state. `warm` must already
/// be aligned with `t_k` (see [`OcpSolution::shifted`]); its first input is
/// the input assumed by the margin adaptation. A failed warm-started
/// iteration is retried once from the hover guess.
pub fn control_step(
    setup: &ControllerSetup,
    t_k: f64,
    x_meas: &CraneState,
    measured: &MeasuredInput,
    warm: Option<&OcpSolution>,
) -> Result<ControlOutput> {
    if !x_meas.is_finite() {
        return Err(Error::NonFiniteState { t: t_k });
    }
    let u_prev = warm.and_then(|w| w.inputs.first().copied()).unwrap_or_default();
    let hold = |failure: Error, delta: DeltaResult| {
        let solution = warm.cloned().unwrap_or_else(|| hover_solution(setup, t_k, x_meas));
        ControlOutput { command: VelocityCommand::zero(), solution, delta, failure: Some(failure) }
    };

    let (delta, row) = match setup.mode {
        SafetyMode::Nominal => (DeltaResult::zero(), BarrierRow::nominal()),
        SafetyMode::Robust => match adapt_delta(&setup.barrier_system(), t_k, &x_meas.to_array(), &u_prev, &setup.barrier) {
            Ok(d) => (d, BarrierRow { delta: d.delta, alpha_gain: setup.barrier.alpha_gain }),
            Err(e) => return Ok(hold(e, DeltaResult::zero())),
        },
    };
    let safety_box = match setup.free_space.box_at(&setup.model.base_at(t_k)) {
        Ok(b) => b,
        Err(e) => return Ok(hold(e, delta)),
    };
    let tr = transcribe(setup, t_k, x_meas, measured, row, safety_box)?;
    let mut step = sqp_rti_step(&tr, &setup.ocp, warm);
    if step.failure.is_some() && warm.is_some() {
        step = sqp_rti_step(&tr, &setup.ocp, None);
    }
    if let Some(e) = step.failure {
        return Ok(hold(e, delta));
    }
    let command = VelocityCommand::from_array(setup.model.params.input_bounds.clamp(step.solution.inputs[0].to_array()));
    Ok(ControlOutput { command, solution: step.solution, delta, failure: None })
}

fn hover_solution(setup: &ControllerSetup, t_k: f64, x: &CraneState) -> OcpSolution {
    let n = setup.ocp.node_count;
    let u = VelocityCommand::from_array(setup.model.params.input_bounds.clamp([0.0; 3]));
    OcpSolution {
        t0: t_k,
        states: vec![*x; n + 1],
        inputs: vec![u; n],
        slacks: vec![Vec::new(); n + 1],
        kkt_residual: f64::NAN,
        cost: f64::NAN,
        qp_iterations: 0,
        step_norm: 0.0,
    }
}

/// Controller with its warm-start memory.
#[derive(Clone, Debug)]
pub struct MpcController {
    pub setup: ControllerSetup,
    warm: Option<OcpSolution>,
}

impl MpcController {
    pub fn new(setup: ControllerSetup) -> Result<Self> {
        setup.validate()?;
        Ok(Self { setup, warm: None })
    }

    /// Runs [`control_step`] with the previous solution shifted by one period.
    /// A failed step clears the warm start.
    pub fn step(&mut self, t_k: f64, x_meas: &CraneState, measured: &MeasuredInput) -> Result<ControlOutput> {
        let warm = self.warm.as_ref().map(|w| w.shifted(&self.setup.model, &self.setup.flow));
        let out = control_step(&self.setup, t_k, x_meas, measured, warm.as_ref())?;
        self.warm = if out.failure.is_none() { Some(out.solution.clone()) } else { None };
        Ok(out)
    }

    /// Solution of the last step, before shifting.
    pub fn last_solution(&self) -> Option<&OcpSolution> {
        self.warm.as_ref()
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }
}
