//! Multiple-shooting nonlinear MPC with a Gauss-Newton SQP real-time iteration.
//!
//! The objective is a sum of squares: each stage contributes
//! `T * stage_cost(t_k, x_k, u_k)` and the last node `terminal_cost(x_N)`.
//! Box, state-bound and barrier rows are soft with an L1 penalty; input
//! bounds are hard.

pub mod controller;
pub mod ocp;
pub mod qp;
pub mod reference;

use serde::{Deserialize, Serialize};

use crate::ad::Scalar;
use crate::dynamics::{payload_pos_vel_generic, BaseMotionSample, CraneModel, CraneParameters, CraneState, VelocityCommand, NQ, NU, NX};
use crate::error::{Error, Result};
use crate::integrator::FlowConfig;

pub use controller::{control_step, ControlOutput, ControllerSetup, MpcController, SafetyMode};
pub use ocp::{flow_jacobians, sqp_rti_step, transcribe, FlowJacobians, OcpSolution, RtiStep, Transcription};
pub use qp::{solve_qp, KktBackend, QpProblem, QpSettings, QpSolution, QpStatus};
pub use reference::{ReferenceFrame, ReferenceSample, ReferenceTrajectory, Waypoint};

/// Diagonals of the cost weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    /// Input effort.
    pub w1: [f64; 3],
    /// Command minus measured joint rates.
    pub w2: [f64; 3],
    /// Payload position tracking.
    pub w3: [f64; 3],
    /// Payload velocity tracking.
    pub w4: [f64; 3],
    /// Payload swing rates.
    pub w5: [f64; 2],
    /// Rope swing rates.
    pub w6: [f64; 2],
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { w1: [0.1; 3], w2: [0.05; 3], w3: [50.0; 3], w4: [5.0; 3], w5: [1.0; 2], w6: [1.0; 2] }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.w1.iter().chain(&self.w2).chain(&self.w3).chain(&self.w4).chain(&self.w5).chain(&self.w6);
        for w in all {
            if !(*w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!("cost weights must be finite and nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpConfig {
    /// Prediction horizon `T_f` (s).
    pub horizon: f64,
    /// Shooting intervals `N_T`.
    pub node_count: usize,
    pub weights: CostWeights,
    /// SQP iterations per control step.
    pub sqp_iters: usize,
    /// L1 penalty on soft-constraint slacks.
    pub slack_weight: f64,
    pub qp: QpSettings,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            node_count: 30,
            weights: CostWeights::default(),
            sqp_iters: 1,
            slack_weight: 1e4,
            qp: QpSettings::default(),
        }
    }
}

impl OcpConfig {
    /// Shooting interval `T_f / N_T`.
    pub fn period(&self) -> f64 {
        self.horizon / self.node_count as f64
    }

    /// Checks the config on its own and against the sampling period of `flow`.
    pub fn validate(&self, flow: &FlowConfig) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidConfig(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.node_count < 2 {
            return Err(Error::InvalidConfig(format!("node_count must be at least 2, got {}", self.node_count)));
        }
        if self.sqp_iters == 0 {
            return Err(Error::InvalidConfig("sqp_iters must be at least 1".into()));
        }
        if !(self.slack_weight > 0.0 && self.slack_weight.is_finite()) {
            return Err(Error::InvalidConfig(format!("slack_weight must be positive, got {}", self.slack_weight)));
        }
        if !(self.qp.tol > 0.0) || self.qp.max_iter == 0 {
            return Err(Error::InvalidConfig("QP tolerance and iteration limit must be positive".into()));
        }
        self.weights.validate()?;
        if (self.period() - flow.period).abs() > 1e-12 * flow.period {
            return Err(Error::InvalidConfig(format!(
                "horizon / node_count = {} differs from the sampling period {}",
                self.period(),
                flow.period
            )));
        }
        Ok(())
    }
}

/// Measured joint rates `u_m`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeasuredInput(pub [f64; NU]);

impl MeasuredInput {
    pub fn new(rates: [f64; NU]) -> Result<Self> {
        if !rates.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("measured joint rates must be finite".into()));
        }
        Ok(Self(rates))
    }

    /// Actuated joint rates of a state.
    pub fn from_state(x: &CraneState) -> Self {
        Self(x.actuated_rates())
    }
}

/// Number of least-squares residuals of a stage and of the terminal node.
pub const STAGE_RESIDUALS: usize = 16;
pub const TERMINAL_RESIDUALS: usize = 10;

/// Weighted residual vector whose squared norm is the stage cost (with an
/// input) or the terminal cost (without). `measured = None` takes the
/// measured rates from the actuated rates of `x`. `scale` multiplies every
/// entry.
#[allow(clippy::too_many_arguments)]
pub(crate) fn residuals_generic<S: Scalar>(
    x: &[S; NX],
    u: Option<&[S; NU]>,
    measured: Option<&[f64; NU]>,
    reference: &ReferenceSample,
    base: &BaseMotionSample,
    params: &CraneParameters,
    w: &CostWeights,
    scale: f64,
) -> Vec<S> {
    let mut r = Vec::with_capacity(STAGE_RESIDUALS);
    let sw = |v: f64| v.sqrt() * scale;
    if let Some(u) = u {
        for i in 0..NU {
            r.push(u[i] * sw(w.w1[i]));
        }
        for i in 0..NU {
            let um = match measured {
                Some(m) => S::cst(m[i]),
                None => x[NQ + i],
            };
            r.push((u[i] - um) * sw(w.w2[i]));
        }
    }
    let (p, v) = payload_pos_vel_generic(x, base, params);
    for i in 0..3 {
        r.push((p[i] - reference.position[i]) * sw(w.w3[i]));
    }
    for i in 0..3 {
        r.push((v[i] - reference.velocity[i]) * sw(w.w4[i]));
    }
    for i in 0..2 {
        r.push(x[NQ + 5 + i] * sw(w.w5[i]));
    }
    for i in 0..2 {
        r.push(x[NQ + 3 + i] * sw(w.w6[i]));
    }
    r
}

/// `|u|^2_W1 + |u - u_m|^2_W2 + |p_p - r_p|^2_W3 + |v_p - r_p'|^2_W4
/// + |payload swing rates|^2_W5 + |rope swing rates|^2_W6`.
pub fn stage_cost(
    model: &CraneModel,
    t: f64,
    x: &CraneState,
    u: &VelocityCommand,
    measured: &MeasuredInput,
    reference: &ReferenceTrajectory,
    weights: &CostWeights,
) -> f64 {
    let base = model.base_at(t);
    let rs = reference.sample(t, &base);
    residuals_generic(&x.to_array(), Some(&u.to_array()), Some(&measured.0), &rs, &base, &model.params, weights, 1.0)
        .iter()
        .map(|v| v * v)
        .sum()
}

/// Tracking, velocity-tracking and both swing-rate terms at the horizon end.
pub fn terminal_cost(
    model: &CraneModel,
    t_end: f64,
    x: &CraneState,
    reference: &ReferenceTrajectory,
    weights: &CostWeights,
) -> f64 {
    let base = model.base_at(t_end);
    let rs = reference.sample(t_end, &base);
    residuals_generic(&x.to_array(), None, None, &rs, &base, &model.params, weights, 1.0)
        .iter()
        .map(|v| v * v)
        .sum()
}
