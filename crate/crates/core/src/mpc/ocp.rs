//! Multiple-shooting transcription, its Gauss-Newton linearization and the
//! SQP real-time iteration.
//!
//! Node `k` sits at `t_0 + k T`. Stage `k < N` carries `(x_k, u_k)`, the
//! terminal node carries `x_N` only. Rows per node, in order:
//! input bounds (hard, stages `k < N`), the barrier row on `h_t(F(x_k, u_k))`
//! (stages `k < N`), the six box rows and the finite state bounds (nodes
//! `k >= 1`). Every row is written `c(x, u) >= 0`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::controller::ControllerSetup;
use super::qp::{solve_qp, InequalityRow, QpProblem, QpStage, QpStatus, StageDynamics};
use super::{residuals_generic, CostWeights, MeasuredInput, OcpConfig, ReferenceSample};
use crate::ad::Dual;
use crate::barrier::class_k;
use crate::dynamics::{payload_bottom_generic, CraneModel, CraneState, VelocityCommand, NQ, NU, NX};
use crate::error::{Error, Result};
use crate::integrator::{nominal_flow_generic, step, FlowConfig};
use crate::safety::{target_safety, target_safety_gradient, SafetyBox, TargetSafetyParams};

const NZ: usize = NX + NU;

/// `F(t, x, u)` with its Jacobians `A = dF/dx`, `B = dF/du`.
#[derive(Clone, Debug)]
pub struct FlowJacobians {
    pub next: CraneState,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Forward-mode Jacobians of the discrete map through the RK4 substeps.
pub fn flow_jacobians(
    model: &CraneModel,
    flow: &FlowConfig,
    t: f64,
    x: &CraneState,
    u: &VelocityCommand,
) -> Result<FlowJacobians> {
    let (xa, ua) = (x.to_array(), u.to_array());
    let xd: [Dual<f64, NZ>; NX] = std::array::from_fn(|i| Dual::variable(xa[i], i));
    let ud: [Dual<f64, NZ>; NU] = std::array::from_fn(|i| Dual::variable(ua[i], NX + i));
    let traj = nominal_flow_generic(model, flow, t, xd, ud, flow.substeps)?;
    let end = &traj[flow.substeps];
    let a = DMatrix::from_fn(NX, NX, |r, c| end[r].eps[c]);
    let b = DMatrix::from_fn(NX, NU, |r, c| end[r].eps[NX + c]);
    if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFiniteJacobian { node: 0 });
    }
    Ok(FlowJacobians { next: CraneState::from_array(end.map(|d| d.re)), a, b })
}

/// What a constraint row bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    InputLower(usize),
    InputUpper(usize),
    /// `h_t(t_{k+1}, F) - h_t(t_k, x_k) - delta_t + alpha(h_t(t_k, x_k))`.
    Barrier,
    /// `h1..h6` of the payload bottom.
    Box(usize),
    StateLower(usize),
    StateUpper(usize),
}

impl RowKind {
    pub fn is_soft(&self) -> bool {
        !matches!(self, RowKind::InputLower(_) | RowKind::InputUpper(_))
    }
}

/// `value + gx dx + gu du >= 0` around the linearization point.
#[derive(Clone, Debug)]
pub struct ConstraintRow {
    pub kind: RowKind,
    pub value: f64,
    pub gx: DVector<f64>,
    pub gu: DVector<f64>,
}

/// Margin and class-K slope of the barrier rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarrierRow {
    pub delta: f64,
    pub alpha_gain: f64,
}

impl BarrierRow {
    /// `delta = 0`, `alpha(r) = r`: the row becomes `h_t(F) >= 0`.
    pub fn nominal() -> Self {
        Self { delta: 0.0, alpha_gain: 1.0 }
    }
}

/// Node data of one control step.
#[derive(Clone, Debug)]
pub struct Transcription {
    pub model: CraneModel,
    pub flow: FlowConfig,
    pub t0: f64,
    pub x0: CraneState,
    pub node_count: usize,
    /// `r_p, r_p'` at every node.
    pub references: Vec<ReferenceSample>,
    pub measured: MeasuredInput,
    pub barrier: BarrierRow,
    pub safety_box: SafetyBox,
    pub target: TargetSafetyParams,
    pub weights: CostWeights,
    pub slack_weight: f64,
}

/// Trajectory returned by the SQP step.
#[derive(Clone, Debug, PartialEq)]
pub struct OcpSolution {
    pub t0: f64,
    /// `x_0 .. x_N`.
    pub states: Vec<CraneState>,
    /// `u_0 .. u_{N-1}`, inside the input bounds.
    pub inputs: Vec<VelocityCommand>,
    /// Violation of each soft row, per node.
    pub slacks: Vec<Vec<f64>>,
    /// Largest KKT residual of the last QP.
    pub kkt_residual: f64,
    /// Objective including the slack penalty.
    pub cost: f64,
    pub qp_iterations: usize,
    /// Infinity norm of the last primal step.
    pub step_norm: f64,
}

impl OcpSolution {
    /// Drops the first node and appends `F(x_N, u_{N-1})` with `u_{N-1}` repeated.
    pub fn shifted(&self, model: &CraneModel, flow: &FlowConfig) -> OcpSolution {
        let n = self.inputs.len();
        let t_end = self.t0 + n as f64 * flow.period;
        let (x_last, u_last) = (self.states[n], self.inputs[n - 1]);
        let appended = step(model, flow, t_end, &x_last, &u_last).unwrap_or(x_last);
        let mut states = self.states[1..].to_vec();
        states.push(appended);
        let mut inputs = self.inputs[1..].to_vec();
        inputs.push(u_last);
        OcpSolution { t0: self.t0 + flow.period, states, inputs, ..self.clone() }
    }
}

/// Result of [`sqp_rti_step`]. On failure `solution` is the warm start it was
/// given (or the hover guess) and `failure` holds the reason.
#[derive(Debug)]
pub struct RtiStep {
    pub solution: OcpSolution,
    pub failure: Option<Error>,
}

/// Builds the node data for one control step.
pub fn transcribe(
    setup: &ControllerSetup,
    t0: f64,
    x0: &CraneState,
    measured: &MeasuredInput,
    barrier: BarrierRow,
    safety_box: SafetyBox,
) -> Result<Transcription> {
    if !x0.is_finite() {
        return Err(Error::NonFiniteState { t: t0 });
    }
    setup.ocp.validate(&setup.flow)?;
    if !(barrier.delta >= 0.0 && barrier.delta.is_finite()) {
        return Err(Error::InvalidConfig(format!("delta_t must be finite and nonnegative, got {}", barrier.delta)));
    }
    if !(barrier.alpha_gain > 0.0 && barrier.alpha_gain <= 1.0) {
        return Err(Error::InvalidConfig(format!("alpha gain must lie in (0, 1], got {}", barrier.alpha_gain)));
    }
    safety_box.validate()?;
    let n = setup.ocp.node_count;
    let period = setup.flow.period;
    let references = (0..=n)
        .map(|k| {
            let t = t0 + k as f64 * period;
            setup.reference.sample(t, &setup.model.base_at(t))
        })
        .collect();
    Ok(Transcription {
        model: setup.model.clone(),
        flow: setup.flow,
        t0,
        x0: *x0,
        node_count: n,
        references,
        measured: *measured,
        barrier,
        safety_box,
        target: setup.target.clone(),
        weights: setup.ocp.weights.clone(),
        slack_weight: setup.ocp.slack_weight,
    })
}

/// Next state of a stage for the barrier row, with its Jacobians when linearizing.
struct NextState<'a> {
    state: CraneState,
    jac: Option<(&'a DMatrix<f64>, &'a DMatrix<f64>)>,
}

impl Transcription {
    pub fn node_time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.flow.period
    }

    /// Least-squares residuals of node `k`; their squared norm is the node's
    /// share of the objective (stage costs carry the factor `T`).
    pub fn residuals(&self, k: usize, x: &CraneState, u: Option<&VelocityCommand>) -> Vec<f64> {
        let base = self.model.base_at(self.node_time(k));
        let measured = (k == 0).then_some(&self.measured.0);
        let ua = u.map(|u| u.to_array());
        residuals_generic(
            &x.to_array(),
            ua.as_ref(),
            measured,
            &self.references[k],
            &base,
            &self.model.params,
            &self.weights,
            self.residual_scale(k),
        )
    }

    /// Residuals and their Jacobian with respect to `(x, u)`; the Jacobian has
    /// `NX + NU` columns on stages and `NX` on the terminal node.
    pub fn residual_jacobian(&self, k: usize, x: &CraneState, u: Option<&VelocityCommand>) -> (Vec<f64>, DMatrix<f64>) {
        let base = self.model.base_at(self.node_time(k));
        let measured = (k == 0).then_some(&self.measured.0);
        let xa = x.to_array();
        let xd: [Dual<f64, NZ>; NX] = std::array::from_fn(|i| Dual::variable(xa[i], i));
        let ud: Option<[Dual<f64, NZ>; NU]> = u.map(|u| {
            let ua = u.to_array();
            std::array::from_fn(|i| Dual::variable(ua[i], NX + i))
        });
        let r = residuals_generic(
            &xd,
            ud.as_ref(),
            measured,
            &self.references[k],
            &base,
            &self.model.params,
            &self.weights,
            self.residual_scale(k),
        );
        let cols = if u.is_some() { NZ } else { NX };
        let jac = DMatrix::from_fn(r.len(), cols, |i, j| r[i].eps[j]);
        (r.iter().map(|d| d.re).collect(), jac)
    }

    fn residual_scale(&self, k: usize) -> f64 {
        if k < self.node_count {
            self.flow.period.sqrt()
        } else {
            1.0
        }
    }

    /// Rows of node `k` linearized at `(x, u)`.
    pub fn constraint_rows(&self, k: usize, x: &CraneState, u: Option<&VelocityCommand>) -> Result<Vec<ConstraintRow>> {
        self.check_node(k, u.is_some())?;
        match u {
            Some(u) => {
                let fj = flow_jacobians(&self.model, &self.flow, self.node_time(k), x, u)
                    .map_err(|e| renumber(e, k))?;
                Ok(self.rows(k, x, Some(u), Some(NextState { state: fj.next, jac: Some((&fj.a, &fj.b)) })))
            }
            None => Ok(self.rows(k, x, None, None)),
        }
    }

    fn check_node(&self, k: usize, has_input: bool) -> Result<()> {
        if k > self.node_count || has_input != (k < self.node_count) {
            return Err(Error::Dimension(format!("node {k} of {} with input {has_input}", self.node_count)));
        }
        Ok(())
    }

    fn rows(&self, k: usize, x: &CraneState, u: Option<&VelocityCommand>, next: Option<NextState<'_>>) -> Vec<ConstraintRow> {
        let nu = if u.is_some() { NU } else { 0 };
        let params = &self.model.params;
        let mut rows = Vec::new();
        let unit = |n: usize, i: usize, s: f64| {
            let mut v = DVector::zeros(n);
            v[i] = s;
            v
        };
        if let Some(u) = u {
            let ua = u.to_array();
            let (lo, hi) = (params.input_bounds.lower, params.input_bounds.upper);
            for i in 0..NU {
                if lo[i].is_finite() {
                    rows.push(ConstraintRow { kind: RowKind::InputLower(i), value: ua[i] - lo[i], gx: DVector::zeros(NX), gu: unit(NU, i, 1.0) });
                }
                if hi[i].is_finite() {
                    rows.push(ConstraintRow { kind: RowKind::InputUpper(i), value: hi[i] - ua[i], gx: DVector::zeros(NX), gu: unit(NU, i, -1.0) });
                }
            }
        }
        if let Some(next) = next {
            let (t_now, t_next) = (self.node_time(k), self.node_time(k + 1));
            let h_now = target_safety(t_now, x, &self.target, &self.model, [0.0; 3]);
            let h_next = target_safety(t_next, &next.state, &self.target, &self.model, [0.0; 3]);
            let value = h_next - h_now - self.barrier.delta + class_k(h_now, self.barrier.alpha_gain);
            let (gx, gu) = match next.jac {
                Some((a, b)) => {
                    let g_next = DVector::from_row_slice(&target_safety_gradient(t_next, &next.state, &self.target, &self.model, [0.0; 3]));
                    let g_now = DVector::from_row_slice(&target_safety_gradient(t_now, x, &self.target, &self.model, [0.0; 3]));
                    (a.tr_mul(&g_next) - g_now * (1.0 - self.barrier.alpha_gain), b.tr_mul(&g_next))
                }
                None => (DVector::zeros(NX), DVector::zeros(nu)),
            };
            rows.push(ConstraintRow { kind: RowKind::Barrier, value, gx, gu });
        }
        if k >= 1 {
            let base = self.model.base_at(self.node_time(k));
            let qa = x.q.to_array();
            let q: [Dual<f64, NQ>; NQ] = std::array::from_fn(|i| Dual::variable(qa[i], i));
            let p = payload_bottom_generic(&q, &base, params);
            for (i, h) in self.safety_box.evaluate(&p).iter().enumerate() {
                let mut gx = DVector::zeros(NX);
                gx.rows_mut(0, NQ).copy_from_slice(&h.eps);
                rows.push(ConstraintRow { kind: RowKind::Box(i), value: h.re, gx, gu: DVector::zeros(nu) });
            }
            let xa = x.to_array();
            let (lo, hi) = (params.state_bounds.lower, params.state_bounds.upper);
            for i in 0..NX {
                if lo[i].is_finite() {
                    rows.push(ConstraintRow { kind: RowKind::StateLower(i), value: xa[i] - lo[i], gx: unit(NX, i, 1.0), gu: DVector::zeros(nu) });
                }
                if hi[i].is_finite() {
                    rows.push(ConstraintRow { kind: RowKind::StateUpper(i), value: hi[i] - xa[i], gx: unit(NX, i, -1.0), gu: DVector::zeros(nu) });
                }
            }
        }
        rows
    }

    /// `(kind, value)` of every row at every node.
    pub fn constraint_values(&self, states: &[CraneState], inputs: &[VelocityCommand]) -> Result<Vec<Vec<(RowKind, f64)>>> {
        self.check_trajectory(states, inputs)?;
        (0..=self.node_count)
            .into_par_iter()
            .map(|k| {
                let u = inputs.get(k);
                let next = match u {
                    Some(u) => Some(NextState { state: step(&self.model, &self.flow, self.node_time(k), &states[k], u)?, jac: None }),
                    None => None,
                };
                Ok(self.rows(k, &states[k], u, next).into_iter().map(|r| (r.kind, r.value)).collect())
            })
            .collect()
    }

    /// Violation `max(0, -c)` of each soft row, per node.
    pub fn soft_violations(&self, states: &[CraneState], inputs: &[VelocityCommand]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .constraint_values(states, inputs)?
            .into_iter()
            .map(|node| node.into_iter().filter(|(kind, _)| kind.is_soft()).map(|(_, v)| (-v).max(0.0)).collect())
            .collect())
    }

    /// Least-squares objective plus the L1 penalty on soft-row violations.
    pub fn objective(&self, states: &[CraneState], inputs: &[VelocityCommand]) -> Result<f64> {
        let slacks = self.soft_violations(states, inputs)?;
        Ok(self.objective_with_slacks(states, inputs, &slacks))
    }

    fn objective_with_slacks(&self, states: &[CraneState], inputs: &[VelocityCommand], slacks: &[Vec<f64>]) -> f64 {
        let tracking: f64 = (0..=self.node_count)
            .map(|k| self.residuals(k, &states[k], inputs.get(k)).iter().map(|r| r * r).sum::<f64>())
            .sum();
        let penalty: f64 = slacks.iter().flatten().sum();
        tracking + self.slack_weight * penalty
    }

    fn check_trajectory(&self, states: &[CraneState], inputs: &[VelocityCommand]) -> Result<()> {
        if states.len() != self.node_count + 1 || inputs.len() != self.node_count {
            return Err(Error::Dimension(format!(
                "trajectory has {} states and {} inputs, expected {} and {}",
                states.len(),
                inputs.len(),
                self.node_count + 1,
                self.node_count
            )));
        }
        if !states.iter().all(CraneState::is_finite) || !inputs.iter().all(|u| u.to_array().iter().all(|v| v.is_finite())) {
            return Err(Error::NonFiniteState { t: self.t0 });
        }
        Ok(())
    }

    /// Every node at `x_0`, every input at zero (clamped into the bounds).
    pub fn hover_guess(&self) -> (Vec<CraneState>, Vec<VelocityCommand>) {
        let u = VelocityCommand::from_array(self.model.params.input_bounds.clamp([0.0; NU]));
        (vec![self.x0; self.node_count + 1], vec![u; self.node_count])
    }

    /// Gauss-Newton QP in the step `(dx, du)` around the trajectory guess.
    pub fn linearize(&self, states: &[CraneState], inputs: &[VelocityCommand]) -> Result<QpProblem> {
        self.check_trajectory(states, inputs)?;
        let stages = (0..=self.node_count)
            .into_par_iter()
            .map(|k| self.linearize_node(k, states, inputs))
            .collect::<Result<Vec<_>>>()?;
        let dx0 = DVector::from_row_slice(&self.x0.to_array()) - DVector::from_row_slice(&states[0].to_array());
        Ok(QpProblem { stages, initial_state: Some(dx0) })
    }

    fn linearize_node(&self, k: usize, states: &[CraneState], inputs: &[VelocityCommand]) -> Result<QpStage> {
        let x = &states[k];
        let u = inputs.get(k);
        let nu = if u.is_some() { NU } else { 0 };
        let (r, jac) = self.residual_jacobian(k, x, u);
        let r = DVector::from_vec(r);
        let jx = jac.columns(0, NX);
        let ju = jac.columns(NX, nu);
        let mut stage = QpStage::zeros(NX, nu);
        stage.hess_xx = jx.tr_mul(&jx) * 2.0;
        stage.hess_ux = ju.tr_mul(&jx) * 2.0;
        stage.hess_uu = ju.tr_mul(&ju) * 2.0;
        stage.grad_x = jx.tr_mul(&r) * 2.0;
        stage.grad_u = ju.tr_mul(&r) * 2.0;

        let fj = match u {
            Some(u) => Some(flow_jacobians(&self.model, &self.flow, self.node_time(k), x, u).map_err(|e| renumber(e, k))?),
            None => None,
        };
        let next = fj.as_ref().map(|f| NextState { state: f.next, jac: Some((&f.a, &f.b)) });
        stage.rows = self
            .rows(k, x, u, next)
            .into_iter()
            .map(|row| InequalityRow {
                gx: row.gx,
                gu: row.gu,
                lower: -row.value,
                soft_weight: row.kind.is_soft().then_some(self.slack_weight),
            })
            .collect();
        if let Some(f) = fj {
            let gap = DVector::from_row_slice(&f.next.to_array()) - DVector::from_row_slice(&states[k + 1].to_array());
            stage.dynamics = Some(StageDynamics { a: f.a, b: f.b, c: gap });
        }
        if !stage.grad_x.iter().chain(stage.grad_u.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteJacobian { node: k });
        }
        Ok(stage)
    }
}

fn renumber(e: Error, node: usize) -> Error {
    match e {
        Error::NonFiniteJacobian { .. } => Error::NonFiniteJacobian { node },
        other => other,
    }
}

/// `cfg.sqp_iters` Gauss-Newton SQP iterations with full steps, starting from
/// `warm` when its shape matches and from the hover guess otherwise.
pub fn sqp_rti_step(tr: &Transcription, cfg: &OcpConfig, warm: Option<&OcpSolution>) -> RtiStep {
    let n = tr.node_count;
    let warm = warm.filter(|w| w.states.len() == n + 1 && w.inputs.len() == n);
    let (mut states, mut inputs) = match warm {
        Some(w) => (w.states.clone(), w.inputs.clone()),
        None => tr.hover_guess(),
    };
    let fallback = |failure: Error| {
        let solution = warm.cloned().unwrap_or_else(|| {
            let (states, inputs) = tr.hover_guess();
            let slacks = vec![Vec::new(); n + 1];
            OcpSolution { t0: tr.t0, states, inputs, slacks, kkt_residual: f64::NAN, cost: f64::NAN, qp_iterations: 0, step_norm: 0.0 }
        });
        RtiStep { solution, failure: Some(failure) }
    };

    let bounds = tr.model.params.input_bounds;
    let (mut kkt, mut qp_iterations, mut step_norm) = (0.0, 0, 0.0);
    for _ in 0..cfg.sqp_iters {
        let qp = match tr.linearize(&states, &inputs) {
            Ok(qp) => qp,
            Err(e) => return fallback(e),
        };
        let sol = match solve_qp(&qp, &cfg.qp) {
            Ok(sol) => sol,
            Err(e) => return fallback(e),
        };
        qp_iterations += sol.iterations;
        let acceptable = sol.status == QpStatus::Solved
            || (sol.status == QpStatus::MaxIter && sol.residuals.max() <= 1e3 * cfg.qp.tol);
        if !acceptable {
            return fallback(Error::QpFailure(format!(
                "status {:?} after {} iterations, KKT residual {:e}",
                sol.status,
                sol.iterations,
                sol.residuals.max()
            )));
        }
        kkt = sol.residuals.max();
        step_norm = 0.0_f64;
        for (x, dx) in states.iter_mut().zip(&sol.x) {
            let mut a = x.to_array();
            for (v, d) in a.iter_mut().zip(dx.iter()) {
                *v += d;
                step_norm = step_norm.max(d.abs());
            }
            *x = CraneState::from_array(a);
        }
        for (u, du) in inputs.iter_mut().zip(&sol.u) {
            let mut a = u.to_array();
            for (v, d) in a.iter_mut().zip(du.iter()) {
                *v += d;
                step_norm = step_norm.max(d.abs());
            }
            *u = VelocityCommand::from_array(bounds.clamp(a));
        }
    }
    let slacks = match tr.soft_violations(&states, &inputs) {
        Ok(s) => s,
        Err(e) => return fallback(e),
    };
    let cost = tr.objective_with_slacks(&states, &inputs, &slacks);
    RtiStep {
        solution: OcpSolution { t0: tr.t0, states, inputs, slacks, kkt_residual: kkt, cost, qp_iterations, step_norm },
        failure: None,
    }
}
