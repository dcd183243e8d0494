//! Convex QP over a stage-wise (multiple-shooting) sparsity pattern, solved by
//! a Mehrotra predictor-corrector interior-point method.
//!
//! Stage `k` carries a state block `x_k` and an input block `u_k` (empty on the
//! terminal stage). Stages are linked by `x_{k+1} = A_k x_k + B_k u_k + c_k`.
//! Each stage has one-sided inequality rows `gx x + gu u >= lower`; a row with
//! a soft weight `rho` becomes `gx x + gu u + s >= lower`, `s >= 0`, with the
//! L1 penalty `rho s` added to the objective.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StageDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InequalityRow {
    pub gx: DVector<f64>,
    pub gu: DVector<f64>,
    pub lower: f64,
    /// L1 penalty on the row's slack; `None` makes the row hard.
    pub soft_weight: Option<f64>,
}

/// One stage of the QP: `1/2 [x;u]^T [Q S^T; S R] [x;u] + [q;r]^T [x;u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpStage {
    pub hess_xx: DMatrix<f64>,
    pub hess_ux: DMatrix<f64>,
    pub hess_uu: DMatrix<f64>,
    pub grad_x: DVector<f64>,
    pub grad_u: DVector<f64>,
    pub rows: Vec<InequalityRow>,
    /// Link to the next stage; `None` on the terminal stage.
    pub dynamics: Option<StageDynamics>,
}

impl QpStage {
    /// Zero objective, no rows, no dynamics.
    pub fn zeros(nx: usize, nu: usize) -> Self {
        Self {
            hess_xx: DMatrix::zeros(nx, nx),
            hess_ux: DMatrix::zeros(nu, nx),
            hess_uu: DMatrix::zeros(nu, nu),
            grad_x: DVector::zeros(nx),
            grad_u: DVector::zeros(nu),
            rows: Vec::new(),
            dynamics: None,
        }
    }

    pub fn nx(&self) -> usize {
        self.hess_xx.nrows()
    }

    pub fn nu(&self) -> usize {
        self.hess_uu.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub stages: Vec<QpStage>,
    /// Fixes `x_0` when present; otherwise `x_0` is a free variable.
    pub initial_state: Option<DVector<f64>>,
}

impl QpProblem {
    pub fn validate(&self) -> Result<()> {
        let dim = |msg: String| Err(Error::Dimension(msg));
        let n = self.stages.len();
        if n == 0 {
            return dim("QP has no stages".into());
        }
        for (k, s) in self.stages.iter().enumerate() {
            let (nx, nu) = (s.nx(), s.nu());
            if s.hess_xx.ncols() != nx || s.hess_ux.shape() != (nu, nx) || s.hess_uu.ncols() != nu {
                return dim(format!("stage {k}: Hessian blocks inconsistent"));
            }
            if s.grad_x.len() != nx || s.grad_u.len() != nu {
                return dim(format!("stage {k}: gradient length"));
            }
            for (i, r) in s.rows.iter().enumerate() {
                if r.gx.len() != nx || r.gu.len() != nu {
                    return dim(format!("stage {k} row {i}: coefficient length"));
                }
                if !r.lower.is_finite() || r.soft_weight.is_some_and(|w| !(w > 0.0 && w.is_finite())) {
                    return dim(format!("stage {k} row {i}: bound or weight not finite"));
                }
            }
            match (&s.dynamics, k + 1 < n) {
                (Some(d), true) => {
                    let nx_next = self.stages[k + 1].nx();
                    if d.a.shape() != (nx_next, nx) || d.b.shape() != (nx_next, nu) || d.c.len() != nx_next {
                        return dim(format!("stage {k}: dynamics shape"));
                    }
                }
                (None, false) => {}
                _ => return dim(format!("stage {k}: dynamics must link every stage but the last")),
            }
        }
        if let Some(x0) = &self.initial_state {
            if x0.len() != self.stages[0].nx() {
                return dim("initial state length".into());
            }
        }
        Ok(())
    }

    /// Objective value at a primal point, including the L1 slack penalties.
    pub fn objective(&self, x: &[DVector<f64>], u: &[DVector<f64>], slack: &[DVector<f64>]) -> f64 {
        self.stages
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let (xk, uk) = (&x[k], &u[k]);
                let quad = 0.5 * xk.dot(&(&s.hess_xx * xk)) + uk.dot(&(&s.hess_ux * xk)) + 0.5 * uk.dot(&(&s.hess_uu * uk));
                let pen: f64 = s.rows.iter().zip(slack[k].iter()).map(|(r, v)| r.soft_weight.map_or(0.0, |w| w * v)).sum();
                quad + s.grad_x.dot(xk) + s.grad_u.dot(uk) + pen
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KktBackend {
    /// Stage-wise Riccati recursion, linear in the horizon.
    Riccati,
    /// Assembled KKT matrix with a dense LU factorization.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub backend: KktBackend,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100, backend: KktBackend::Riccati }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    Infeasible,
}

/// Infinity norms of the KKT conditions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Soft-row slacks (zero on hard rows).
    pub slack: Vec<DVector<f64>>,
    /// Inequality multipliers, nonnegative.
    pub row_multipliers: Vec<DVector<f64>>,
    /// `nu_k` for the constraint defining `x_k` (initial state or dynamics).
    pub costates: Vec<DVector<f64>>,
    pub status: QpStatus,
    pub iterations: usize,
    pub residuals: KktResiduals,
    pub objective: f64,
}

/// Rows of one stage stacked into matrices.
struct StageRowData {
    gx: DMatrix<f64>,
    gu: DMatrix<f64>,
    lower: DVector<f64>,
    /// Penalty per row, 0 for hard rows.
    weight: DVector<f64>,
    soft: Vec<bool>,
}

impl StageRowData {
    fn new(s: &QpStage) -> Self {
        let m = s.rows.len();
        let mut gx = DMatrix::zeros(m, s.nx());
        let mut gu = DMatrix::zeros(m, s.nu());
        for (i, r) in s.rows.iter().enumerate() {
            gx.row_mut(i).copy_from(&r.gx.transpose());
            gu.row_mut(i).copy_from(&r.gu.transpose());
        }
        Self {
            gx,
            gu,
            lower: DVector::from_iterator(m, s.rows.iter().map(|r| r.lower)),
            weight: DVector::from_iterator(m, s.rows.iter().map(|r| r.soft_weight.unwrap_or(0.0))),
            soft: s.rows.iter().map(|r| r.soft_weight.is_some()).collect(),
        }
    }

    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.gx * x + &self.gu * u
    }
}

/// Primal-dual iterate. Hard rows keep `sigma = 0` and `mu = 0`.
#[derive(Clone)]
struct Iterate {
    x: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    nu: Vec<DVector<f64>>,
    /// Row slack `t = g z + sigma - lower >= 0`.
    t: Vec<DVector<f64>>,
    lam: Vec<DVector<f64>>,
    sigma: Vec<DVector<f64>>,
    mu: Vec<DVector<f64>>,
}

/// Newton direction for every block of the iterate.
struct Direction {
    x: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    /// New costates (not increments).
    nu_new: Vec<DVector<f64>>,
    t: Vec<DVector<f64>>,
    lam: Vec<DVector<f64>>,
    sigma: Vec<DVector<f64>>,
    mu: Vec<DVector<f64>>,
}

struct Residuals {
    /// Stationarity with respect to `x_k`, `u_k` (without the costate terms
    /// that the Newton system re-solves).
    rx: Vec<DVector<f64>>,
    ru: Vec<DVector<f64>>,
    /// `x_{k+1} - A x_k - B u_k - c` for `k + 1`; index 0 holds the initial-state gap.
    rdyn: Vec<DVector<f64>>,
    /// `g z + sigma - t - lower`
    rrow: Vec<DVector<f64>>,
    /// `rho - lam - mu` on soft rows.
    rsoft: Vec<DVector<f64>>,
}

/// Right-hand side of the condensed Newton system: stage gradients and the
/// dynamics offsets of `dx_{k+1} - A dx_k - B du_k = b_{k+1}` (index 0 is the
/// initial condition `dx_0 = b_0` when the initial state is fixed).
struct NewtonRhs {
    gx: Vec<DVector<f64>>,
    gu: Vec<DVector<f64>>,
    b: Vec<DVector<f64>>,
}

/// Condensed Newton matrix of one iterate. The predictor and corrector share
/// it and differ only in the right-hand side.
struct NewtonMatrix {
    /// Inverse row weights eliminating the row multipliers.
    winv: Vec<DVector<f64>>,
    factor: KktFactor,
}

enum KktFactor {
    Riccati(RiccatiFactor),
    Dense(DenseFactor),
}

/// Factor of a reduced input Hessian.
enum ReducedHessian {
    Empty,
    Cholesky(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

impl ReducedHessian {
    fn solve(&self, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        match self {
            ReducedHessian::Empty => Some(DMatrix::zeros(0, b.ncols())),
            ReducedHessian::Cholesky(c) => Some(c.solve(b)),
            ReducedHessian::Lu(l) => l.solve(b),
        }
    }

    fn solve_vec(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            ReducedHessian::Empty => Some(DVector::zeros(0)),
            ReducedHessian::Cholesky(c) => Some(c.solve(b)),
            ReducedHessian::Lu(l) => l.solve(b),
        }
    }
}

struct RiccatiFactor {
    /// Cost-to-go Hessians `P_k`.
    p: Vec<DMatrix<f64>>,
    /// Feedback gains `K_k`.
    gain: Vec<DMatrix<f64>>,
    s_bar: Vec<DMatrix<f64>>,
    r_bar: Vec<ReducedHessian>,
    /// Factor of `P_0` when the initial state is free.
    p0: Option<LU<f64, Dyn, Dyn>>,
}

struct DenseFactor {
    lu: LU<f64, Dyn, Dyn>,
    x_off: Vec<usize>,
    u_off: Vec<usize>,
    e_off: Vec<usize>,
    nv: usize,
    dim: usize,
}

type NewtonSolution = (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>);

/// Iterations without a new most accurate point before giving up.
const STALL_ITERATIONS: usize = 6;

pub fn solve_qp(qp: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    qp.validate()?;
    if !(settings.tol > 0.0) || settings.max_iter == 0 {
        return Err(Error::InvalidConfig("QP tolerance must be positive and max_iter at least 1".into()));
    }
    let rows: Vec<StageRowData> = qp.stages.iter().map(StageRowData::new).collect();
    let n_pairs: usize = rows.iter().map(|r| r.lower.len() + r.soft.iter().filter(|s| **s).count()).sum();
    let mut it = initial_iterate(qp, &rows);
    let mut iterations = 0;
    let mut status = QpStatus::MaxIter;
    // Once every residual is below tolerance a few more iterations drive the
    // complementarity gap, and with it the distance to the active bounds,
    // towards rounding level.
    let mut refinements = 0;
    let mut accepted: Option<Iterate> = None;
    // Most accurate point so far, returned when rounding stalls the iteration.
    let mut best: Option<(f64, usize, Iterate)> = None;

    loop {
        let res = residuals(qp, &rows, &it);
        let kkt = kkt_norms(qp, &rows, &it, &res);
        if best.as_ref().is_none_or(|b| kkt.max() < b.0) {
            best = Some((kkt.max(), iterations, it.clone()));
        }
        if kkt.max() < settings.tol {
            status = QpStatus::Solved;
            if kkt.complementarity < settings.tol * 1e-6 || refinements >= 4 {
                break;
            }
            refinements += 1;
        } else if status == QpStatus::Solved {
            // A refinement step lost accuracy; the last accepted point is kept.
            it = accepted.expect("set when first solved");
            break;
        }
        if iterations >= settings.max_iter {
            break;
        }
        if status == QpStatus::Solved {
            accepted = Some(it.clone());
        }
        if diverging(&it) {
            status = QpStatus::Infeasible;
            break;
        }
        if best.as_ref().is_some_and(|b| iterations >= b.1 + STALL_ITERATIONS) {
            break;
        }
        iterations += 1;

        match predictor_corrector(qp, &rows, &it, &res, n_pairs, settings.backend) {
            Ok(next) => it = next,
            Err(_) if accepted.is_some() => {
                it = accepted.take().expect("checked");
                break;
            }
            Err(_) if best.is_some() => break,
            Err(e) => return Err(e),
        }
    }
    if status == QpStatus::MaxIter {
        if let Some((_, _, b)) = best {
            it = b;
        }
    }

    let res = residuals(qp, &rows, &it);
    let residuals = kkt_norms(qp, &rows, &it, &res);
    let slack: Vec<DVector<f64>> = it.sigma.clone();
    let objective = qp.objective(&it.x, &it.u, &slack);
    Ok(QpSolution {
        x: it.x,
        u: it.u,
        slack,
        row_multipliers: it.lam,
        costates: it.nu,
        status,
        iterations,
        residuals,
        objective,
    })
}

/// One Mehrotra predictor-corrector step.
fn predictor_corrector(
    qp: &QpProblem,
    rows: &[StageRowData],
    it: &Iterate,
    res: &Residuals,
    n_pairs: usize,
    backend: KktBackend,
) -> Result<Iterate> {
    let gap = complementarity_mean(rows, it, n_pairs);
    let nm = newton_matrix(qp, rows, it, backend)?;
    let aff = newton_direction(qp, rows, it, res, &nm, None, 0.0)?;
    let a_aff = max_step(rows, it, &aff).min(1.0);
    let mut trial = it.clone();
    apply(&mut trial, &aff, a_aff, rows);
    let gap_aff = complementarity_mean(rows, &trial, n_pairs);
    let centering = if gap > 0.0 { (gap_aff / gap).powi(3).min(1.0) } else { 0.0 };
    let dir = newton_direction(qp, rows, it, res, &nm, Some(&aff), centering * gap)?;
    let (mut next, step) = step_along(rows, it, &dir);
    if complementarity_mean(rows, &next, n_pairs) > (1.0 - 0.05 * step) * gap {
        // The second-order correction can stall the gap and make the iteration
        // cycle; a plain centered step keeps making progress.
        let centered = newton_direction(qp, rows, it, res, &nm, None, 0.1 * gap)?;
        next = step_along(rows, it, &centered).0;
    }
    let finite = |v: &[DVector<f64>]| v.iter().all(|a| a.iter().all(|e| e.is_finite()));
    if !(finite(&next.x) && finite(&next.u) && finite(&next.lam) && finite(&next.t)) {
        return Err(Error::QpFailure("non-finite interior-point iterate".into()));
    }
    Ok(next)
}

fn initial_iterate(qp: &QpProblem, rows: &[StageRowData]) -> Iterate {
    let n = qp.stages.len();
    let mut x: Vec<DVector<f64>> = qp.stages.iter().map(|s| DVector::zeros(s.nx())).collect();
    if let Some(x0) = &qp.initial_state {
        x[0] = x0.clone();
    }
    let u: Vec<DVector<f64>> = qp.stages.iter().map(|s| DVector::zeros(s.nu())).collect();
    let mut t = Vec::with_capacity(n);
    let mut lam = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    for (k, r) in rows.iter().enumerate() {
        let m = r.lower.len();
        let gz = r.eval(&x[k], &u[k]);
        let mut tk = DVector::zeros(m);
        let mut sk = DVector::zeros(m);
        let mut mk = DVector::zeros(m);
        for i in 0..m {
            let v = gz[i] - r.lower[i];
            if r.soft[i] {
                sk[i] = (-v).max(0.0) + 1.0;
                mk[i] = 0.5 * r.weight[i];
            }
            tk[i] = (v + sk[i]).max(1.0);
        }
        let lk = DVector::from_iterator(m, (0..m).map(|i| if r.soft[i] { 0.5 * r.weight[i] } else { 1.0 }));
        t.push(tk);
        lam.push(lk);
        sigma.push(sk);
        mu.push(mk);
    }
    let nu = qp.stages.iter().map(|s| DVector::zeros(s.nx())).collect();
    Iterate { x, u, nu, t, lam, sigma, mu }
}

fn residuals(qp: &QpProblem, rows: &[StageRowData], it: &Iterate) -> Residuals {
    let n = qp.stages.len();
    let mut rx = Vec::with_capacity(n);
    let mut ru = Vec::with_capacity(n);
    let mut rdyn = Vec::with_capacity(n);
    let mut rrow = Vec::with_capacity(n);
    let mut rsoft = Vec::with_capacity(n);
    for (k, (s, r)) in qp.stages.iter().zip(rows).enumerate() {
        let (x, u) = (&it.x[k], &it.u[k]);
        rx.push(&s.hess_xx * x + s.hess_ux.tr_mul(u) + &s.grad_x - r.gx.tr_mul(&it.lam[k]));
        ru.push(&s.hess_ux * x + &s.hess_uu * u + &s.grad_u - r.gu.tr_mul(&it.lam[k]));
        rdyn.push(if k == 0 {
            match &qp.initial_state {
                Some(x0) => x - x0,
                None => DVector::zeros(s.nx()),
            }
        } else {
            let d = qp.stages[k - 1].dynamics.as_ref().expect("validated");
            x - (&d.a * &it.x[k - 1] + &d.b * &it.u[k - 1] + &d.c)
        });
        rrow.push(r.eval(x, u) + &it.sigma[k] - &it.t[k] - &r.lower);
        let m = r.lower.len();
        rsoft.push(DVector::from_iterator(
            m,
            (0..m).map(|i| if r.soft[i] { r.weight[i] - it.lam[k][i] - it.mu[k][i] } else { 0.0 }),
        ));
    }
    Residuals { rx, ru, rdyn, rrow, rsoft }
}

fn kkt_norms(qp: &QpProblem, rows: &[StageRowData], it: &Iterate, res: &Residuals) -> KktResiduals {
    let n = qp.stages.len();
    let inf = |v: &DVector<f64>| v.amax();
    let mut out = KktResiduals::default();
    for k in 0..n {
        let mut sx = res.rx[k].clone();
        let mut su = res.ru[k].clone();
        if k > 0 || qp.initial_state.is_some() {
            sx -= &it.nu[k];
        }
        if let Some(d) = &qp.stages[k].dynamics {
            sx += d.a.tr_mul(&it.nu[k + 1]);
            su += d.b.tr_mul(&it.nu[k + 1]);
        }
        out.stationarity = out.stationarity.max(inf(&sx)).max(inf(&su)).max(inf(&res.rsoft[k]));
        // The primal row residual is reported on the original inequality,
        // i.e. its violation, together with the slack identity.
        let viol = (rows[k].eval(&it.x[k], &it.u[k]) + &it.sigma[k] - &rows[k].lower).map(|v| (-v).max(0.0));
        out.primal = out.primal.max(inf(&res.rdyn[k])).max(inf(&res.rrow[k])).max(inf(&viol));
        let neg = it.lam[k].iter().chain(it.mu[k].iter()).chain(it.sigma[k].iter()).fold(0.0f64, |m, v| m.max(-v));
        out.dual = out.dual.max(neg);
        for i in 0..rows[k].lower.len() {
            out.complementarity = out.complementarity.max((it.lam[k][i] * it.t[k][i]).abs());
            if rows[k].soft[i] {
                out.complementarity = out.complementarity.max((it.mu[k][i] * it.sigma[k][i]).abs());
            }
        }
    }
    out
}

fn complementarity_mean(rows: &[StageRowData], it: &Iterate, n_pairs: usize) -> f64 {
    if n_pairs == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (k, r) in rows.iter().enumerate() {
        sum += it.lam[k].dot(&it.t[k]);
        for i in 0..r.lower.len() {
            if r.soft[i] {
                sum += it.mu[k][i] * it.sigma[k][i];
            }
        }
    }
    sum / n_pairs as f64
}

fn diverging(it: &Iterate) -> bool {
    it.lam.iter().any(|l| l.iter().any(|v| *v > 1e14))
}

/// Eliminates the row multipliers and factors the resulting stage-wise system.
fn newton_matrix(qp: &QpProblem, rows: &[StageRowData], it: &Iterate, backend: KktBackend) -> Result<NewtonMatrix> {
    let mut winv = Vec::with_capacity(rows.len());
    for (k, r) in rows.iter().enumerate() {
        let m = r.lower.len();
        let mut w = DVector::zeros(m);
        for i in 0..m {
            let mut wi = it.t[k][i] / it.lam[k][i];
            if r.soft[i] {
                wi += it.sigma[k][i] / it.mu[k][i];
            }
            w[i] = 1.0 / wi;
        }
        winv.push(w);
    }
    let n = qp.stages.len();
    let (mut q, mut s, mut r) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (k, (st, rd)) in qp.stages.iter().zip(rows).enumerate() {
        let gxw = scale_rows(&rd.gx, &winv[k]);
        let guw = scale_rows(&rd.gu, &winv[k]);
        q.push(&st.hess_xx + rd.gx.tr_mul(&gxw));
        s.push(&st.hess_ux + rd.gu.tr_mul(&gxw));
        r.push(&st.hess_uu + rd.gu.tr_mul(&guw));
    }
    let factor = match backend {
        // An ill-conditioned recursion (huge barrier weights on nearly active
        // rows) falls back to the assembled system.
        KktBackend::Riccati => match riccati_factor(qp, &q, &s, &r) {
            Ok(f) => KktFactor::Riccati(f),
            Err(_) => KktFactor::Dense(dense_factor(qp, &q, &s, &r)?),
        },
        KktBackend::Dense => KktFactor::Dense(dense_factor(qp, &q, &s, &r)?),
    };
    Ok(NewtonMatrix { winv, factor })
}

/// Solves the linearized KKT system aiming at complementarity level `target`
/// (zero for the affine-scaling predictor). `affine` adds Mehrotra's
/// second-order correction from a predictor direction.
fn newton_direction(
    qp: &QpProblem,
    rows: &[StageRowData],
    it: &Iterate,
    res: &Residuals,
    nm: &NewtonMatrix,
    affine: Option<&Direction>,
    target: f64,
) -> Result<Direction> {
    let n = qp.stages.len();
    // Complementarity right-hand sides rc1 = lam t (+ corrections), rc2 = mu sigma (+ ...).
    let mut rc1 = Vec::with_capacity(n);
    let mut rc2 = Vec::with_capacity(n);
    for (k, r) in rows.iter().enumerate() {
        let m = r.lower.len();
        let mut c1 = it.lam[k].component_mul(&it.t[k]);
        let mut c2 = DVector::zeros(m);
        for i in 0..m {
            if r.soft[i] {
                c2[i] = it.mu[k][i] * it.sigma[k][i];
            }
        }
        for i in 0..m {
            c1[i] -= target;
            if r.soft[i] {
                c2[i] -= target;
            }
            if let Some(a) = affine {
                c1[i] += a.lam[k][i] * a.t[k][i];
                if r.soft[i] {
                    c2[i] += a.mu[k][i] * a.sigma[k][i];
                }
            }
        }
        rc1.push(c1);
        rc2.push(c2);
    }

    // Condense the row variables: dlam = W^{-1} (-g dz - qrow).
    let mut qrow = Vec::with_capacity(n);
    for (k, r) in rows.iter().enumerate() {
        let m = r.lower.len();
        let mut q = DVector::zeros(m);
        for i in 0..m {
            let mut qi = res.rrow[k][i] + rc1[k][i] / it.lam[k][i];
            if r.soft[i] {
                let (mu, sg) = (it.mu[k][i], it.sigma[k][i]);
                qi -= (rc2[k][i] + sg * res.rsoft[k][i]) / mu;
            }
            q[i] = qi;
        }
        qrow.push(q);
    }

    let mut rhs = NewtonRhs { gx: Vec::with_capacity(n), gu: Vec::with_capacity(n), b: Vec::with_capacity(n) };
    for (k, r) in rows.iter().enumerate() {
        let wq = nm.winv[k].component_mul(&qrow[k]);
        rhs.gx.push(&res.rx[k] + r.gx.tr_mul(&wq));
        rhs.gu.push(&res.ru[k] + r.gu.tr_mul(&wq));
        rhs.b.push(-&res.rdyn[k]);
    }

    let (dx, du, nu_new) = match &nm.factor {
        KktFactor::Riccati(f) => riccati_solve(qp, f, &rhs)?,
        KktFactor::Dense(f) => dense_solve(qp, f, &rhs)?,
    };

    let mut dir = Direction { x: dx, u: du, nu_new, t: Vec::new(), lam: Vec::new(), sigma: Vec::new(), mu: Vec::new() };
    for (k, r) in rows.iter().enumerate() {
        let m = r.lower.len();
        let gdz = r.eval(&dir.x[k], &dir.u[k]);
        let dlam = nm.winv[k].component_mul(&(-&gdz - &qrow[k]));
        let mut dt = DVector::zeros(m);
        let mut dmu = DVector::zeros(m);
        let mut dsg = DVector::zeros(m);
        for i in 0..m {
            dt[i] = (-rc1[k][i] - it.t[k][i] * dlam[i]) / it.lam[k][i];
            if r.soft[i] {
                dmu[i] = res.rsoft[k][i] - dlam[i];
                dsg[i] = (-rc2[k][i] - it.sigma[k][i] * dmu[i]) / it.mu[k][i];
            }
        }
        dir.t.push(dt);
        dir.lam.push(dlam);
        dir.sigma.push(dsg);
        dir.mu.push(dmu);
    }
    Ok(dir)
}

fn scale_rows(g: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = g.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= w[i];
    }
    out
}

/// Fraction-to-boundary step along `dir`; returns the new iterate and the step length.
fn step_along(rows: &[StageRowData], it: &Iterate, dir: &Direction) -> (Iterate, f64) {
    let step = (0.995 * max_step(rows, it, dir)).min(1.0);
    let mut next = it.clone();
    apply(&mut next, dir, step, rows);
    (next, step)
}

/// Largest step keeping every cone variable nonnegative (unbounded when no
/// component decreases).
fn max_step(rows: &[StageRowData], it: &Iterate, d: &Direction) -> f64 {
    let mut a = f64::INFINITY;
    let mut limit = |v: f64, dv: f64| {
        if dv < 0.0 {
            a = a.min(-v / dv);
        }
    };
    for (k, r) in rows.iter().enumerate() {
        for i in 0..r.lower.len() {
            limit(it.t[k][i], d.t[k][i]);
            limit(it.lam[k][i], d.lam[k][i]);
            if r.soft[i] {
                limit(it.sigma[k][i], d.sigma[k][i]);
                limit(it.mu[k][i], d.mu[k][i]);
            }
        }
    }
    a
}

fn apply(it: &mut Iterate, d: &Direction, a: f64, rows: &[StageRowData]) {
    for k in 0..it.x.len() {
        it.x[k].axpy(a, &d.x[k], 1.0);
        it.u[k].axpy(a, &d.u[k], 1.0);
        it.nu[k] = &it.nu[k] * (1.0 - a) + &d.nu_new[k] * a;
        it.t[k].axpy(a, &d.t[k], 1.0);
        it.lam[k].axpy(a, &d.lam[k], 1.0);
        for i in 0..rows[k].lower.len() {
            if rows[k].soft[i] {
                it.sigma[k][i] += a * d.sigma[k][i];
                it.mu[k][i] += a * d.mu[k][i];
            }
        }
    }
}

/// Backward Riccati recursion for `min sum 1/2 z^T H z + g^T z` subject to
/// `dx_{k+1} = A dx_k + B du_k + b_{k+1}`, with stage Hessian blocks `q`, `s`, `r`.
fn riccati_factor(qp: &QpProblem, q: &[DMatrix<f64>], s: &[DMatrix<f64>], r: &[DMatrix<f64>]) -> Result<RiccatiFactor> {
    let n = qp.stages.len();
    let mut p: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); n];
    let mut gain: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); n];
    let mut s_bar: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); n];
    let mut r_bar: Vec<ReducedHessian> = (0..n).map(|_| ReducedHessian::Empty).collect();
    p[n - 1] = q[n - 1].clone();
    for k in (0..n - 1).rev() {
        let d = qp.stages[k].dynamics.as_ref().expect("validated");
        let pb = &p[k + 1] * &d.b;
        let pa = &p[k + 1] * &d.a;
        let rb = &r[k] + d.b.tr_mul(&pb);
        let sb = &s[k] + d.b.tr_mul(&pa);
        let factor = if rb.nrows() == 0 {
            ReducedHessian::Empty
        } else {
            let shift = 1e-10 * (1.0 + rb.diagonal().amax());
            let n_u = rb.nrows();
            match rb.clone().cholesky().or_else(|| (&rb + DMatrix::identity(n_u, n_u) * shift).cholesky()) {
                Some(c) => ReducedHessian::Cholesky(c),
                None => ReducedHessian::Lu(rb.lu()),
            }
        };
        let g = -factor
            .solve(&sb)
            .ok_or_else(|| Error::QpFailure(format!("reduced input Hessian singular at stage {k}")))?;
        let pk = &q[k] + d.a.tr_mul(&pa) + sb.tr_mul(&g);
        p[k] = (&pk + pk.transpose()) * 0.5;
        gain[k] = g;
        s_bar[k] = sb;
        r_bar[k] = factor;
    }
    let p0 = qp.initial_state.is_none().then(|| p[0].clone().lu());
    Ok(RiccatiFactor { p, gain, s_bar, r_bar, p0 })
}

/// Backward pass over the right-hand side and forward rollout.
fn riccati_solve(qp: &QpProblem, f: &RiccatiFactor, rhs: &NewtonRhs) -> Result<NewtonSolution> {
    let n = qp.stages.len();
    let mut p_vec: Vec<DVector<f64>> = vec![DVector::zeros(0); n];
    let mut ff: Vec<DVector<f64>> = vec![DVector::zeros(0); n];
    p_vec[n - 1] = rhs.gx[n - 1].clone();
    for k in (0..n - 1).rev() {
        let d = qp.stages[k].dynamics.as_ref().expect("validated");
        let ppb = &f.p[k + 1] * &rhs.b[k + 1] + &p_vec[k + 1];
        let r_vec = &rhs.gu[k] + d.b.tr_mul(&ppb);
        let fk = -f.r_bar[k]
            .solve_vec(&r_vec)
            .ok_or_else(|| Error::QpFailure(format!("reduced input Hessian singular at stage {k}")))?;
        p_vec[k] = &rhs.gx[k] + d.a.tr_mul(&ppb) + f.s_bar[k].tr_mul(&fk);
        ff[k] = fk;
    }

    let x0 = match &f.p0 {
        None => rhs.b[0].clone(),
        Some(lu) => lu
            .solve(&(-&p_vec[0]))
            .ok_or_else(|| Error::QpFailure("free initial state has a singular cost-to-go".into()))?,
    };
    let mut dx = Vec::with_capacity(n);
    let mut du = Vec::with_capacity(n);
    dx.push(x0);
    for k in 0..n {
        let u = if k + 1 < n {
            &f.gain[k] * &dx[k] + &ff[k]
        } else {
            DVector::zeros(0)
        };
        if k + 1 < n {
            let d = qp.stages[k].dynamics.as_ref().expect("validated");
            dx.push(&d.a * &dx[k] + &d.b * &u + &rhs.b[k + 1]);
        }
        du.push(u);
    }
    let nu = (0..n)
        .map(|k| {
            if k == 0 && qp.initial_state.is_none() {
                DVector::zeros(dx[0].len())
            } else {
                &f.p[k] * &dx[k] + &p_vec[k]
            }
        })
        .collect();
    Ok((dx, du, nu))
}

/// The same system assembled into one KKT matrix.
fn dense_factor(qp: &QpProblem, q: &[DMatrix<f64>], s: &[DMatrix<f64>], r: &[DMatrix<f64>]) -> Result<DenseFactor> {
    let n = qp.stages.len();
    let mut x_off = Vec::with_capacity(n);
    let mut u_off = Vec::with_capacity(n);
    let mut nv = 0;
    for st in &qp.stages {
        x_off.push(nv);
        nv += st.nx();
        u_off.push(nv);
        nv += st.nu();
    }
    let fixed0 = qp.initial_state.is_some();
    let mut e_off = Vec::with_capacity(n);
    let mut ne = 0;
    for (k, st) in qp.stages.iter().enumerate() {
        e_off.push(ne);
        if k > 0 || fixed0 {
            ne += st.nx();
        }
    }
    let dim = nv + ne;
    let mut kkt = DMatrix::zeros(dim, dim);
    for (k, st) in qp.stages.iter().enumerate() {
        let (xo, uo, nx, nu) = (x_off[k], u_off[k], st.nx(), st.nu());
        kkt.view_mut((xo, xo), (nx, nx)).copy_from(&q[k]);
        kkt.view_mut((uo, xo), (nu, nx)).copy_from(&s[k]);
        kkt.view_mut((xo, uo), (nx, nu)).copy_from(&s[k].transpose());
        kkt.view_mut((uo, uo), (nu, nu)).copy_from(&r[k]);
        if k > 0 || fixed0 {
            // Row block E_k dz = b_k with multiplier nu_k; stationarity gets -E^T nu.
            let eo = nv + e_off[k];
            for i in 0..nx {
                kkt[(eo + i, xo + i)] = 1.0;
                kkt[(xo + i, eo + i)] = -1.0;
            }
            if k > 0 {
                let d = qp.stages[k - 1].dynamics.as_ref().expect("validated");
                let (pxo, puo) = (x_off[k - 1], u_off[k - 1]);
                let (pnx, pnu) = (d.a.ncols(), d.b.ncols());
                kkt.view_mut((eo, pxo), (nx, pnx)).copy_from(&(-&d.a));
                kkt.view_mut((eo, puo), (nx, pnu)).copy_from(&(-&d.b));
                kkt.view_mut((pxo, eo), (pnx, nx)).copy_from(&d.a.transpose());
                kkt.view_mut((puo, eo), (pnu, nx)).copy_from(&d.b.transpose());
            }
        }
    }
    let lu = kkt.lu();
    if !lu.is_invertible() {
        return Err(Error::QpFailure("singular KKT matrix".into()));
    }
    Ok(DenseFactor { lu, x_off, u_off, e_off, nv, dim })
}

fn dense_solve(qp: &QpProblem, f: &DenseFactor, rhs: &NewtonRhs) -> Result<NewtonSolution> {
    let n = qp.stages.len();
    let fixed0 = qp.initial_state.is_some();
    let mut v = DVector::zeros(f.dim);
    for (k, st) in qp.stages.iter().enumerate() {
        v.rows_mut(f.x_off[k], st.nx()).copy_from(&(-&rhs.gx[k]));
        v.rows_mut(f.u_off[k], st.nu()).copy_from(&(-&rhs.gu[k]));
        if k > 0 || fixed0 {
            v.rows_mut(f.nv + f.e_off[k], st.nx()).copy_from(&rhs.b[k]);
        }
    }
    let sol = f.lu.solve(&v).ok_or_else(|| Error::QpFailure("singular KKT matrix".into()))?;
    let dx = (0..n).map(|k| sol.rows(f.x_off[k], qp.stages[k].nx()).into_owned()).collect();
    let du = (0..n).map(|k| sol.rows(f.u_off[k], qp.stages[k].nu()).into_owned()).collect();
    let nu = (0..n)
        .map(|k| {
            if k > 0 || fixed0 {
                sol.rows(f.nv + f.e_off[k], qp.stages[k].nx()).into_owned()
            } else {
                DVector::zeros(qp.stages[k].nx())
            }
        })
        .collect();
    Ok((dx, du, nu))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_stage(h: f64, g: f64) -> QpStage {
        let mut s = QpStage::zeros(1, 0);
        s.hess_xx[(0, 0)] = h;
        s.grad_x[0] = g;
        s
    }

    fn bound_row(coef: f64, lower: f64, soft: Option<f64>) -> InequalityRow {
        InequalityRow { gx: DVector::from_element(1, coef), gu: DVector::zeros(0), lower, soft_weight: soft }
    }

    #[test]
    fn unconstrained_scalar() {
        let qp = QpProblem { stages: vec![scalar_stage(2.0, -4.0)], initial_state: None };
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x[0][0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn active_lower_bound() {
        let mut s = scalar_stage(1.0, 0.0);
        s.rows.push(bound_row(1.0, 1.5, None));
        let qp = QpProblem { stages: vec![s], initial_state: None };
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x[0][0] - 1.5).abs() < 1e-8);
        assert!((sol.row_multipliers[0][0] - 1.5).abs() < 1e-7);
    }

    #[test]
    fn soft_row_gives_way_beyond_its_weight() {
        // min 1/2 x^2 - 10 x with x <= 1 softly at weight 2: the slope of the
        // objective at x = 1 is 9 > 2, so the optimum sits where the slope
        // matches the penalty, x = 8.
        let mut s = scalar_stage(1.0, -10.0);
        s.rows.push(bound_row(-1.0, -1.0, Some(2.0)));
        let qp = QpProblem { stages: vec![s], initial_state: None };
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x[0][0] - 8.0).abs() < 1e-7);
        assert!((sol.slack[0][0] - 7.0).abs() < 1e-7);
    }

    #[test]
    fn contradictory_hard_rows_are_infeasible() {
        let mut s = scalar_stage(1.0, 0.0);
        s.rows.push(bound_row(1.0, 1.0, None));
        s.rows.push(bound_row(-1.0, 0.0, None));
        let qp = QpProblem { stages: vec![s], initial_state: None };
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_ne!(sol.status, QpStatus::Solved);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut s = scalar_stage(1.0, 0.0);
        s.grad_x = DVector::zeros(2);
        let qp = QpProblem { stages: vec![s], initial_state: None };
        assert!(matches!(solve_qp(&qp, &QpSettings::default()), Err(Error::Dimension(_))));
    }
}
