use cranesafe::mpc::qp::{InequalityRow, KktBackend, QpProblem, QpSettings, QpSolution, QpStage, QpStatus, StageDynamics};
use cranesafe::mpc::solve_qp;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

fn rand_mat(rng: &mut impl Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
}

fn rand_vec(rng: &mut impl Rng, n: usize, s: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-s..s))
}

/// Random stage-wise QP whose rows are satisfied strictly by a random
/// dynamically consistent trajectory. `psd_only` leaves the Hessian singular
/// in some directions.
fn random_qp(
    rng: &mut impl Rng,
    n_stages: usize,
    nx: usize,
    nu: usize,
    rows_per_stage: usize,
    soft: bool,
    fixed_x0: bool,
) -> QpProblem {
    let mut stages = Vec::with_capacity(n_stages);
    let mut x = rand_vec(rng, nx, 1.0);
    let x0 = x.clone();
    for k in 0..n_stages {
        let terminal = k + 1 == n_stages;
        let nu_k = if terminal { 0 } else { nu };
        let mut s = QpStage::zeros(nx, nu_k);
        let m = rand_mat(rng, nx + nu_k, nx + nu_k, 1.0);
        let h = &m * m.transpose() + DMatrix::identity(nx + nu_k, nx + nu_k) * 0.1;
        s.hess_xx = h.view((0, 0), (nx, nx)).into_owned();
        s.hess_ux = h.view((nx, 0), (nu_k, nx)).into_owned();
        s.hess_uu = h.view((nx, nx), (nu_k, nu_k)).into_owned();
        s.grad_x = rand_vec(rng, nx, 3.0);
        s.grad_u = rand_vec(rng, nu_k, 3.0);
        let u = rand_vec(rng, nu_k, 1.0);
        for _ in 0..rows_per_stage {
            let gx = rand_vec(rng, nx, 1.0);
            let gu = rand_vec(rng, nu_k, 1.0);
            let lower = gx.dot(&x) + gu.dot(&u) - rng.random_range(0.05..1.0);
            let soft_weight = if soft && rng.random_bool(0.5) { Some(rng.random_range(0.5..20.0)) } else { None };
            s.rows.push(InequalityRow { gx, gu, lower, soft_weight });
        }
        if !terminal {
            let a = DMatrix::identity(nx, nx) + rand_mat(rng, nx, nx, 0.3);
            let b = rand_mat(rng, nx, nu_k, 1.0);
            let c = rand_vec(rng, nx, 0.2);
            x = &a * &x + &b * &u + &c;
            s.dynamics = Some(StageDynamics { a, b, c });
        }
        stages.push(s);
    }
    QpProblem { stages, initial_state: fixed_x0.then_some(x0) }
}

/// The QP flattened to `min 1/2 z^T H z + g^T z` s.t. `E z = e`, `G z >= l`.
struct DenseQp {
    h: DMatrix<f64>,
    g: DVector<f64>,
    e_mat: DMatrix<f64>,
    e_rhs: DVector<f64>,
    g_mat: DMatrix<f64>,
    lower: DVector<f64>,
    x_off: Vec<usize>,
    u_off: Vec<usize>,
}

fn densify(qp: &QpProblem) -> DenseQp {
    let mut x_off = Vec::new();
    let mut u_off = Vec::new();
    let mut n = 0;
    for s in &qp.stages {
        x_off.push(n);
        n += s.nx();
        u_off.push(n);
        n += s.nu();
    }
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut e_rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut g_rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for (k, s) in qp.stages.iter().enumerate() {
        let (xo, uo, nx, nu) = (x_off[k], u_off[k], s.nx(), s.nu());
        h.view_mut((xo, xo), (nx, nx)).copy_from(&s.hess_xx);
        h.view_mut((uo, xo), (nu, nx)).copy_from(&s.hess_ux);
        h.view_mut((xo, uo), (nx, nu)).copy_from(&s.hess_ux.transpose());
        h.view_mut((uo, uo), (nu, nu)).copy_from(&s.hess_uu);
        g.rows_mut(xo, nx).copy_from(&s.grad_x);
        g.rows_mut(uo, nu).copy_from(&s.grad_u);
        for r in &s.rows {
            assert!(r.soft_weight.is_none(), "dense oracle handles hard rows only");
            let mut row = DVector::zeros(n);
            row.rows_mut(xo, nx).copy_from(&r.gx);
            row.rows_mut(uo, nu).copy_from(&r.gu);
            g_rows.push((row, r.lower));
        }
        if let Some(d) = &s.dynamics {
            let nxn = d.a.nrows();
            for i in 0..nxn {
                let mut row = DVector::zeros(n);
                row[x_off[k + 1] + i] = 1.0;
                for j in 0..nx {
                    row[xo + j] = -d.a[(i, j)];
                }
                for j in 0..nu {
                    row[uo + j] = -d.b[(i, j)];
                }
                e_rows.push((row, d.c[i]));
            }
        }
    }
    if let Some(x0) = &qp.initial_state {
        for i in 0..x0.len() {
            let mut row = DVector::zeros(n);
            row[i] = 1.0;
            e_rows.push((row, x0[i]));
        }
    }
    let stack = |rows: &[(DVector<f64>, f64)]| {
        let mut m = DMatrix::zeros(rows.len(), n);
        for (i, (r, _)) in rows.iter().enumerate() {
            m.row_mut(i).copy_from(&r.transpose());
        }
        (m, DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1)))
    };
    let (e_mat, e_rhs) = stack(&e_rows);
    let (g_mat, lower) = stack(&g_rows);
    DenseQp { h, g, e_mat, e_rhs, g_mat, lower, x_off, u_off }
}

/// Enumerates every active set, solves the equality-constrained KKT system
/// for each, and keeps the feasible, dual-feasible point of least objective.
fn active_set_oracle(d: &DenseQp) -> DVector<f64> {
    let n = d.h.nrows();
    let ne = d.e_mat.nrows();
    let m = d.g_mat.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let na = active.len();
        let dim = n + ne + na;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&d.h);
        rhs.rows_mut(0, n).copy_from(&(-&d.g));
        kkt.view_mut((n, 0), (ne, n)).copy_from(&d.e_mat);
        kkt.view_mut((0, n), (n, ne)).copy_from(&(-d.e_mat.transpose()));
        rhs.rows_mut(n, ne).copy_from(&d.e_rhs);
        for (j, &i) in active.iter().enumerate() {
            let row = d.g_mat.row(i);
            kkt.view_mut((n + ne + j, 0), (1, n)).copy_from(&row);
            kkt.view_mut((0, n + ne + j), (n, 1)).copy_from(&(-row.transpose()));
            rhs[n + ne + j] = d.lower[i];
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        // Dependent active rows make the system singular; LU may still return
        // a vector, so the solve is checked.
        if (&kkt * &sol - &rhs).amax() > 1e-9 {
            continue;
        }
        let z = sol.rows(0, n).into_owned();
        let primal_ok = (&d.g_mat * &z - &d.lower).iter().all(|v| *v >= -1e-9);
        let dual_ok = (0..na).all(|j| sol[n + ne + j] >= -1e-9);
        if primal_ok && dual_ok {
            let obj = 0.5 * z.dot(&(&d.h * &z)) + d.g.dot(&z);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, z));
            }
        }
    }
    best.expect("random problems are feasible by construction").1
}

fn flatten(sol: &QpSolution, d: &DenseQp) -> DVector<f64> {
    let n = d.h.nrows();
    let mut z = DVector::zeros(n);
    for k in 0..sol.x.len() {
        z.rows_mut(d.x_off[k], sol.x[k].len()).copy_from(&sol.x[k]);
        z.rows_mut(d.u_off[k], sol.u[k].len()).copy_from(&sol.u[k]);
    }
    z
}

fn kkt_residuals() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(601);
    let mut worst = 0.0f64;
    for i in 0..500 {
        let n_stages = rng.random_range(2..16);
        let (nx, nu) = (rng.random_range(2..7), rng.random_range(1..4));
        let m = rng.random_range(0..6);
        let fixed = rng.random_bool(0.8);
        let qp = random_qp(&mut rng, n_stages, nx, nu, m, true, fixed);
        let sol = solve_qp(&qp, &QpSettings::default()).map_err(|e| e.to_string())?;
        ensure!(sol.status == QpStatus::Solved, "QP {i}: {:?}", sol.status);
        worst = worst.max(sol.residuals.max());
    }
    ensure!(worst < 1e-8, "worst KKT residual {worst:e}");
    Ok(format!("KKT {worst:.1e} on 500"))
}

fn enumeration_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(602);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 500 {
        let qp = if rng.random_bool(0.5) {
            let nx = rng.random_range(1..=6);
            let m = rng.random_range(0..=4);
            random_qp(&mut rng, 1, nx, 0, m, false, false)
        } else {
            let (nx, nu) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let m = rng.random_range(0..=2);
            let fixed = rng.random_bool(0.5);
            random_qp(&mut rng, 2, nx, nu, m, false, fixed)
        };
        let d = densify(&qp);
        if d.h.nrows() > 6 || d.g_mat.nrows() > 4 {
            continue;
        }
        let want = active_set_oracle(&d);
        for backend in [KktBackend::Riccati, KktBackend::Dense] {
            let sol = solve_qp(&qp, &QpSettings { backend, ..Default::default() }).map_err(|e| e.to_string())?;
            ensure!(sol.status == QpStatus::Solved, "{backend:?}: {:?}", sol.status);
            worst = worst.max((flatten(&sol, &d) - &want).amax());
        }
        checked += 1;
    }
    ensure!(worst < 1e-8, "enumeration disagreement {worst:e}");
    Ok(format!("enumeration agreement {worst:.1e} on {checked}"))
}

pub fn solver_checks() -> Outcome {
    Ok(format!("{}, {}", kkt_residuals()?, enumeration_agreement()?))
}
