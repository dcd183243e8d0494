use std::sync::Arc;

use cranesafe::dynamics::{
    bias_forces, kinetic_energy, mass_matrix, potential_energy, torque_vector_field, BaseMotionSample, BaseSignal,
    CraneModel, CraneParameters, CraneState, GeneralizedCoordinates, StaticBase, VelocityCommand, NQ, NX,
};
use cranesafe::integrator::{step, FlowConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::wavy::{random_state, WavyBase};
use crate::{ensure, Outcome};

fn with_q(x: &CraneState, q: [f64; NQ]) -> CraneState {
    CraneState { q: GeneralizedCoordinates::from_array(q), qdot: x.qdot }
}

/// Fourth-order central difference at 0.
fn five_point(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

/// `d/dt (dL/dqdot) - dL/dq` at `qddot = 0`, by nested central differences of the Lagrangian.
fn euler_lagrange_residual(x: &CraneState, t: f64, sig: &dyn BaseSignal, p: &CraneParameters) -> [f64; NQ] {
    let lag = |t: f64, y: &CraneState| kinetic_energy(y, &sig.sample(t), p) - potential_energy(&y.q, &sig.sample(t), p);
    let momentum = |t: f64, y: &CraneState, j: usize| {
        let h = 1e-3;
        let (mut a, mut b) = (*y, *y);
        a.qdot[j] += h;
        b.qdot[j] -= h;
        (lag(t, &a) - lag(t, &b)) / (2.0 * h)
    };
    let q0 = x.q.to_array();
    std::array::from_fn(|j| {
        let along = |s: f64| momentum(t + s, &with_q(x, std::array::from_fn(|i| q0[i] + s * x.qdot[i])), j);
        let bump = |s: f64| {
            let mut q = q0;
            q[j] += s;
            lag(t, &with_q(x, q))
        };
        five_point(along, 1e-3) - five_point(bump, 1e-3)
    })
}

fn mass_matrix_checks() -> Outcome {
    let p = CraneParameters::default();
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let (mut asym, mut min_eig) = (0.0f64, f64::INFINITY);
    for _ in 0..1000 {
        let x = random_state(&mut rng, &p);
        let d = mass_matrix(&x.q, &p).map_err(|e| e.to_string())?;
        asym = asym.max((d - d.transpose()).amax());
        min_eig = min_eig.min(d.symmetric_eigenvalues().min());
    }
    ensure!(asym <= 1e-9, "D asymmetry {asym:e}");
    ensure!(min_eig > 0.0, "D min eigenvalue {min_eig:e}");
    Ok(format!("asym {asym:.1e}, min eig {min_eig:.2e}"))
}

fn bias_force_checks() -> Outcome {
    let p = CraneParameters::default();
    let mut rng = ChaCha8Rng::seed_from_u64(402);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = random_state(&mut rng, &p);
        let sig = WavyBase::random(&mut rng, 0.2);
        let t = rng.random_range(0.0..3.0);
        let h = bias_forces(&x, &sig.sample(t), &p);
        let oracle = euler_lagrange_residual(&x, t, &sig, &p);
        worst = (0..NQ).map(|j| (h[j] - oracle[j]).abs()).fold(worst, f64::max);
    }
    ensure!(worst < 1e-5, "H vs Euler-Lagrange oracle {worst:e}");
    Ok(format!("H err {worst:.1e}"))
}

fn energy_drift() -> Outcome {
    let p = CraneParameters::default();
    let q = GeneralizedCoordinates {
        beta: 0.3,
        theta: -0.5,
        tether_len: 0.9,
        rope_roll: 0.25,
        rope_pitch: -0.2,
        payload_roll: 0.1,
        payload_pitch: 0.15,
    };
    let mut x = CraneState { q, qdot: [2.5, -0.02, 0.0, 0.3, 0.1, -0.2, 0.1] }.to_array();
    let base = BaseMotionSample::identity();
    let energy = |x: &[f64; NX]| {
        let s = CraneState::from_array(*x);
        kinetic_energy(&s, &base, &p) + potential_energy(&s.q, &base, &p)
    };
    let f = |x: &[f64; NX]| torque_vector_field(0.0, &CraneState::from_array(*x), [0.0; 3], &StaticBase, &p);
    let (dt, e0) = (1e-3, energy(&x));
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let ax = |k: &[f64; NX], a: f64| -> [f64; NX] { std::array::from_fn(|i| x[i] + a * k[i]) };
        let k1 = f(&x).map_err(|e| e.to_string())?;
        let k2 = f(&ax(&k1, 0.5 * dt)).map_err(|e| e.to_string())?;
        let k3 = f(&ax(&k2, 0.5 * dt)).map_err(|e| e.to_string())?;
        let k4 = f(&ax(&k3, dt)).map_err(|e| e.to_string())?;
        x = std::array::from_fn(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        worst = worst.max(((energy(&x) - e0) / e0.abs()).abs());
    }
    ensure!(worst < 1e-4, "relative energy drift {worst:e}");
    Ok(format!("energy drift {worst:.1e}"))
}

fn rk4_order() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = f64::INFINITY;
    let dist = |a: &CraneState, b: &CraneState| {
        let (a, b) = (a.to_array(), b.to_array());
        (0..NX).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
    };
    for _ in 0..10 {
        let model = CraneModel::new(CraneParameters::default(), Arc::new(WavyBase::random(&mut rng, 0.1)));
        let mut x = CraneState::default();
        x.q.beta = rng.random_range(-1.0..1.0);
        x.q.theta = rng.random_range(0.0..0.8);
        x.q.tether_len = rng.random_range(0.5..1.5);
        let mut q = x.q.to_array();
        for v in &mut q[3..] {
            *v = rng.random_range(-0.3..0.3);
        }
        x.q = GeneralizedCoordinates::from_array(q);
        x.qdot = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
        let u = VelocityCommand::from_array(std::array::from_fn(|_| rng.random_range(-0.5..0.5)));
        let run = |n: usize| -> Result<CraneState, String> {
            let cfg = FlowConfig::new(1.0 / 30.0, n).map_err(|e| e.to_string())?;
            step(&model, &cfg, 0.2, &x, &u).map_err(|e| e.to_string())
        };
        let (a, b, c) = (run(1)?, run(2)?, run(4)?);
        worst = worst.min((dist(&a, &b) / dist(&b, &c)).log2());
    }
    ensure!(worst >= 3.8, "observed RK4 order {worst:.3}");
    Ok(format!("RK4 order {worst:.2}"))
}

pub fn validation() -> Outcome {
    let parts = [mass_matrix_checks()?, bias_force_checks()?, energy_drift()?, rk4_order()?];
    Ok(parts.join(", "))
}
