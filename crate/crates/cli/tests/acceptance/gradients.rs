use std::sync::Arc;

use cranesafe::dynamics::{hanging_state, CraneModel, CraneState, VelocityCommand, NQ, NU, NX};
use cranesafe::harness::ScenarioConfig;
use cranesafe::integrator::step;
use cranesafe::mpc::ocp::BarrierRow;
use cranesafe::mpc::{flow_jacobians, transcribe, ControllerSetup, MeasuredInput, Transcription};
use cranesafe::safety::{target_safety, target_safety_gradient};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;
const POINTS: usize = 100;

fn default_setup() -> ControllerSetup {
    let cfg = ScenarioConfig::default();
    ControllerSetup {
        model: CraneModel::new(cfg.crane.clone(), Arc::new(cfg.base_profile.clone())),
        flow: cfg.model_flow().unwrap(),
        target: cfg.target.clone(),
        free_space: cfg.free_space(),
        reference: cfg.reference.clone(),
        ocp: cfg.ocp.clone(),
        barrier: cfg.barrier.clone(),
        mode: cfg.mode,
    }
}

fn random_state(rng: &mut ChaCha8Rng, setup: &ControllerSetup) -> CraneState {
    let z = rng.random_range(0.05..0.6);
    let mut x = hanging_state([2.29, 0.0, z], &setup.model.params).unwrap().to_array();
    for (i, v) in x.iter_mut().enumerate() {
        *v += if i < NQ { rng.random_range(-0.1..0.1) } else { rng.random_range(-0.3..0.3) };
    }
    CraneState::from_array(x)
}

fn random_input(rng: &mut ChaCha8Rng) -> VelocityCommand {
    VelocityCommand::from_array(std::array::from_fn(|_| rng.random_range(-0.4..0.4)))
}

fn transcription(setup: &ControllerSetup, t0: f64, x0: &CraneState, row: BarrierRow) -> Transcription {
    let sb = setup.free_space.box_at(&setup.model.base_at(t0)).unwrap();
    transcribe(setup, t0, x0, &MeasuredInput::from_state(x0), row, sb).unwrap()
}

fn central_difference<const N: usize>(z: &[f64; N], f: impl Fn(&[f64; N]) -> Vec<f64>) -> DMatrix<f64> {
    let m = f(z).len();
    let mut jac = DMatrix::zeros(m, N);
    for i in 0..N {
        let h = FD_STEP * (1.0 + z[i].abs());
        let (mut zp, mut zm) = (*z, *z);
        zp[i] += h;
        zm[i] -= h;
        let (fp, fm) = (f(&zp), f(&zm));
        for r in 0..m {
            jac[(r, i)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    jac
}

/// Largest error relative to the scale of the finite-difference Jacobian.
fn relative_error(exact: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    (exact - fd).amax() / fd.amax().max(1.0)
}

fn split(z: &[f64; NX + NU]) -> (CraneState, VelocityCommand) {
    (
        CraneState::from_array(std::array::from_fn(|i| z[i])),
        VelocityCommand::from_array(std::array::from_fn(|i| z[NX + i])),
    )
}

fn joined(x: &CraneState, u: &VelocityCommand) -> [f64; NX + NU] {
    let (xa, ua) = (x.to_array(), u.to_array());
    std::array::from_fn(|i| if i < NX { xa[i] } else { ua[i - NX] })
}

fn flow_jacobian_error(setup: &ControllerSetup, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        let (x, u) = (random_state(rng, setup), random_input(rng));
        let t = rng.random_range(0.0..5.0);
        let fj = flow_jacobians(&setup.model, &setup.flow, t, &x, &u).unwrap();
        let fd = central_difference(&joined(&x, &u), |z| {
            let (x, u) = split(z);
            step(&setup.model, &setup.flow, t, &x, &u).unwrap().to_array().to_vec()
        });
        worst = worst.max(relative_error(&fj.a, &fd.columns(0, NX).into_owned()));
        worst = worst.max(relative_error(&fj.b, &fd.columns(NX, NU).into_owned()));
    }
    worst
}

fn residual_jacobian_error(setup: &ControllerSetup, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..POINTS {
        let x0 = random_state(rng, setup);
        let tr = transcription(setup, rng.random_range(0.0..8.0), &x0, BarrierRow::nominal());
        let (x, u) = (random_state(rng, setup), random_input(rng));
        let k = [0, 1, 17, tr.node_count][i % 4];
        let err = if k < tr.node_count {
            let (_, jac) = tr.residual_jacobian(k, &x, Some(&u));
            let fd = central_difference(&joined(&x, &u), |z| {
                let (x, u) = split(z);
                tr.residuals(k, &x, Some(&u))
            });
            relative_error(&jac, &fd)
        } else {
            let (_, jac) = tr.residual_jacobian(k, &x, None);
            let fd = central_difference(&x.to_array(), |z| tr.residuals(k, &CraneState::from_array(*z), None));
            relative_error(&jac, &fd)
        };
        worst = worst.max(err);
    }
    worst
}

fn constraint_row_error(setup: &ControllerSetup, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..POINTS {
        let x0 = random_state(rng, setup);
        let row = BarrierRow { delta: rng.random_range(0.0..0.1), alpha_gain: rng.random_range(0.1..1.0) };
        let tr = transcription(setup, rng.random_range(0.0..8.0), &x0, row);
        let (x, u) = (random_state(rng, setup), random_input(rng));
        let k = [0, 1, 9, tr.node_count - 1][i % 4];
        let rows = tr.constraint_rows(k, &x, Some(&u)).unwrap();
        let exact =
            DMatrix::from_fn(rows.len(), NX + NU, |r, c| if c < NX { rows[r].gx[c] } else { rows[r].gu[c - NX] });
        let fd = central_difference(&joined(&x, &u), |z| {
            let (x, u) = split(z);
            tr.constraint_rows(k, &x, Some(&u)).unwrap().iter().map(|r| r.value).collect()
        });
        worst = worst.max(relative_error(&exact, &fd));
    }
    worst
}

fn target_gradient_error(setup: &ControllerSetup, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        let x = random_state(rng, setup);
        let t = rng.random_range(0.0..5.0);
        let g = target_safety_gradient(t, &x, &setup.target, &setup.model, [0.0; 3]);
        let fd = central_difference(&x.to_array(), |z| {
            vec![target_safety(t, &CraneState::from_array(*z), &setup.target, &setup.model, [0.0; 3])]
        });
        worst = worst.max(relative_error(&DMatrix::from_row_slice(1, NX, &g), &fd));
    }
    worst
}

pub fn finite_differences() -> Outcome {
    let setup = default_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let checks = [
        ("h_t gradient", target_gradient_error(&setup, &mut rng)),
        ("flow A/B", flow_jacobian_error(&setup, &mut rng)),
        ("residuals", residual_jacobian_error(&setup, &mut rng)),
        ("constraint rows", constraint_row_error(&setup, &mut rng)),
    ];
    for (name, err) in checks {
        ensure!(err <= FD_TOL, "{name}: relative error {err:e}");
    }
    Ok(checks.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", "))
}
