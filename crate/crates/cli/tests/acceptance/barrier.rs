use std::sync::Arc;

use cranesafe::barrier::{adapt_delta, class_k, default_crane_radii, sample_ball, BarrierConfig, CraneBarrier, DeltaResult};
use cranesafe::dynamics::{CraneModel, CraneParameters, CraneState, VelocityCommand, NX};
use cranesafe::integrator::{partial_flow, step, FlowConfig};
use cranesafe::safety::{target_safety, TargetSafetyParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::wavy::WavyBase;
use crate::{ensure, Outcome};

fn crane_system(rng: &mut impl Rng) -> CraneBarrier {
    CraneBarrier {
        model: CraneModel::new(CraneParameters::default(), Arc::new(WavyBase::random(rng, 0.05))),
        flow: FlowConfig::default(),
        target: TargetSafetyParams::default(),
    }
}

/// Payload hanging a little above and beside the target.
fn near_target_state(rng: &mut impl Rng) -> CraneState {
    let mut x = CraneState::default();
    x.q.beta = rng.random_range(-0.03..0.03);
    x.q.theta = rng.random_range(0.3..0.4);
    x.q.tether_len = rng.random_range(0.7..1.2);
    x.q.rope_roll = rng.random_range(-0.05..0.05);
    x.q.rope_pitch = rng.random_range(-0.05..0.05);
    x.q.payload_roll = rng.random_range(-0.05..0.05);
    x.q.payload_pitch = rng.random_range(-0.05..0.05);
    x.qdot = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    x
}

fn random_config(rng: &mut impl Rng, flow: &FlowConfig) -> BarrierConfig {
    let scale = rng.random_range(0.0..2.0);
    BarrierConfig {
        alpha_gain: rng.random_range(0.05..=1.0),
        sample_count: rng.random_range(1..60),
        ball_radii: default_crane_radii().iter().map(|r| r * scale).collect(),
        target_radii: [0.03 * scale; 3],
        tau_step: flow.period / [1.0, 2.0, 4.0][rng.random_range(0..3)],
        rng_seed: rng.random(),
        include_alpha_offset: rng.random_bool(0.5),
    }
}

/// Exhaustive double loop over (sample, tau), every flow integrated from the sample on its own.
fn brute_force_delta(sys: &CraneBarrier, t: f64, x: &CraneState, u: &VelocityCommand, cfg: &BarrierConfig) -> DeltaResult {
    let samples =
        sample_ball(&x.to_array(), &cfg.ball_radii, &cfg.target_radii, cfg.sample_count, cfg.rng_seed).unwrap();
    let period = sys.flow.period;
    let end = step(&sys.model, &sys.flow, t, x, u).unwrap();
    let reference = target_safety(t + period, &end, &sys.target, &sys.model, [0.0; 3]);
    let n_tau = (period / cfg.tau_step).round() as usize;
    let mut best = (f64::NEG_INFINITY, 0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        for k in 1..=n_tau {
            let tau = k as f64 * cfg.tau_step;
            let xs = partial_flow(&sys.model, &sys.flow, t, &CraneState::from_array(s.state), u, tau).unwrap();
            let gap = reference - target_safety(t + tau, &xs, &sys.target, &sys.model, s.target_offset);
            if gap > best.0 {
                best = (gap, i, tau);
            }
        }
    }
    let offset = if cfg.include_alpha_offset {
        class_k(target_safety(t, x, &sys.target, &sys.model, [0.0; 3]), cfg.alpha_gain)
    } else {
        0.0
    };
    DeltaResult { delta: (best.0 + offset).max(0.0), worst_sample_index: best.1, worst_tau: best.2 }
}

fn random_input(rng: &mut impl Rng) -> VelocityCommand {
    VelocityCommand::from_array(std::array::from_fn(|_| rng.random_range(-0.5..0.5)))
}

pub fn delta_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let mut positive = 0;
    for draw in 0..1000 {
        let sys = crane_system(&mut rng);
        let x = near_target_state(&mut rng);
        let u = random_input(&mut rng);
        let cfg = random_config(&mut rng, &sys.flow);
        let t = rng.random_range(0.0..5.0);
        let got = adapt_delta(&sys, t, &x.to_array(), &u, &cfg).map_err(|e| e.to_string())?;
        let want = brute_force_delta(&sys, t, &x, &u, &cfg);
        ensure!(got.delta >= 0.0, "draw {draw}: negative delta {}", got.delta);
        ensure!(got.delta == want.delta, "draw {draw}: {} vs brute force {}", got.delta, want.delta);
        positive += usize::from(got.delta > 0.0);
    }
    for draw in 0..100 {
        let sys = crane_system(&mut rng);
        let x = near_target_state(&mut rng).to_array();
        let cfg = BarrierConfig {
            ball_radii: vec![0.0; NX],
            target_radii: [0.0; 3],
            tau_step: sys.flow.period,
            include_alpha_offset: false,
            ..Default::default()
        };
        let d = adapt_delta(&sys, 0.0, &x, &random_input(&mut rng), &cfg).map_err(|e| e.to_string())?.delta;
        ensure!(d == 0.0, "zero ball draw {draw}: delta {d}");
    }
    Ok(format!("1000 draws exact ({positive} positive), zero ball gives 0 on 100 draws"))
}
