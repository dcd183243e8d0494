//! Fixtures shared by the benchmarks: the default scenario's controller and a
//! state a little above the target.

use std::sync::Arc;

use cranesafe::barrier::CraneBarrier;
use cranesafe::dynamics::{hanging_state, CraneModel, CraneState, VelocityCommand};
use cranesafe::harness::ScenarioConfig;
use cranesafe::mpc::ControllerSetup;

pub fn scenario() -> ScenarioConfig {
    ScenarioConfig::default()
}

pub fn controller_setup(cfg: &ScenarioConfig) -> ControllerSetup {
    ControllerSetup {
        model: CraneModel::new(cfg.crane.clone(), Arc::new(cfg.base_profile.clone())),
        flow: cfg.model_flow().expect("default flow is valid"),
        target: cfg.target.clone(),
        free_space: cfg.free_space(),
        reference: cfg.reference.clone(),
        ocp: cfg.ocp.clone(),
        barrier: cfg.barrier.clone(),
        mode: cfg.mode,
    }
}

pub fn barrier_system(setup: &ControllerSetup) -> CraneBarrier {
    CraneBarrier { model: setup.model.clone(), flow: setup.flow, target: setup.target.clone() }
}

/// Hanging at rest 0.2 m above the target mouth, with a little swing.
pub fn near_target(setup: &ControllerSetup) -> CraneState {
    let mut x = hanging_state([2.29, 0.0, 0.2], &setup.model.params).expect("reachable");
    x.qdot[3] = 0.1;
    x.qdot[5] = -0.1;
    x
}

pub fn command() -> VelocityCommand {
    VelocityCommand::new(0.1, -0.05, 0.02)
}
