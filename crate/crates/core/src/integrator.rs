//! Fixed-step RK4 sample-and-hold flows.
//!
//! The input is held constant over `[t_k, t_k + T)`. Partial flows are read
//! off the substep grid, so `tau` must be a multiple of `T / substeps`.

use crate::ad::Scalar;
use crate::dynamics::{
    vector_field_generic, CraneModel, CraneState, UncertaintyRealization, VelocityCommand, NU, NX,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    /// Sample period `T` (s).
    pub period: f64,
    /// RK4 substeps per period.
    pub substeps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { period: 1.0 / 30.0, substeps: 4 }
    }
}

impl FlowConfig {
    pub fn new(period: f64, substeps: usize) -> Result<Self> {
        let cfg = Self { period, substeps };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Truth-plant default: same period, 10 substeps.
    pub fn truth(period: f64) -> Self {
        Self { period, substeps: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::InvalidConfig(format!("sample period must be positive, got {}", self.period)));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidConfig("substeps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn substep(&self) -> f64 {
        self.period / self.substeps as f64
    }

    /// Number of substeps covering `tau`, if `tau` lies on the grid in `[0, T]`.
    pub fn grid_index(&self, tau: f64) -> Result<usize> {
        let err = Error::InvalidFlowTime { tau, period: self.period };
        if !(tau >= -1e-12 * self.period && tau <= self.period * (1.0 + 1e-12)) {
            return Err(err);
        }
        let k = tau / self.substep();
        let j = k.round();
        if (k - j).abs() > 1e-9 {
            return Err(err);
        }
        Ok(j as usize)
    }
}

/// Classic RK4 on a time-varying field; returns the states at every substep
/// (`steps + 1` entries, starting with `x0`).
pub fn rk4_trajectory<S, F, const D: usize>(
    mut f: F,
    t0: f64,
    x0: [S; D],
    h: f64,
    steps: usize,
) -> Result<Vec<[S; D]>>
where
    S: Scalar,
    F: FnMut(f64, &[S; D]) -> Result<[S; D]>,
{
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0);
    let mut x = x0;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        x = rk4_step(&mut f, t, &x, h)?;
        if !x.iter().all(|v| v.re().is_finite()) {
            return Err(Error::NonFiniteState { t: t + h });
        }
        out.push(x);
    }
    Ok(out)
}

#[inline]
fn rk4_step<S, F, const D: usize>(f: &mut F, t: f64, x: &[S; D], h: f64) -> Result<[S; D]>
where
    S: Scalar,
    F: FnMut(f64, &[S; D]) -> Result<[S; D]>,
{
    let axpy = |x: &[S; D], k: &[S; D], a: f64| -> [S; D] { std::array::from_fn(|i| x[i] + k[i] * a) };
    let k1 = f(t, x)?;
    let k2 = f(t + 0.5 * h, &axpy(x, &k1, 0.5 * h))?;
    let k3 = f(t + 0.5 * h, &axpy(x, &k2, 0.5 * h))?;
    let k4 = f(t + h, &axpy(x, &k3, h))?;
    Ok(std::array::from_fn(|i| {
        x[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0)
    }))
}

/// Nominal flow over `steps` substeps for any AD scalar.
pub(crate) fn nominal_flow_generic<S: Scalar>(
    model: &CraneModel,
    cfg: &FlowConfig,
    t_k: f64,
    x_k: [S; NX],
    u_k: [S; NU],
    steps: usize,
) -> Result<Vec<[S; NX]>> {
    rk4_trajectory(
        |t, x| vector_field_generic(x, &u_k, &model.base_at(t), &model.params),
        t_k,
        x_k,
        cfg.substep(),
        steps,
    )
}

fn perturbed_trajectory(
    model: &CraneModel,
    cfg: &FlowConfig,
    t_k: f64,
    x_k: &CraneState,
    u_k: &VelocityCommand,
    delta: &UncertaintyRealization,
    steps: usize,
) -> Result<Vec<[f64; NX]>> {
    let u = u_k.to_array();
    rk4_trajectory(
        |t, x| {
            let mut xd = vector_field_generic(x, &u, &model.base_at(t), &model.params)?;
            if !delta.is_zero() {
                let d = delta.checked_eval(t)?;
                for (a, b) in xd.iter_mut().zip(d.iter()) {
                    *a += *b;
                }
            }
            Ok(xd)
        },
        t_k,
        x_k.to_array(),
        cfg.substep(),
        steps,
    )
}

/// Discrete map `F(t_k, x_k, u_k)`.
pub fn step(model: &CraneModel, cfg: &FlowConfig, t_k: f64, x_k: &CraneState, u_k: &VelocityCommand) -> Result<CraneState> {
    partial_flow(model, cfg, t_k, x_k, u_k, cfg.period)
}

/// `F_tau(t_k, x_k, u_k)` for `tau` on the substep grid.
pub fn partial_flow(
    model: &CraneModel,
    cfg: &FlowConfig,
    t_k: f64,
    x_k: &CraneState,
    u_k: &VelocityCommand,
    tau: f64,
) -> Result<CraneState> {
    let j = cfg.grid_index(tau)?;
    let traj = nominal_flow_generic(model, cfg, t_k, x_k.to_array(), u_k.to_array(), j)?;
    Ok(CraneState::from_array(traj[j]))
}

/// `Phi_tau(t_k, x_k, u_k, delta_e)`.
pub fn perturbed_flow(
    model: &CraneModel,
    cfg: &FlowConfig,
    t_k: f64,
    x_k: &CraneState,
    u_k: &VelocityCommand,
    delta: &UncertaintyRealization,
    tau: f64,
) -> Result<CraneState> {
    let j = cfg.grid_index(tau)?;
    let traj = perturbed_trajectory(model, cfg, t_k, x_k, u_k, delta, j)?;
    Ok(CraneState::from_array(traj[j]))
}

/// All substep states of one period: `F_{j T / substeps}` for `j = 0..=substeps`.
/// With a disturbance, the perturbed flow `Phi` is integrated instead.
pub fn flow_grid(
    model: &CraneModel,
    cfg: &FlowConfig,
    t_k: f64,
    x_k: &CraneState,
    u_k: &VelocityCommand,
    delta: Option<&UncertaintyRealization>,
) -> Result<Vec<CraneState>> {
    let traj = match delta {
        None => nominal_flow_generic(model, cfg, t_k, x_k.to_array(), u_k.to_array(), cfg.substeps)?,
        Some(d) => perturbed_trajectory(model, cfg, t_k, x_k, u_k, d, cfg.substeps)?,
    };
    Ok(traj.into_iter().map(CraneState::from_array).collect())
}
