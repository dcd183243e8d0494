//! Robust zero-order barrier condition: the inter-sample gap `Theta`, the
//! one-step margin, and the sampling-based adaptation of the robustness
//! margin `delta_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{CraneModel, CraneState, UncertaintyRealization, VelocityCommand, NX};
use crate::error::{Error, Result};
use crate::integrator::{flow_grid, rk4_trajectory, FlowConfig};
use crate::safety::{target_safety, TargetSafetyParams};

/// A sampled-data system with a scalar safety function, as seen by the barrier.
pub trait SampledSystem<const D: usize>: Sync {
    type Input: Copy + Sync;
    type Disturbance: Sync;

    fn flow(&self) -> &FlowConfig;

    /// Nominal states `F_{jh}` for `j = 0..=substeps`.
    fn nominal_grid(&self, t_k: f64, x: &[f64; D], u: &Self::Input) -> Result<Vec<[f64; D]>>;

    /// Perturbed states `Phi_{jh}` for `j = 0..=substeps`.
    fn perturbed_grid(&self, t_k: f64, x: &[f64; D], u: &Self::Input, d: &Self::Disturbance) -> Result<Vec<[f64; D]>>;

    /// Safety value; `target_offset` perturbs any target the function refers to.
    fn safety(&self, t: f64, x: &[f64; D], target_offset: [f64; 3]) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierConfig {
    /// Slope of the linear class-K function, in (0, 1].
    pub alpha_gain: f64,
    pub sample_count: usize,
    /// Per-state half-widths of the sampling ball.
    pub ball_radii: Vec<f64>,
    /// Half-widths of the target-position uncertainty (m).
    pub target_radii: [f64; 3],
    /// Spacing of the inter-sample grid (s).
    pub tau_step: f64,
    pub rng_seed: u64,
    pub include_alpha_offset: bool,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            alpha_gain: 0.5,
            sample_count: 40,
            ball_radii: default_crane_radii().to_vec(),
            target_radii: [0.03; 3],
            tau_step: 1.0 / 120.0,
            rng_seed: 7,
            include_alpha_offset: false,
        }
    }
}

/// Per-state estimation bounds of the crane.
pub fn default_crane_radii() -> [f64; NX] {
    let deg = std::f64::consts::PI / 180.0;
    [
        2.0 * deg,
        2.0 * deg,
        0.04,
        0.03,
        0.03,
        2.0 * deg,
        2.0 * deg,
        3.0 * deg,
        3.0 * deg,
        0.08,
        4.0 * deg,
        4.0 * deg,
        4.0 * deg,
        4.0 * deg,
    ]
}

impl BarrierConfig {
    pub fn validate(&self, dim: usize, flow: &FlowConfig) -> Result<()> {
        if !(self.alpha_gain > 0.0 && self.alpha_gain <= 1.0) {
            return Err(Error::InvalidConfig(format!("alpha_gain must lie in (0, 1], got {}", self.alpha_gain)));
        }
        if self.sample_count == 0 {
            return Err(Error::InvalidConfig("sample_count must be at least 1".into()));
        }
        if self.ball_radii.len() != dim {
            return Err(Error::Dimension(format!("ball_radii has {} entries, expected {dim}", self.ball_radii.len())));
        }
        if !self.ball_radii.iter().chain(self.target_radii.iter()).all(|r| *r >= 0.0 && r.is_finite()) {
            return Err(Error::InvalidConfig("ball radii must be finite and nonnegative".into()));
        }
        self.tau_stride(flow).map(|_| ())
    }

    /// Number of substeps per grid point; errors unless `tau_step` divides `T`
    /// on the substep grid.
    pub fn tau_stride(&self, flow: &FlowConfig) -> Result<usize> {
        let err = || Error::InvalidConfig(format!("tau_step {} must be a substep multiple dividing T", self.tau_step));
        if !(self.tau_step > 0.0) {
            return Err(err());
        }
        let stride = flow.grid_index(self.tau_step).map_err(|_| err())?;
        if stride == 0 || !flow.substeps.is_multiple_of(stride) {
            return Err(err());
        }
        Ok(stride)
    }

    /// Inter-sample grid `{tau_step, 2 tau_step, ..., T}` as substep indices.
    pub fn tau_indices(&self, flow: &FlowConfig) -> Result<Vec<usize>> {
        let stride = self.tau_stride(flow)?;
        Ok((1..=flow.substeps / stride).map(|k| k * stride).collect())
    }
}

/// `alpha(r) = gain * r`.
pub fn class_k(r: f64, gain: f64) -> f64 {
    gain * r
}

/// One point of the sampling ball.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallSample<const D: usize> {
    pub state: [f64; D],
    pub target_offset: [f64; 3],
}

/// `n` seeded samples from the box `|x~ - x|_j <= radii_j`. When `n >= 2 D`
/// the axis extremes `x +- radii_j e_j` come first; the remaining samples are
/// uniform in the box, with a uniform target offset.
pub fn sample_ball<const D: usize>(
    x: &[f64; D],
    radii: &[f64],
    target_radii: &[f64; 3],
    n: usize,
    seed: u64,
) -> Result<Vec<BallSample<D>>> {
    if radii.len() != D {
        return Err(Error::Dimension(format!("ball_radii has {} entries, expected {D}", radii.len())));
    }
    let mut out = Vec::with_capacity(n);
    if n >= 2 * D {
        for j in 0..D {
            for sign in [1.0, -1.0] {
                let mut s = *x;
                s[j] += sign * radii[j];
                out.push(BallSample { state: s, target_offset: [0.0; 3] });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < n {
        let state: [f64; D] = std::array::from_fn(|j| x[j] + radii[j] * rng.random_range(-1.0..=1.0));
        let target_offset: [f64; 3] = std::array::from_fn(|j| target_radii[j] * rng.random_range(-1.0..=1.0));
        out.push(BallSample { state, target_offset });
    }
    Ok(out)
}

/// Adapted robustness margin and the sample that set it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaResult {
    pub delta: f64,
    pub worst_sample_index: usize,
    pub worst_tau: f64,
}

impl DeltaResult {
    pub fn zero() -> Self {
        Self { delta: 0.0, worst_sample_index: 0, worst_tau: 0.0 }
    }
}

/// `Theta = h(t_k + T, F_T) - min_tau h(t_k + tau, Phi_tau)` over the `tau` grid.
pub fn theta_gap<Sys: SampledSystem<D>, const D: usize>(
    sys: &Sys,
    t_k: f64,
    x_k: &[f64; D],
    u: &Sys::Input,
    disturbance: &Sys::Disturbance,
    cfg: &BarrierConfig,
) -> Result<f64> {
    let flow = sys.flow();
    let taus = cfg.tau_indices(flow)?;
    let h = flow.substep();
    let nominal = sys.nominal_grid(t_k, x_k, u)?;
    let end = sys.safety(t_k + flow.period, &nominal[flow.substeps], [0.0; 3]);
    let perturbed = sys.perturbed_grid(t_k, x_k, u, disturbance)?;
    let worst = taus
        .iter()
        .map(|&j| sys.safety(t_k + j as f64 * h, &perturbed[j], [0.0; 3]))
        .fold(f64::INFINITY, f64::min);
    Ok(end - worst)
}

/// `h(t_{k+1}, F) - h(t_k, x_k) - delta_t + alpha(h(t_k, x_k))`; nonnegative
/// exactly when the barrier condition holds.
pub fn rzocbf_margin<Sys: SampledSystem<D>, const D: usize>(
    sys: &Sys,
    t_k: f64,
    x_k: &[f64; D],
    u_k: &Sys::Input,
    delta_t: f64,
    cfg: &BarrierConfig,
) -> Result<f64> {
    let flow = sys.flow();
    let next = sys.nominal_grid(t_k, x_k, u_k)?[flow.substeps];
    let h_now = sys.safety(t_k, x_k, [0.0; 3]);
    let h_next = sys.safety(t_k + flow.period, &next, [0.0; 3]);
    Ok(h_next - h_now - delta_t + class_k(h_now, cfg.alpha_gain))
}

/// Sampling-based `delta_t`: the largest gap between the nominal endpoint
/// safety and the safety along the flows of the ball samples, plus the
/// optional alpha offset, clamped at zero. Ties go to the lowest sample index,
/// then the lowest `tau`.
pub fn adapt_delta<Sys: SampledSystem<D>, const D: usize>(
    sys: &Sys,
    t_k: f64,
    x_k: &[f64; D],
    u_prev: &Sys::Input,
    cfg: &BarrierConfig,
) -> Result<DeltaResult> {
    let samples = sample_ball(x_k, &cfg.ball_radii, &cfg.target_radii, cfg.sample_count, cfg.rng_seed)?;
    adapt_delta_over(sys, t_k, x_k, u_prev, cfg, &samples)
}

/// [`adapt_delta`] over an explicit sample list.
pub fn adapt_delta_over<Sys: SampledSystem<D>, const D: usize>(
    sys: &Sys,
    t_k: f64,
    x_k: &[f64; D],
    u_prev: &Sys::Input,
    cfg: &BarrierConfig,
    samples: &[BallSample<D>],
) -> Result<DeltaResult> {
    let flow = sys.flow();
    let taus = cfg.tau_indices(flow)?;
    let h = flow.substep();
    let reference = sys.safety(t_k + flow.period, &sys.nominal_grid(t_k, x_k, u_prev)?[flow.substeps], [0.0; 3]);

    let per_sample: Vec<(f64, usize)> = samples
        .par_iter()
        .map(|s| -> Result<(f64, usize)> {
            let grid = sys.nominal_grid(t_k, &s.state, u_prev)?;
            let mut best = (f64::NEG_INFINITY, taus[0]);
            for &j in &taus {
                let gap = reference - sys.safety(t_k + j as f64 * h, &grid[j], s.target_offset);
                if gap > best.0 {
                    best = (gap, j);
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;

    let mut worst = (f64::NEG_INFINITY, 0, taus[0]);
    for (i, (gap, j)) in per_sample.into_iter().enumerate() {
        if gap > worst.0 {
            worst = (gap, i, j);
        }
    }
    let offset = if cfg.include_alpha_offset {
        class_k(sys.safety(t_k, x_k, [0.0; 3]), cfg.alpha_gain)
    } else {
        0.0
    };
    Ok(DeltaResult { delta: (worst.0 + offset).max(0.0), worst_sample_index: worst.1, worst_tau: worst.2 as f64 * h })
}

/// The crane with the target function as its barrier.
#[derive(Clone, Debug)]
pub struct CraneBarrier {
    pub model: CraneModel,
    pub flow: FlowConfig,
    pub target: TargetSafetyParams,
}

impl SampledSystem<NX> for CraneBarrier {
    type Input = VelocityCommand;
    type Disturbance = UncertaintyRealization;

    fn flow(&self) -> &FlowConfig {
        &self.flow
    }

    fn nominal_grid(&self, t_k: f64, x: &[f64; NX], u: &VelocityCommand) -> Result<Vec<[f64; NX]>> {
        let g = flow_grid(&self.model, &self.flow, t_k, &CraneState::from_array(*x), u, None)?;
        Ok(g.iter().map(CraneState::to_array).collect())
    }

    fn perturbed_grid(
        &self,
        t_k: f64,
        x: &[f64; NX],
        u: &VelocityCommand,
        d: &UncertaintyRealization,
    ) -> Result<Vec<[f64; NX]>> {
        let g = flow_grid(&self.model, &self.flow, t_k, &CraneState::from_array(*x), u, Some(d))?;
        Ok(g.iter().map(CraneState::to_array).collect())
    }

    fn safety(&self, t: f64, x: &[f64; NX], target_offset: [f64; 3]) -> f64 {
        target_safety(t, &CraneState::from_array(*x), &self.target, &self.model, target_offset)
    }
}

/// Bounded disturbance on the double integrator's acceleration channel.
pub type ScalarDisturbance = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// `p'' = u + d(t)` with safety `h = limit - p - velocity_weight * v`.
#[derive(Clone, Debug)]
pub struct DoubleIntegrator {
    pub flow: FlowConfig,
    pub limit: f64,
    pub velocity_weight: f64,
}

impl DoubleIntegrator {
    fn grid(&self, t_k: f64, x: &[f64; 2], u: f64, d: Option<&ScalarDisturbance>) -> Result<Vec<[f64; 2]>> {
        rk4_trajectory(
            |t, x: &[f64; 2]| Ok([x[1], u + d.map_or(0.0, |d| d(t))]),
            t_k,
            *x,
            self.flow.substep(),
            self.flow.substeps,
        )
    }
}

impl SampledSystem<2> for DoubleIntegrator {
    type Input = f64;
    type Disturbance = ScalarDisturbance;

    fn flow(&self) -> &FlowConfig {
        &self.flow
    }

    fn nominal_grid(&self, t_k: f64, x: &[f64; 2], u: &f64) -> Result<Vec<[f64; 2]>> {
        self.grid(t_k, x, *u, None)
    }

    fn perturbed_grid(&self, t_k: f64, x: &[f64; 2], u: &f64, d: &ScalarDisturbance) -> Result<Vec<[f64; 2]>> {
        self.grid(t_k, x, *u, Some(d))
    }

    fn safety(&self, _t: f64, x: &[f64; 2], target_offset: [f64; 3]) -> f64 {
        self.limit + target_offset[0] - x[0] - self.velocity_weight * x[1]
    }
}
