//! Scenario definition, closed-loop simulation, metrics and file export.

mod export;
mod metrics;
mod simulate;

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::barrier::BarrierConfig;
use crate::dynamics::{BaseMotionSample, BaseSignal, CraneParameters, NX};
use crate::error::{Error, Result};
use crate::integrator::FlowConfig;
use crate::mpc::{OcpConfig, ReferenceFrame, ReferenceTrajectory, SafetyMode, Waypoint};
use crate::safety::{FreeSpace, ObstacleSet, SafetyBox, TargetSafetyParams};

pub use export::{export_csv, export_plot, read_csv, PlotKind, CSV_HEADER};
pub use metrics::{compare_nominal_robust, compute_metrics, Comparison, CompareReport, Metrics};
pub use simulate::{run_scenario, run_scenario_with, LogRow, RunOptions, SimulationLog};

/// Largest negative `h_t` still counted as safe along a robust run.
pub const SAFETY_TOLERANCE: f64 = 1e-6;

/// Sinusoidal platform motion: lateral translation plus optional
/// `(yaw, pitch, roll)` oscillations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseMotionProfile {
    /// Amplitude of the lateral (y) displacement (m).
    pub lateral_amplitude: f64,
    /// Frequency of the lateral displacement (Hz).
    pub frequency: f64,
    /// Amplitudes of the yaw, pitch and roll oscillations (rad).
    #[serde(default)]
    pub angular_amplitudes: [f64; 3],
    /// Frequencies of the yaw, pitch and roll oscillations (Hz).
    #[serde(default = "unit_frequencies")]
    pub angular_frequencies: [f64; 3],
}

fn unit_frequencies() -> [f64; 3] {
    [1.0; 3]
}

impl Default for BaseMotionProfile {
    fn default() -> Self {
        Self { lateral_amplitude: 0.05, frequency: 1.0, angular_amplitudes: [0.0; 3], angular_frequencies: [1.0; 3] }
    }
}

impl BaseMotionProfile {
    /// A platform that never moves.
    pub fn still() -> Self {
        Self { lateral_amplitude: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let amps = std::iter::once(self.lateral_amplitude).chain(self.angular_amplitudes);
        let freqs = std::iter::once(self.frequency).chain(self.angular_frequencies);
        for a in amps {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::InvalidConfig(format!("base motion amplitudes must be nonnegative, got {a}")));
            }
        }
        for f in freqs {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::InvalidConfig(format!("base motion frequencies must be positive, got {f}")));
            }
        }
        Ok(())
    }
}

impl BaseSignal for BaseMotionProfile {
    fn sample(&self, t: f64) -> BaseMotionSample {
        base_motion(t, self)
    }
}

/// `a sin(w t)` with its first two derivatives.
fn sinusoid(amp: f64, freq: f64, t: f64) -> (f64, f64, f64) {
    let w = TAU * freq;
    let (s, c) = (w * t).sin_cos();
    (amp * s, amp * w * c, -amp * w * w * s)
}

/// Base pose, rates and accelerations at `t`.
pub fn base_motion(t: f64, profile: &BaseMotionProfile) -> BaseMotionSample {
    let mut b = BaseMotionSample::identity();
    let (p, v, a) = sinusoid(profile.lateral_amplitude, profile.frequency, t);
    b.translation[1] = p;
    b.translation_vel[1] = v;
    b.translation_accel[1] = a;
    for i in 0..3 {
        let (p, v, a) = sinusoid(profile.angular_amplitudes[i], profile.angular_frequencies[i], t);
        b.angles[i] = p;
        b.angle_rates[i] = v;
        b.angle_accels[i] = a;
    }
    b
}

/// Model error injected into the truth plant and noise added to the
/// controller's measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySpec {
    /// Per-state amplitude caps of the additive model error.
    #[serde(with = "crate::serde_array")]
    pub model_error: [f64; NX],
    /// Sinusoids summed per state channel.
    pub model_error_terms: usize,
    /// Frequency band of the model-error sinusoids (Hz).
    pub model_error_band: [f64; 2],
    /// Measurement noise half-width as a fraction of the barrier ball radii.
    pub noise_fraction: f64,
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        let mut model_error = [0.0; NX];
        model_error[..7].fill(0.002);
        model_error[7..10].fill(0.01);
        model_error[10..].fill(0.05);
        Self { model_error, model_error_terms: 3, model_error_band: [0.2, 2.0], noise_fraction: 0.2 }
    }
}

impl UncertaintySpec {
    /// No model error and exact measurements.
    pub fn none() -> Self {
        Self { model_error: [0.0; NX], noise_fraction: 0.0, ..Self::default() }
    }

    pub fn is_none(&self) -> bool {
        self.noise_fraction == 0.0 && self.model_error.iter().all(|a| *a == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.model_error.iter().all(|a| *a >= 0.0 && a.is_finite()) {
            return Err(Error::InvalidConfig("model error amplitudes must be finite and nonnegative".into()));
        }
        if self.model_error_terms == 0 {
            return Err(Error::InvalidConfig("model_error_terms must be at least 1".into()));
        }
        let [lo, hi] = self.model_error_band;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("model error band [{lo}, {hi}] is invalid")));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::InvalidConfig(format!("noise_fraction must lie in [0, 1], got {}", self.noise_fraction)));
        }
        Ok(())
    }
}

/// Tolerances behind the regulation and tracking metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricThresholds {
    /// Payload position error (m).
    pub position: f64,
    /// Payload velocity error (m/s).
    pub velocity: f64,
    /// Squared norm of the rope swing rates (rad^2/s^2).
    pub rope_swing: f64,
    /// Squared norm of the payload swing rates (rad^2/s^2).
    pub payload_swing: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self { position: 0.02, velocity: 0.05, rope_swing: 0.05, payload_swing: 0.05 }
    }
}

/// A complete closed-loop experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Simulated time (s).
    pub duration: f64,
    pub seed: u64,
    pub mode: SafetyMode,
    /// RK4 substeps of the controller's prediction model.
    #[serde(default = "default_model_substeps")]
    pub model_substeps: usize,
    /// RK4 substeps of the truth plant.
    #[serde(default = "default_truth_substeps")]
    pub truth_substeps: usize,
    pub crane: CraneParameters,
    pub base_profile: BaseMotionProfile,
    pub target: TargetSafetyParams,
    /// Nominal payload workspace in the platform frame.
    pub workspace: SafetyBox,
    #[serde(default)]
    pub obstacles: ObstacleSet,
    /// Clearance kept from every obstacle (m).
    #[serde(default)]
    pub obstacle_margin: f64,
    pub reference: ReferenceTrajectory,
    pub uncertainty: UncertaintySpec,
    pub ocp: OcpConfig,
    pub barrier: BarrierConfig,
    #[serde(default)]
    pub thresholds: MetricThresholds,
}

fn default_model_substeps() -> usize {
    4
}

fn default_truth_substeps() -> usize {
    10
}

impl Default for ScenarioConfig {
    /// Hover 0.5 m above the target for 3 s, descend into it over 5 s and
    /// hold, on a platform swaying 0.05 m laterally at 1 Hz.
    fn default() -> Self {
        let target = TargetSafetyParams::default();
        let [tx, ty, tz] = target.target_position;
        let reference = ReferenceTrajectory {
            frame: ReferenceFrame::Platform,
            waypoints: vec![
                Waypoint { t: 0.0, position: [tx, ty, tz + 0.5] },
                Waypoint { t: 3.0, position: [tx, ty, tz + 0.5] },
                Waypoint { t: 8.0, position: [tx, ty, tz - 0.1] },
            ],
        };
        let free_space = FreeSpace::default();
        Self {
            duration: 20.0,
            seed: 1,
            mode: SafetyMode::Robust,
            model_substeps: default_model_substeps(),
            truth_substeps: default_truth_substeps(),
            crane: CraneParameters::default(),
            base_profile: BaseMotionProfile::default(),
            target,
            workspace: free_space.nominal,
            obstacles: free_space.obstacles,
            obstacle_margin: free_space.margin,
            reference,
            uncertainty: UncertaintySpec::default(),
            ocp: OcpConfig::default(),
            barrier: BarrierConfig::default(),
            thresholds: MetricThresholds::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn period(&self) -> f64 {
        self.ocp.period()
    }

    pub fn model_flow(&self) -> Result<FlowConfig> {
        FlowConfig::new(self.period(), self.model_substeps)
    }

    pub fn truth_flow(&self) -> Result<FlowConfig> {
        FlowConfig::new(self.period(), self.truth_substeps)
    }

    pub fn free_space(&self) -> FreeSpace {
        FreeSpace { nominal: self.workspace, obstacles: self.obstacles.clone(), margin: self.obstacle_margin }
    }

    /// Exact model, exact measurements and a zero estimation ball for the margin.
    pub fn without_uncertainty(mut self) -> Self {
        self.uncertainty = UncertaintySpec::none();
        self.barrier.ball_radii = vec![0.0; NX];
        self.barrier.target_radii = [0.0; 3];
        self
    }

    /// Number of control periods in the run.
    pub fn step_count(&self) -> usize {
        (self.duration / self.period()).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidConfig(format!("duration must be positive, got {}", self.duration)));
        }
        self.crane.validate()?;
        self.base_profile.validate()?;
        self.target.validate()?;
        self.free_space().validate()?;
        self.reference.validate()?;
        self.uncertainty.validate()?;
        let flow = self.model_flow()?;
        self.truth_flow()?;
        self.ocp.validate(&flow)?;
        self.barrier.validate(NX, &flow)?;
        if self.step_count() == 0 {
            return Err(Error::InvalidConfig("duration is shorter than one sample period".into()));
        }
        Ok(())
    }
}
