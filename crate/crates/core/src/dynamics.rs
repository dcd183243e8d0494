//! Kinematics, energies and the control-affine vector field of the
//! velocity-actuated crane on a moving base.
//!
//! Frames: the inertial frame sits at the undisturbed base. The platform frame
//! is the inertial frame moved by the measured base pose (translation plus
//! yaw-pitch-roll rotation). The pan/tilt axis sits at `base_height` above the
//! platform origin; with `beta = theta = 0` the boom points along +x. The
//! tether and the payload hang from the boom tip, each deflected from the
//! platform's downward vertical by an intrinsic roll-then-pitch rotation.
//!
//! Mass model: the boom is a uniform slender rod, the tether is massless and
//! rigid, the payload is a uniform solid cylinder. Each rigid body is replaced
//! by point masses with identical mass, centroid and second-moment tensor, so
//! kinetic energy is exactly `1/2 sum m_i |p_i'|^2`.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::ad::{Jet2, Scalar};
use crate::error::{Error, Result};

/// Number of generalized coordinates.
pub const NQ: usize = 7;
/// State dimension `(q, qdot)`.
pub const NX: usize = 14;
/// Number of velocity commands.
pub const NU: usize = 3;

const N_BOOM_POINTS: usize = 2;
const N_PAYLOAD_POINTS: usize = 6;
const N_POINTS: usize = N_BOOM_POINTS + N_PAYLOAD_POINTS;

pub type Matrix7 = SMatrix<f64, 7, 7>;
pub type Vector3 = SVector<f64, 3>;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneralizedCoordinates {
    pub beta: f64,
    pub theta: f64,
    pub tether_len: f64,
    pub rope_roll: f64,
    pub rope_pitch: f64,
    pub payload_roll: f64,
    pub payload_pitch: f64,
}

impl GeneralizedCoordinates {
    pub fn to_array(&self) -> [f64; NQ] {
        [
            self.beta,
            self.theta,
            self.tether_len,
            self.rope_roll,
            self.rope_pitch,
            self.payload_roll,
            self.payload_pitch,
        ]
    }

    pub fn from_array(a: [f64; NQ]) -> Self {
        Self {
            beta: a[0],
            theta: a[1],
            tether_len: a[2],
            rope_roll: a[3],
            rope_pitch: a[4],
            payload_roll: a[5],
            payload_pitch: a[6],
        }
    }

    /// `(beta, theta, tether_len)`
    pub fn actuated(&self) -> [f64; 3] {
        [self.beta, self.theta, self.tether_len]
    }

    /// `(rope_roll, rope_pitch, payload_roll, payload_pitch)`
    pub fn passive(&self) -> [f64; 4] {
        [self.rope_roll, self.rope_pitch, self.payload_roll, self.payload_pitch]
    }
}

/// Full state `x = (q, qdot)`. Rates are ordered like [`GeneralizedCoordinates`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CraneState {
    pub q: GeneralizedCoordinates,
    pub qdot: [f64; NQ],
}

impl CraneState {
    pub fn at_rest(q: GeneralizedCoordinates) -> Self {
        Self { q, qdot: [0.0; NQ] }
    }

    pub fn to_array(&self) -> [f64; NX] {
        let mut x = [0.0; NX];
        x[..NQ].copy_from_slice(&self.q.to_array());
        x[NQ..].copy_from_slice(&self.qdot);
        x
    }

    pub fn from_array(x: [f64; NX]) -> Self {
        let mut q = [0.0; NQ];
        let mut qdot = [0.0; NQ];
        q.copy_from_slice(&x[..NQ]);
        qdot.copy_from_slice(&x[NQ..]);
        Self { q: GeneralizedCoordinates::from_array(q), qdot }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        let mut a = [0.0; NX];
        a.copy_from_slice(&x[..NX]);
        Self::from_array(a)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Actuated joint rates `(beta_dot, theta_dot, tether_len_dot)`.
    pub fn actuated_rates(&self) -> [f64; 3] {
        [self.qdot[0], self.qdot[1], self.qdot[2]]
    }

    /// `(rope_roll_dot, rope_pitch_dot)`
    pub fn rope_swing_rates(&self) -> [f64; 2] {
        [self.qdot[3], self.qdot[4]]
    }

    /// `(payload_roll_dot, payload_pitch_dot)`
    pub fn payload_swing_rates(&self) -> [f64; 2] {
        [self.qdot[5], self.qdot[6]]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VelocityCommand {
    pub yaw_rate: f64,
    pub pitch_rate: f64,
    pub tether_rate: f64,
}

impl VelocityCommand {
    pub fn new(yaw_rate: f64, pitch_rate: f64, tether_rate: f64) -> Self {
        Self { yaw_rate, pitch_rate, tether_rate }
    }

    pub fn to_array(&self) -> [f64; NU] {
        [self.yaw_rate, self.pitch_rate, self.tether_rate]
    }

    pub fn from_array(a: [f64; NU]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

/// Measured base motion at one instant. Angles are `(yaw, pitch, roll)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BaseMotionSample {
    pub angles: [f64; 3],
    pub angle_rates: [f64; 3],
    pub angle_accels: [f64; 3],
    pub translation: [f64; 3],
    pub translation_vel: [f64; 3],
    pub translation_accel: [f64; 3],
}

impl BaseMotionSample {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        [
            self.angles,
            self.angle_rates,
            self.angle_accels,
            self.translation,
            self.translation_vel,
            self.translation_accel,
        ]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
    }

    /// Maps a platform-frame point into the inertial frame.
    pub fn to_inertial(&self, p: [f64; 3]) -> [f64; 3] {
        let pose = BasePose::<f64>::from_sample(self);
        pose.apply(&p)
    }

    /// Platform rotation matrix (platform to inertial).
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        rot_zyx(self.angles[0], self.angles[1], self.angles[2])
    }
}

/// A continuous-time base motion signal, evaluable at any `t`.
pub trait BaseSignal: Send + Sync {
    fn sample(&self, t: f64) -> BaseMotionSample;
}

/// A base that never moves.
#[derive(Clone, Copy, Debug, Default)]
pub struct StaticBase;

impl BaseSignal for StaticBase {
    fn sample(&self, _t: f64) -> BaseMotionSample {
        BaseMotionSample::identity()
    }
}

impl<F: Fn(f64) -> BaseMotionSample + Send + Sync> BaseSignal for F {
    fn sample(&self, t: f64) -> BaseMotionSample {
        self(t)
    }
}

/// Component-wise box `lower <= v <= upper`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBounds<const N: usize> {
    #[serde(with = "crate::serde_array")]
    pub lower: [f64; N],
    #[serde(with = "crate::serde_array")]
    pub upper: [f64; N],
}

impl<const N: usize> BoxBounds<N> {
    pub fn contains(&self, v: &[f64; N]) -> bool {
        v.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    pub fn clamp(&self, v: [f64; N]) -> [f64; N] {
        let mut out = v;
        for i in 0..N {
            out[i] = v[i].clamp(self.lower[i], self.upper[i]);
        }
        out
    }

    fn validate(&self, what: &str) -> Result<()> {
        for i in 0..N {
            if !(self.lower[i] <= self.upper[i]) || self.lower[i].is_nan() {
                return Err(Error::InvalidConfig(format!(
                    "{what} bound {i} is empty: [{}, {}]",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CraneParameters {
    pub boom_len: f64,
    pub base_height: f64,
    pub boom_mass: f64,
    pub payload_mass: f64,
    pub payload_len: f64,
    pub payload_radius: f64,
    /// `(sigma_beta, sigma_theta, sigma_L)`
    pub actuator_time_constants: [f64; 3],
    pub input_bounds: BoxBounds<NU>,
    pub state_bounds: BoxBounds<NX>,
    pub gravity: f64,
}

impl Default for CraneParameters {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        let inf = f64::INFINITY;
        let mut lower = [-inf; NX];
        let mut upper = [inf; NX];
        let q_lo = [-180.0 * deg, -20.0 * deg, 0.2, -60.0 * deg, -60.0 * deg, -60.0 * deg, -60.0 * deg];
        let q_hi = [180.0 * deg, 80.0 * deg, 2.5, 60.0 * deg, 60.0 * deg, 60.0 * deg, 60.0 * deg];
        lower[..NQ].copy_from_slice(&q_lo);
        upper[..NQ].copy_from_slice(&q_hi);
        Self {
            boom_len: 2.4384,
            base_height: 1.0,
            boom_mass: 2.0,
            payload_mass: 0.5,
            payload_len: 0.6,
            payload_radius: 0.02,
            actuator_time_constants: [0.1; 3],
            input_bounds: BoxBounds { lower: [-0.5; NU], upper: [0.5; NU] },
            state_bounds: BoxBounds { lower, upper },
            gravity: 9.81,
        }
    }
}

impl CraneParameters {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("boom_len", self.boom_len),
            ("boom_mass", self.boom_mass),
            ("payload_mass", self.payload_mass),
            ("payload_len", self.payload_len),
            ("payload_radius", self.payload_radius),
            ("sigma_beta", self.actuator_time_constants[0]),
            ("sigma_theta", self.actuator_time_constants[1]),
            ("sigma_L", self.actuator_time_constants[2]),
            ("gravity", self.gravity),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.base_height.is_finite() {
            return Err(Error::InvalidConfig("base_height must be finite".into()));
        }
        self.input_bounds.validate("input")?;
        self.state_bounds.validate("state")?;
        Ok(())
    }

    fn point_masses(&self) -> [f64; N_POINTS] {
        let mb = self.boom_mass / N_BOOM_POINTS as f64;
        let mp = self.payload_mass / N_PAYLOAD_POINTS as f64;
        [mb, mb, mp, mp, mp, mp, mp, mp]
    }
}

/// Sinusoidal component `amp * sin(2 pi freq t + phase)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sinusoid {
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn eval(&self, t: f64) -> f64 {
        self.amp * (2.0 * std::f64::consts::PI * self.freq * t + self.phase).sin()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DisturbanceSignal {
    Zero,
    Constant([f64; NX]),
    /// Per-state sums of sinusoids.
    Sinusoids(Vec<Vec<Sinusoid>>),
}

/// Additive model error `delta_e(t)` with its infinity-norm cap.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyRealization {
    pub signal: DisturbanceSignal,
    pub bound: f64,
}

impl UncertaintyRealization {
    pub fn zero() -> Self {
        Self { signal: DisturbanceSignal::Zero, bound: 0.0 }
    }

    pub fn constant(value: [f64; NX], bound: f64) -> Self {
        Self { signal: DisturbanceSignal::Constant(value), bound }
    }

    /// Each state channel is a sum of `terms` sinusoids with random phase and
    /// frequency in `[f_lo, f_hi]` Hz, scaled so `|delta_i(t)| <= amplitudes[i]`.
    pub fn sinusoidal(amplitudes: [f64; NX], terms: usize, f_lo: f64, f_hi: f64, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let terms = terms.max(1);
        let channels = amplitudes
            .iter()
            .map(|&a| {
                (0..terms)
                    .map(|_| Sinusoid {
                        amp: a / terms as f64,
                        freq: rng.random_range(f_lo..=f_hi),
                        phase: rng.random_range(0.0..2.0 * std::f64::consts::PI),
                    })
                    .collect()
            })
            .collect();
        let bound = amplitudes.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
        Self { signal: DisturbanceSignal::Sinusoids(channels), bound }
    }

    pub fn eval(&self, t: f64) -> [f64; NX] {
        match &self.signal {
            DisturbanceSignal::Zero => [0.0; NX],
            DisturbanceSignal::Constant(c) => *c,
            DisturbanceSignal::Sinusoids(ch) => {
                let mut out = [0.0; NX];
                for (o, terms) in out.iter_mut().zip(ch.iter()) {
                    *o = terms.iter().map(|s| s.eval(t)).sum();
                }
                out
            }
        }
    }

    /// Evaluates `delta_e(t)` and rejects values above the bound.
    pub fn checked_eval(&self, t: f64) -> Result<[f64; NX]> {
        let d = self.eval(t);
        let norm = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        // Sums of sinusoids can touch the cap up to rounding.
        if norm > self.bound * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::DisturbanceBound { t, norm, bound: self.bound });
        }
        Ok(d)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.signal, DisturbanceSignal::Zero)
    }
}

// ---------------------------------------------------------------------------
// Kinematic chain, generic over the AD scalar.

pub(crate) fn rot_zyx<S: Scalar>(yaw: S, pitch: S, roll: S) -> [[S; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BasePose<S> {
    rot: [[S; 3]; 3],
    trans: [S; 3],
}

impl<S: Scalar> BasePose<S> {
    pub(crate) fn new(angles: [S; 3], trans: [S; 3]) -> Self {
        Self { rot: rot_zyx(angles[0], angles[1], angles[2]), trans }
    }

    /// Frozen at the sample's instant (no time derivatives).
    pub(crate) fn from_sample(b: &BaseMotionSample) -> Self {
        Self::new(b.angles.map(S::cst), b.translation.map(S::cst))
    }

    pub(crate) fn apply(&self, p: &[S; 3]) -> [S; 3] {
        let r = &self.rot;
        [
            self.trans[0] + r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            self.trans[1] + r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            self.trans[2] + r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }
}

/// Base pose as a quadratic curve in time around the sample's instant.
fn base_pose_jet<S: Scalar>(b: &BaseMotionSample) -> BasePose<Jet2<S>> {
    let jet = |v: f64, d: f64, dd: f64| Jet2::new(S::cst(v), S::cst(d), S::cst(dd));
    let angles = [0, 1, 2].map(|i| jet(b.angles[i], b.angle_rates[i], b.angle_accels[i]));
    let trans = [0, 1, 2].map(|i| jet(b.translation[i], b.translation_vel[i], b.translation_accel[i]));
    BasePose::new(angles, trans)
}

#[inline]
fn add3<S: Scalar>(a: [S; 3], b: [S; 3]) -> [S; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn scale3<S: Scalar>(a: [S; 3], s: S) -> [S; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

struct PlatformChain<S> {
    tip: [S; 3],
    boom_points: [[S; 3]; N_BOOM_POINTS],
    payload_points: [[S; 3]; N_PAYLOAD_POINTS],
    bottom: [S; 3],
}

/// Positions in the platform frame. `with_masses = false` skips the point
/// masses and only produces tip and payload bottom.
fn platform_chain<S: Scalar>(q: &[S; NQ], p: &CraneParameters, with_masses: bool) -> PlatformChain<S> {
    let (sb, cb) = q[0].sin_cos();
    let (st, ct) = q[1].sin_cos();
    let boom_dir = [cb * ct, sb * ct, st];
    let pan = [S::zero(), S::zero(), S::cst(p.base_height)];
    let tip = add3(pan, scale3(boom_dir, S::cst(p.boom_len)));

    let (sfr, cfr) = q[3].sin_cos();
    let (str_, ctr) = q[4].sin_cos();
    let rope_dir = [-str_, sfr * ctr, -(cfr * ctr)];
    let rope_end = add3(tip, scale3(rope_dir, q[2]));

    let (sfp, cfp) = q[5].sin_cos();
    let (stp, ctp) = q[6].sin_cos();
    let axis_down = [-stp, sfp * ctp, -(cfp * ctp)];
    let bottom = add3(rope_end, scale3(axis_down, S::cst(p.payload_len)));

    let mut boom_points = [[S::zero(); 3]; N_BOOM_POINTS];
    let mut payload_points = [[S::zero(); 3]; N_PAYLOAD_POINTS];
    if with_masses {
        let half = 0.5 * p.boom_len;
        let off = p.boom_len / (2.0 * 3f64.sqrt());
        boom_points[0] = add3(pan, scale3(boom_dir, S::cst(half - off)));
        boom_points[1] = add3(pan, scale3(boom_dir, S::cst(half + off)));

        let ex = [ctp, sfp * stp, -(cfp * stp)];
        let ey = [S::zero(), cfp, sfp];
        let com = add3(rope_end, scale3(axis_down, S::cst(0.5 * p.payload_len)));
        let sr = S::cst(0.5 * 3f64.sqrt() * p.payload_radius);
        payload_points[0] = rope_end;
        payload_points[1] = bottom;
        payload_points[2] = add3(com, scale3(ex, sr));
        payload_points[3] = add3(com, scale3(ex, -sr));
        payload_points[4] = add3(com, scale3(ey, sr));
        payload_points[5] = add3(com, scale3(ey, -sr));
    }
    PlatformChain { tip, boom_points, payload_points, bottom }
}

fn all_points<S: Scalar>(c: &PlatformChain<S>) -> [[S; 3]; N_POINTS] {
    let mut out = [[S::zero(); 3]; N_POINTS];
    out[..N_BOOM_POINTS].copy_from_slice(&c.boom_points);
    out[N_BOOM_POINTS..].copy_from_slice(&c.payload_points);
    out
}

/// Payload bottom in the inertial frame for a frozen base pose.
pub(crate) fn payload_bottom_generic<S: Scalar>(q: &[S; NQ], base: &BaseMotionSample, p: &CraneParameters) -> [S; 3] {
    let chain = platform_chain(q, p, false);
    BasePose::<S>::from_sample(base).apply(&chain.bottom)
}

/// Payload bottom position and inertial velocity.
pub(crate) fn payload_pos_vel_generic<S: Scalar>(
    x: &[S; NX],
    base: &BaseMotionSample,
    p: &CraneParameters,
) -> ([S; 3], [S; 3]) {
    let q: [Jet2<S>; NQ] = std::array::from_fn(|i| Jet2::new(x[i], x[NQ + i], S::zero()));
    let chain = platform_chain(&q, p, false);
    let w = base_pose_jet::<S>(base).apply(&chain.bottom);
    (w.map(|c| c.v), w.map(|c| c.d))
}

/// Jacobians of all point masses w.r.t. `q` in the platform frame.
fn point_jacobians<S: Scalar>(q: &[S; NQ], p: &CraneParameters) -> [[[S; NQ]; 3]; N_POINTS] {
    let (sb, cb) = q[0].sin_cos();
    let (st, ct) = q[1].sin_cos();
    let (sfr, cfr) = q[3].sin_cos();
    let (str_, ctr) = q[4].sin_cos();
    let (sfp, cfp) = q[5].sin_cos();
    let (stp, ctp) = q[6].sin_cos();
    let len = q[2];

    let boom_b = [-(sb * ct), cb * ct, S::zero()];
    let boom_t = [-(cb * st), -(sb * st), ct];
    let rope = [-str_, sfr * ctr, -(cfr * ctr)];
    let rope_f = [S::zero(), cfr * ctr * len, sfr * ctr * len];
    let rope_t = [-ctr * len, -(sfr * str_) * len, cfr * str_ * len];
    let axis_f = [S::zero(), cfp * ctp, sfp * ctp];
    let axis_t = [-ctp, -(sfp * stp), cfp * stp];
    let ex_f = [S::zero(), cfp * stp, sfp * stp];
    let ex_t = [-stp, sfp * ctp, -(cfp * ctp)];
    let ey_f = [S::zero(), -sfp, cfp];
    let ey_t = [S::zero(); 3];

    let mut jac = [[[S::zero(); NQ]; 3]; N_POINTS];
    let half = 0.5 * p.boom_len;
    let off = p.boom_len / (2.0 * 3f64.sqrt());
    for (j, k) in jac.iter_mut().zip([half - off, half + off]) {
        for a in 0..3 {
            j[a][0] = boom_b[a] * k;
            j[a][1] = boom_t[a] * k;
        }
    }
    // Offsets of each payload point along the payload axis and along the
    // two transverse axes.
    let sr = 0.5 * 3f64.sqrt() * p.payload_radius;
    let mid = 0.5 * p.payload_len;
    let offsets = [(0.0, 0.0, 0.0), (p.payload_len, 0.0, 0.0), (mid, sr, 0.0), (mid, -sr, 0.0), (mid, 0.0, sr), (mid, 0.0, -sr)];
    for (j, (ka, kx, ky)) in jac[N_BOOM_POINTS..].iter_mut().zip(offsets) {
        for a in 0..3 {
            j[a][0] = boom_b[a] * p.boom_len;
            j[a][1] = boom_t[a] * p.boom_len;
            j[a][2] = rope[a];
            j[a][3] = rope_f[a];
            j[a][4] = rope_t[a];
            j[a][5] = axis_f[a] * ka + ex_f[a] * kx + ey_f[a] * ky;
            j[a][6] = axis_t[a] * ka + ex_t[a] * kx + ey_t[a] * ky;
        }
    }
    jac
}

/// Inertial velocities and "bias" accelerations (acceleration with `qddot = 0`)
/// of all point masses.
fn point_rates<S: Scalar>(
    x: &[S; NX],
    base: &BaseMotionSample,
    p: &CraneParameters,
) -> ([[S; 3]; N_POINTS], [[S; 3]; N_POINTS], [[S; 3]; N_POINTS]) {
    let q: [Jet2<S>; NQ] = std::array::from_fn(|i| Jet2::new(x[i], x[NQ + i], S::zero()));
    let chain = platform_chain(&q, p, true);
    let pose = base_pose_jet::<S>(base);
    let pts = all_points(&chain);
    let mut pos = [[S::zero(); 3]; N_POINTS];
    let mut vel = [[S::zero(); 3]; N_POINTS];
    let mut acc = [[S::zero(); 3]; N_POINTS];
    for i in 0..N_POINTS {
        let w = pose.apply(&pts[i]);
        for a in 0..3 {
            pos[i][a] = w[a].v;
            vel[i][a] = w[a].d;
            acc[i][a] = w[a].dd;
        }
    }
    (pos, vel, acc)
}

/// Mass matrix and bias forces restricted to the points in `range`.
/// `H = sum m_i J_i^T (b_i + g e_z)` is the Euler-Lagrange bias for a particle
/// system whose positions depend on `q` and time. Entries of `H` above
/// `first_row` and of the leading `first_row` square block of `D` are left zero.
fn lagrange_terms<S: Scalar>(
    x: &[S; NX],
    base: &BaseMotionSample,
    p: &CraneParameters,
    range: std::ops::Range<usize>,
    first_row: usize,
) -> ([[S; NQ]; NQ], [S; NQ]) {
    let q: [S; NQ] = std::array::from_fn(|i| x[i]);
    let jac = point_jacobians(&q, p);
    let (_, _, acc) = point_rates(x, base, p);
    let rot = base.rotation();
    let masses = p.point_masses();
    let mut d = [[S::zero(); NQ]; NQ];
    let mut h = [S::zero(); NQ];
    for i in range {
        let m = masses[i];
        let j = &jac[i];
        let fi = [acc[i][0] * m, acc[i][1] * m, (acc[i][2] + p.gravity) * m];
        let f: [S; 3] = std::array::from_fn(|b| fi[0] * rot[0][b] + fi[1] * rot[1][b] + fi[2] * rot[2][b]);
        for r in 0..NQ {
            if r >= first_row {
                h[r] += j[0][r] * f[0] + j[1][r] * f[1] + j[2][r] * f[2];
            }
            for c in r.max(first_row)..NQ {
                let v = (j[0][r] * j[0][c] + j[1][r] * j[1][c] + j[2][r] * j[2][c]) * m;
                d[r][c] += v;
            }
        }
    }
    for r in 0..NQ {
        for c in 0..r {
            d[r][c] = d[c][r];
        }
    }
    (d, h)
}

/// Solves the symmetric positive definite system `A y = b` by LDL^T.
fn solve_spd<S: Scalar, const N: usize>(a: &[[S; N]; N], b: &[S; N]) -> Option<[S; N]> {
    let mut l = [[S::zero(); N]; N];
    let mut dg = [S::zero(); N];
    for i in 0..N {
        let mut di = a[i][i];
        for k in 0..i {
            di -= l[i][k] * l[i][k] * dg[k];
        }
        if !(di.re() > 1e-14) {
            return None;
        }
        dg[i] = di;
        for j in (i + 1)..N {
            let mut v = a[j][i];
            for k in 0..i {
                v -= l[j][k] * l[i][k] * dg[k];
            }
            l[j][i] = v / di;
        }
    }
    let mut y = *b;
    for i in 0..N {
        for k in 0..i {
            let t = l[i][k] * y[k];
            y[i] -= t;
        }
    }
    for i in 0..N {
        y[i] = y[i] / dg[i];
    }
    for i in (0..N).rev() {
        for k in (i + 1)..N {
            let t = l[k][i] * y[k];
            y[i] -= t;
        }
    }
    Some(y)
}

/// `xdot = f(t, x) + g(x) u` for any AD scalar. The actuated block follows
/// `sigma qddot_1 + qdot_1 = u`; the passive block solves
/// `D22 qddot_2 = -H2 - D21 qddot_1`.
pub(crate) fn vector_field_generic<S: Scalar>(
    x: &[S; NX],
    u: &[S; NU],
    base: &BaseMotionSample,
    p: &CraneParameters,
) -> Result<[S; NX]> {
    // The boom depends on q1 only, so it does not enter the passive rows.
    let (d, h) = lagrange_terms(x, base, p, N_BOOM_POINTS..N_POINTS, 3);
    let mut xdot = [S::zero(); NX];
    xdot[..NQ].copy_from_slice(&x[NQ..]);
    let mut qdd1 = [S::zero(); 3];
    for i in 0..3 {
        qdd1[i] = (u[i] - x[NQ + i]) / p.actuator_time_constants[i];
    }
    let mut d22 = [[S::zero(); 4]; 4];
    let mut rhs = [S::zero(); 4];
    for r in 0..4 {
        for c in 0..4 {
            d22[r][c] = d[3 + r][3 + c];
        }
        let mut v = -h[3 + r];
        for c in 0..3 {
            v -= d[3 + r][c] * qdd1[c];
        }
        rhs[r] = v;
    }
    let qdd2 = solve_spd(&d22, &rhs).ok_or(Error::DegenerateMassMatrix { min_eigenvalue: 0.0 })?;
    xdot[NQ..NQ + 3].copy_from_slice(&qdd1);
    xdot[NQ + 3..].copy_from_slice(&qdd2);
    Ok(xdot)
}

// ---------------------------------------------------------------------------
// Public f64 API.

/// Crane parameters paired with the measured base motion signal.
#[derive(Clone)]
pub struct CraneModel {
    pub params: CraneParameters,
    pub base: std::sync::Arc<dyn BaseSignal>,
}

impl CraneModel {
    pub fn new(params: CraneParameters, base: std::sync::Arc<dyn BaseSignal>) -> Self {
        Self { params, base }
    }

    pub fn static_base(params: CraneParameters) -> Self {
        Self::new(params, std::sync::Arc::new(StaticBase))
    }

    pub fn base_at(&self, t: f64) -> BaseMotionSample {
        self.base.sample(t)
    }

    pub fn vector_field(&self, t: f64, x: &CraneState, u: &VelocityCommand) -> Result<[f64; NX]> {
        vector_field(t, x, u, self.base.as_ref(), &self.params)
    }

    pub fn payload_pose(&self, t: f64, q: &GeneralizedCoordinates) -> [f64; 3] {
        payload_pose(q, &self.base_at(t), &self.params)
    }

    pub fn payload_velocity(&self, t: f64, x: &CraneState) -> [f64; 3] {
        payload_velocity(x, &self.base_at(t), &self.params)
    }
}

impl std::fmt::Debug for CraneModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CraneModel").field("params", &self.params).finish_non_exhaustive()
    }
}

/// Payload bottom position in the inertial frame.
pub fn payload_pose(q: &GeneralizedCoordinates, base: &BaseMotionSample, params: &CraneParameters) -> [f64; 3] {
    payload_bottom_generic(&q.to_array(), base, params)
}

/// Inertial velocity of the payload bottom, including base-motion terms.
pub fn payload_velocity(x: &CraneState, base: &BaseMotionSample, params: &CraneParameters) -> [f64; 3] {
    payload_pos_vel_generic(&x.to_array(), base, params).1
}

/// Boom tip position in the inertial frame.
pub fn boom_tip(q: &GeneralizedCoordinates, base: &BaseMotionSample, params: &CraneParameters) -> [f64; 3] {
    let chain = platform_chain(&q.to_array(), params, false);
    BasePose::<f64>::from_sample(base).apply(&chain.tip)
}

/// Inertial position and velocity of a platform-frame point moving with
/// platform-frame velocity `v`.
pub fn platform_point_motion(p: [f64; 3], v: [f64; 3], base: &BaseMotionSample) -> ([f64; 3], [f64; 3]) {
    let pt: [Jet2<f64>; 3] = std::array::from_fn(|i| Jet2::new(p[i], v[i], 0.0));
    let w = base_pose_jet::<f64>(base).apply(&pt);
    (w.map(|c| c.v), w.map(|c| c.d))
}

/// Resting state with the tether and payload hanging straight down and the
/// payload bottom at the platform-frame point `bottom`. The boom takes the
/// nonnegative tilt reaching the required radius.
pub fn hanging_state(bottom: [f64; 3], params: &CraneParameters) -> Result<CraneState> {
    let radius = bottom[0].hypot(bottom[1]);
    if !(radius <= params.boom_len) {
        return Err(Error::InvalidConfig(format!(
            "point at radius {radius} is beyond the boom reach {}",
            params.boom_len
        )));
    }
    let beta = bottom[1].atan2(bottom[0]);
    let theta = (radius / params.boom_len).acos();
    let tip_z = params.base_height + params.boom_len * theta.sin();
    let tether_len = tip_z - bottom[2] - params.payload_len;
    if !(tether_len > 0.0) {
        return Err(Error::InvalidConfig(format!("point at height {} leaves no tether length", bottom[2])));
    }
    Ok(CraneState::at_rest(GeneralizedCoordinates { beta, theta, tether_len, ..Default::default() }))
}

/// Inertial positions and masses of the lumped-mass model.
pub fn point_masses(
    q: &GeneralizedCoordinates,
    base: &BaseMotionSample,
    params: &CraneParameters,
) -> Vec<(f64, [f64; 3])> {
    let chain = platform_chain(&q.to_array(), params, true);
    let pose = BasePose::<f64>::from_sample(base);
    params
        .point_masses()
        .iter()
        .zip(all_points(&chain).iter())
        .map(|(m, pt)| (*m, pose.apply(pt)))
        .collect()
}

pub fn kinetic_energy(x: &CraneState, base: &BaseMotionSample, params: &CraneParameters) -> f64 {
    let (_, vel, _) = point_rates(&x.to_array(), base, params);
    params
        .point_masses()
        .iter()
        .zip(vel.iter())
        .map(|(m, v)| 0.5 * m * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))
        .sum()
}

/// Gravitational potential with datum at inertial `z = 0`.
pub fn potential_energy(q: &GeneralizedCoordinates, base: &BaseMotionSample, params: &CraneParameters) -> f64 {
    point_masses(q, base, params)
        .iter()
        .map(|(m, p)| m * params.gravity * p[2])
        .sum()
}

/// Inertia matrix `D(q)`. Errors if its smallest eigenvalue is below 1e-9.
pub fn mass_matrix(q: &GeneralizedCoordinates, params: &CraneParameters) -> Result<Matrix7> {
    let jac = point_jacobians(&q.to_array(), params);
    let masses = params.point_masses();
    let mut d = Matrix7::zeros();
    for (m, j) in masses.iter().zip(jac.iter()) {
        let jm = SMatrix::<f64, 3, 7>::from_fn(|r, c| j[r][c]);
        d += jm.transpose() * jm * *m;
    }
    let min_eig = d.symmetric_eigenvalues().min();
    if !(min_eig >= 1e-9) {
        return Err(Error::DegenerateMassMatrix { min_eigenvalue: min_eig });
    }
    Ok(d)
}

/// Bias forces `H(q, qdot, d_s, d_s', d_s'')`: Coriolis, centrifugal, gravity
/// and the inertial forces of the moving base.
pub fn bias_forces(x: &CraneState, base: &BaseMotionSample, params: &CraneParameters) -> [f64; NQ] {
    lagrange_terms(&x.to_array(), base, params, 0..N_POINTS, 0).1
}

/// Control-affine vector field of the velocity-actuated crane.
pub fn vector_field(
    t: f64,
    x: &CraneState,
    u: &VelocityCommand,
    base: &dyn BaseSignal,
    params: &CraneParameters,
) -> Result<[f64; NX]> {
    vector_field_generic(&x.to_array(), &u.to_array(), &base.sample(t), params)
}

/// `(f(t, x), g(x))` with `xdot = f + g u`.
pub fn control_affine_terms(
    t: f64,
    x: &CraneState,
    base: &dyn BaseSignal,
    params: &CraneParameters,
) -> Result<([f64; NX], [[f64; NU]; NX])> {
    let b = base.sample(t);
    let xa = x.to_array();
    let f = vector_field_generic(&xa, &[0.0; NU], &b, params)?;
    let mut g = [[0.0; NU]; NX];
    for c in 0..NU {
        let mut e = [0.0; NU];
        e[c] = 1.0;
        let fe = vector_field_generic(&xa, &e, &b, params)?;
        for r in 0..NX {
            g[r][c] = fe[r] - f[r];
        }
    }
    Ok((f, g))
}

/// `xdot = f + g u + delta_e(t)`; rejects disturbances above their bound.
pub fn perturbed_vector_field(
    t: f64,
    x: &CraneState,
    u: &VelocityCommand,
    delta: &UncertaintyRealization,
    base: &dyn BaseSignal,
    params: &CraneParameters,
) -> Result<[f64; NX]> {
    let d = delta.checked_eval(t)?;
    let mut xdot = vector_field(t, x, u, base, params)?;
    for (a, b) in xdot.iter_mut().zip(d.iter()) {
        *a += *b;
    }
    Ok(xdot)
}

/// Torque-level model `D qddot + H = B u_tilde` with `B = [I3; 0]`. Used to
/// validate the Lagrangian assembly; the controller never actuates in torque.
pub fn torque_vector_field(
    t: f64,
    x: &CraneState,
    torque: [f64; 3],
    base: &dyn BaseSignal,
    params: &CraneParameters,
) -> Result<[f64; NX]> {
    let b = base.sample(t);
    let xa = x.to_array();
    let (d, h) = lagrange_terms(&xa, &b, params, 0..N_POINTS, 0);
    let mut rhs = [0.0; NQ];
    for i in 0..NQ {
        rhs[i] = -h[i] + if i < 3 { torque[i] } else { 0.0 };
    }
    let qdd = solve_spd(&d, &rhs).ok_or(Error::DegenerateMassMatrix { min_eigenvalue: 0.0 })?;
    let mut xdot = [0.0; NX];
    xdot[..NQ].copy_from_slice(&xa[NQ..]);
    xdot[NQ..].copy_from_slice(&qdd);
    Ok(xdot)
}
