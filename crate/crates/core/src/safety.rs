//! Safety functions: the six bounding-box constraints, the smooth target
//! insertion function and their min-composition.

use serde::{Deserialize, Serialize};

use crate::ad::{Dual, Scalar};
use crate::dynamics::{payload_bottom_generic, BaseMotionSample, CraneModel, CraneState, NQ, NX};
use crate::error::{Error, Result};

const SIGMOID_CLAMP: f64 = 500.0;

/// Parameters of the target insertion surface. The target rides the platform
/// at `target_position` (platform frame).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSafetyParams {
    /// Peak amplitude (m).
    pub peak_amp: f64,
    /// Sigmoid steepness (1/m^2).
    pub steepness: f64,
    /// Height of the outer plateau (m).
    pub plateau_gap: f64,
    /// Outer transition radius (m).
    pub rho1: f64,
    /// Inner transition radius (m).
    pub rho2: f64,
    /// Target mouth centre in the platform frame (m).
    pub target_position: [f64; 3],
    pub target_radius: f64,
    pub payload_radius: f64,
}

impl Default for TargetSafetyParams {
    fn default() -> Self {
        Self {
            peak_amp: 0.30,
            steepness: 5000.0,
            plateau_gap: 0.05,
            rho1: 0.075,
            rho2: 0.030,
            target_position: [2.29, 0.0, 0.0],
            target_radius: 0.025,
            payload_radius: 0.02,
        }
    }
}

impl TargetSafetyParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("peak_amp", self.peak_amp),
            ("steepness", self.steepness),
            ("plateau_gap", self.plateau_gap),
            ("rho2", self.rho2),
            ("payload_radius", self.payload_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.rho1 > self.rho2) {
            return Err(Error::InvalidConfig(format!("rho1 ({}) must exceed rho2 ({})", self.rho1, self.rho2)));
        }
        if !(self.peak_amp > self.plateau_gap) {
            return Err(Error::InvalidConfig("peak_amp must exceed plateau_gap".into()));
        }
        if !(self.payload_radius < self.target_radius) {
            return Err(Error::InvalidConfig("payload_radius must be below target_radius".into()));
        }
        if !self.target_position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("target_position must be finite".into()));
        }
        Ok(())
    }

    /// Target mouth in the inertial frame at the given base pose.
    pub fn target_at(&self, base: &BaseMotionSample) -> [f64; 3] {
        base.to_inertial(self.target_position)
    }

    /// Height of the insertion surface above the target at squared radial distance `rho_sq`.
    pub fn surface<S: Scalar>(&self, rho_sq: S) -> S {
        let outer = sigmoid((rho_sq - self.rho1 * self.rho1) * self.steepness);
        let inner = sigmoid((rho_sq - self.rho2 * self.rho2) * self.steepness);
        outer * self.peak_amp - inner * (self.peak_amp - self.plateau_gap)
    }

    /// `h_t` for a payload-bottom position `p` and target mouth `target`.
    pub fn evaluate<S: Scalar>(&self, p: &[S; 3], target: &[f64; 3]) -> S {
        let dx = p[0] - target[0];
        let dy = p[1] - target[1];
        (p[2] - target[2]) - self.surface(dx * dx + dy * dy)
    }
}

fn sigmoid<S: Scalar>(z: S) -> S {
    let z = if z.re() > SIGMOID_CLAMP {
        S::cst(SIGMOID_CLAMP)
    } else if z.re() < -SIGMOID_CLAMP {
        S::cst(-SIGMOID_CLAMP)
    } else {
        z
    };
    ((-z).exp() + 1.0).recip()
}

/// Axis-aligned box `lower < p < upper` at one instant (inertial frame).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyBox {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl SafetyBox {
    pub fn new(lower: [f64; 3], upper: [f64; 3]) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if !(self.lower[axis] < self.upper[axis]) {
                return Err(Error::InfeasibleBox { axis, lower: self.lower[axis], upper: self.upper[axis] });
            }
        }
        Ok(())
    }

    /// `(p - lower, upper - p)` per axis: `h1..h3`, `h4..h6`.
    pub fn evaluate<S: Scalar>(&self, p: &[S; 3]) -> [S; 6] {
        [
            p[0] - self.lower[0],
            p[1] - self.lower[1],
            p[2] - self.lower[2],
            -p[0] + self.upper[0],
            -p[1] + self.upper[1],
            -p[2] + self.upper[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.lower[i] + self.upper[i]))
    }

    pub fn half_extent(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.upper[i] - self.lower[i]))
    }

    fn volume(&self) -> f64 {
        (0..3).map(|i| (self.upper[i] - self.lower[i]).max(0.0)).product()
    }
}

/// Axis-aligned block fixed in the platform frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObstacleSet {
    pub blocks: Vec<Obstacle>,
}

impl ObstacleSet {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blocks.iter().enumerate() {
            if !(0..3).all(|a| b.lower[a] < b.upper[a]) {
                return Err(Error::InvalidConfig(format!("obstacle {i} has non-positive extent")));
            }
        }
        Ok(())
    }
}

/// Free-space description: a nominal box and obstacles, both in the platform frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeSpace {
    pub nominal: SafetyBox,
    #[serde(default)]
    pub obstacles: ObstacleSet,
    /// Clearance kept from every obstacle (m).
    #[serde(default)]
    pub margin: f64,
}

impl Default for FreeSpace {
    fn default() -> Self {
        Self {
            nominal: SafetyBox { lower: [1.4, -0.8, -0.4], upper: [3.2, 0.8, 2.0] },
            obstacles: ObstacleSet::default(),
            margin: 0.0,
        }
    }
}

impl FreeSpace {
    pub fn validate(&self) -> Result<()> {
        self.nominal.validate()?;
        self.obstacles.validate()?;
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidConfig("box margin must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn box_at(&self, base: &BaseMotionSample) -> Result<SafetyBox> {
        update_box(base, &self.obstacles, &self.nominal, self.margin)
    }
}

/// Largest axis-aligned inertial box, centred on the moved centre, inside the platform box `b` moved by the
/// base pose, obtained by shrinking it uniformly about its moved centre.
fn inscribed(b: &SafetyBox, base: &BaseMotionSample) -> SafetyBox {
    if base.angles == [0.0; 3] {
        let t = base.translation;
        return SafetyBox {
            lower: std::array::from_fn(|i| b.lower[i] + t[i]),
            upper: std::array::from_fn(|i| b.upper[i] + t[i]),
        };
    }
    let r = base.rotation();
    let c = base.to_inertial(b.center());
    let e = b.half_extent();
    let mut scale: f64 = 1.0;
    for i in 0..3 {
        // |R^T| e, the platform-frame reach of the inertial half extents.
        let reach: f64 = (0..3).map(|j| r[j][i].abs() * e[j]).sum();
        if reach > 0.0 {
            scale = scale.min(e[i] / reach);
        }
    }
    SafetyBox {
        lower: std::array::from_fn(|i| c[i] - scale * e[i]),
        upper: std::array::from_fn(|i| c[i] + scale * e[i]),
    }
}

/// Inertial bounding box of a platform-frame block.
fn enclosing(b: &Obstacle, base: &BaseMotionSample) -> SafetyBox {
    let sb = SafetyBox { lower: b.lower, upper: b.upper };
    if base.angles == [0.0; 3] {
        return inscribed(&sb, base);
    }
    let r = base.rotation();
    let c = base.to_inertial(sb.center());
    let e = sb.half_extent();
    let reach: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| r[i][j].abs() * e[j]).sum());
    SafetyBox {
        lower: std::array::from_fn(|i| c[i] - reach[i]),
        upper: std::array::from_fn(|i| c[i] + reach[i]),
    }
}

/// Time-varying free-space box: the nominal platform box moved by the base
/// pose, then cut away from every obstacle (inflated by `margin`). Each
/// obstacle removes one face, the one that keeps the largest volume.
pub fn update_box(
    base: &BaseMotionSample,
    obstacles: &ObstacleSet,
    nominal: &SafetyBox,
    margin: f64,
) -> Result<SafetyBox> {
    let mut b = inscribed(nominal, base);
    for obstacle in &obstacles.blocks {
        let o = enclosing(obstacle, base);
        let lo: [f64; 3] = std::array::from_fn(|i| o.lower[i] - margin);
        let hi: [f64; 3] = std::array::from_fn(|i| o.upper[i] + margin);
        let overlaps = (0..3).all(|i| lo[i] < b.upper[i] && hi[i] > b.lower[i]);
        if !overlaps {
            continue;
        }
        let mut best: Option<SafetyBox> = None;
        for axis in 0..3 {
            let mut below = b;
            below.upper[axis] = lo[axis];
            let mut above = b;
            above.lower[axis] = hi[axis];
            for cand in [below, above] {
                if cand.lower[axis] < cand.upper[axis] && best.is_none_or(|bb| cand.volume() > bb.volume()) {
                    best = Some(cand);
                }
            }
        }
        b = best.ok_or_else(|| {
            let axis = (0..3)
                .max_by(|&i, &j| (b.upper[i] - b.lower[i]).total_cmp(&(b.upper[j] - b.lower[j])))
                .unwrap_or(0);
            Error::InfeasibleBox { axis, lower: hi[axis].max(b.lower[axis]), upper: lo[axis].min(b.upper[axis]) }
        })?;
    }
    b.validate()?;
    Ok(b)
}

/// `h_t(t, x)`; `target_offset` shifts the target mouth (inertial frame).
pub fn target_safety(
    t: f64,
    x: &CraneState,
    prm: &TargetSafetyParams,
    model: &CraneModel,
    target_offset: [f64; 3],
) -> f64 {
    let base = model.base_at(t);
    let p = payload_bottom_generic(&x.q.to_array(), &base, &model.params);
    let tgt = prm.target_at(&base);
    prm.evaluate(&p, &std::array::from_fn(|i| tgt[i] + target_offset[i]))
}

/// Exact gradient of `h_t` with respect to the 14-dimensional state.
pub fn target_safety_gradient(
    t: f64,
    x: &CraneState,
    prm: &TargetSafetyParams,
    model: &CraneModel,
    target_offset: [f64; 3],
) -> [f64; NX] {
    let base = model.base_at(t);
    let qa = x.q.to_array();
    let q: [Dual<f64, NQ>; NQ] = std::array::from_fn(|i| Dual::variable(qa[i], i));
    let p = payload_bottom_generic(&q, &base, &model.params);
    let tgt = prm.target_at(&base);
    let h = prm.evaluate(&p, &std::array::from_fn(|i| tgt[i] + target_offset[i]));
    let mut g = [0.0; NX];
    g[..NQ].copy_from_slice(&h.eps);
    g
}

/// `(h1, ..., h6)` for the payload bottom.
pub fn box_safety(t: f64, x: &CraneState, b: &SafetyBox, model: &CraneModel) -> [f64; 6] {
    let p = payload_bottom_generic(&x.q.to_array(), &model.base_at(t), &model.params);
    b.evaluate(&p)
}

/// All seven safety values at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyValues {
    pub target: f64,
    pub boxes: [f64; 6],
}

impl SafetyValues {
    /// Min-composition over the target and the six box functions.
    pub fn composite(&self) -> f64 {
        self.boxes.iter().fold(self.target, |m, v| m.min(*v))
    }
}

pub fn safety_values(
    t: f64,
    x: &CraneState,
    prm: &TargetSafetyParams,
    free_space: &FreeSpace,
    model: &CraneModel,
) -> Result<SafetyValues> {
    let base = model.base_at(t);
    let b = free_space.box_at(&base)?;
    Ok(SafetyValues { target: target_safety(t, x, prm, model, [0.0; 3]), boxes: box_safety(t, x, &b, model) })
}

/// `min(h_t, h1, ..., h6)`.
pub fn composite_safety(
    t: f64,
    x: &CraneState,
    prm: &TargetSafetyParams,
    free_space: &FreeSpace,
    model: &CraneModel,
) -> Result<f64> {
    Ok(safety_values(t, x, prm, free_space, model)?.composite())
}
