//! Piecewise-linear payload reference through timed waypoints.

use serde::{Deserialize, Serialize};

use crate::dynamics::{platform_point_motion, BaseMotionSample};
use crate::error::{Error, Result};

/// Frame the waypoints are written in. Platform-frame waypoints ride the base.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceFrame {
    Inertial,
    Platform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    /// Time (s).
    pub t: f64,
    /// Payload-bottom position (m).
    pub position: [f64; 3],
}

/// `r_p(t)` interpolates linearly between waypoints and holds the end points
/// outside their time span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTrajectory {
    pub frame: ReferenceFrame,
    pub waypoints: Vec<Waypoint>,
}

/// Reference position and velocity in the inertial frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReferenceSample {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
}

impl ReferenceTrajectory {
    /// A single point held forever.
    pub fn hold(frame: ReferenceFrame, position: [f64; 3]) -> Self {
        Self { frame, waypoints: vec![Waypoint { t: 0.0, position }] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::InvalidConfig("reference needs at least one waypoint".into()));
        }
        for w in &self.waypoints {
            if !(w.t.is_finite() && w.position.iter().all(|v| v.is_finite())) {
                return Err(Error::InvalidConfig("reference waypoints must be finite".into()));
            }
        }
        if self.waypoints.windows(2).any(|p| !(p[1].t > p[0].t)) {
            return Err(Error::InvalidConfig("reference waypoint times must increase strictly".into()));
        }
        Ok(())
    }

    /// Position and velocity in the waypoint frame.
    pub fn local(&self, t: f64) -> ([f64; 3], [f64; 3]) {
        let w = &self.waypoints;
        let first = &w[0];
        let last = &w[w.len() - 1];
        if t <= first.t {
            return (first.position, [0.0; 3]);
        }
        if t >= last.t {
            return (last.position, [0.0; 3]);
        }
        let i = w.partition_point(|p| p.t <= t) - 1;
        let (a, b) = (&w[i], &w[i + 1]);
        let span = b.t - a.t;
        let s = (t - a.t) / span;
        (
            std::array::from_fn(|j| a.position[j] + s * (b.position[j] - a.position[j])),
            std::array::from_fn(|j| (b.position[j] - a.position[j]) / span),
        )
    }

    /// Inertial `(r_p, r_p')` given the base pose at `t`.
    pub fn sample(&self, t: f64, base: &BaseMotionSample) -> ReferenceSample {
        let (p, v) = self.local(t);
        match self.frame {
            ReferenceFrame::Inertial => ReferenceSample { position: p, velocity: v },
            ReferenceFrame::Platform => {
                let (position, velocity) = platform_point_motion(p, v, base);
                ReferenceSample { position, velocity }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> ReferenceTrajectory {
        ReferenceTrajectory {
            frame: ReferenceFrame::Inertial,
            waypoints: vec![
                Waypoint { t: 1.0, position: [0.0, 0.0, 1.0] },
                Waypoint { t: 3.0, position: [2.0, 0.0, 0.0] },
            ],
        }
    }

    #[test]
    fn holds_outside_span() {
        let r = ramp();
        assert_eq!(r.local(0.0), ([0.0, 0.0, 1.0], [0.0; 3]));
        assert_eq!(r.local(5.0), ([2.0, 0.0, 0.0], [0.0; 3]));
    }

    #[test]
    fn interpolates_with_constant_slope() {
        let (p, v) = ramp().local(2.0);
        assert_eq!(p, [1.0, 0.0, 0.5]);
        assert_eq!(v, [1.0, 0.0, -0.5]);
    }

    #[test]
    fn platform_frame_follows_translation() {
        let r = ReferenceTrajectory { frame: ReferenceFrame::Platform, ..ramp() };
        let base = BaseMotionSample { translation: [0.0, 0.05, 0.0], translation_vel: [0.0, 0.3, 0.0], ..Default::default() };
        let s = r.sample(2.0, &base);
        assert_eq!(s.position, [1.0, 0.05, 0.5]);
        assert_eq!(s.velocity, [1.0, 0.3, -0.5]);
    }

    #[test]
    fn rejects_unordered_waypoints() {
        let mut r = ramp();
        r.waypoints.swap(0, 1);
        assert!(r.validate().is_err());
        assert!(ReferenceTrajectory { frame: ReferenceFrame::Inertial, waypoints: vec![] }.validate().is_err());
    }
}
