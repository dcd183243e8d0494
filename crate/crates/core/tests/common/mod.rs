#![allow(dead_code)]

use std::f64::consts::PI;

use cranesafe::dynamics::{BaseMotionSample, BaseSignal, CraneParameters, CraneState, GeneralizedCoordinates, NQ};
use rand::Rng;

/// Smooth six-channel base motion with analytic derivatives.
#[derive(Clone, Copy)]
pub struct WavyBase {
    pub amp: [f64; 6],
    pub freq: [f64; 6],
    pub phase: [f64; 6],
}

impl WavyBase {
    pub fn random(rng: &mut impl Rng, scale: f64) -> Self {
        Self {
            amp: std::array::from_fn(|_| rng.random_range(-scale..scale)),
            freq: std::array::from_fn(|_| rng.random_range(0.2..1.5)),
            phase: std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI)),
        }
    }
}

impl BaseSignal for WavyBase {
    fn sample(&self, t: f64) -> BaseMotionSample {
        let mut s = BaseMotionSample::identity();
        for i in 0..6 {
            let w = 2.0 * PI * self.freq[i];
            let (sn, cs) = (w * t + self.phase[i]).sin_cos();
            let (v, d, dd) = (self.amp[i] * sn, self.amp[i] * w * cs, -self.amp[i] * w * w * sn);
            if i < 3 {
                s.angles[i] = v;
                s.angle_rates[i] = d;
                s.angle_accels[i] = dd;
            } else {
                s.translation[i - 3] = v;
                s.translation_vel[i - 3] = d;
                s.translation_accel[i - 3] = dd;
            }
        }
        s
    }
}

pub fn random_state(rng: &mut impl Rng, p: &CraneParameters) -> CraneState {
    let lo = p.state_bounds.lower;
    let hi = p.state_bounds.upper;
    let q: [f64; NQ] = std::array::from_fn(|i| rng.random_range(lo[i]..hi[i]));
    let qdot: [f64; NQ] = std::array::from_fn(|_| rng.random_range(-0.8..0.8));
    CraneState { q: GeneralizedCoordinates::from_array(q), qdot }
}

