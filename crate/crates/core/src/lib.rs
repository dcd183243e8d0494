//! Robust sampled-data MPC with zero-order control barrier functions for a
//! ship-mounted crane.

// `!(a > b)` is used on purpose to reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ad;
pub mod barrier;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod integrator;
pub mod mpc;
pub mod safety;
mod serde_array;

pub use dynamics::{
    BaseMotionSample, BaseSignal, CraneModel, CraneParameters, CraneState, GeneralizedCoordinates,
    UncertaintyRealization, VelocityCommand,
};
pub use error::{Error, Result};
pub use integrator::FlowConfig;
