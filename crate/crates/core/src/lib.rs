//! Leader-follower formation swimming between two undulatory robotic fish,
//! and the imitation-learning pipeline that teaches the follower to keep
//! formation from bilateral pressure sensing.

// `!(x > 0.0)` is how validation rejects NaN along with the bad range, and
// index loops read closer to the maths in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod config;
pub mod cpg;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod imitation;
mod linalg;
pub mod pipeline;
pub mod plot;
pub mod policy;
pub mod seeds;
pub mod swimmer;

pub use error::{Error, Result};

/// Control period: sensing, policy queries and logging run at 50 Hz.
pub const CONTROL_DT: f64 = 0.02;

/// Physics and oscillator sub-steps per control tick.
pub const SUBSTEPS: usize = 40;

/// Integration step of the oscillators and the body dynamics.
pub const PHYSICS_DT: f64 = CONTROL_DT / SUBSTEPS as f64;
