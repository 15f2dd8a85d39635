//! Gust-load alleviation for a nonlinear aeroelastic wing section:
//! offline MPC-bounded tabular Q-learning plus a deployment-time
//! Lipschitz safety filter, with a Monte Carlo evaluation harness.
//!
//! All numeric code is generic over the scalar type via [`float::Float`]
//! (`f32` or `f64`); the `*64` aliases at the crate root are the concrete
//! types the CLI and the evaluation harness use.

pub mod config;
pub mod error;
pub mod filter;
pub mod float;
pub mod gust;
pub mod harness;
pub mod linalg;
pub mod lpv;
pub mod mpc;
pub mod persist;
pub mod pipeline;
pub mod plant;
pub mod qlearn;
pub mod state;
pub mod util;

pub use error::{Error, Result};
pub use float::Float;

pub type WingState64 = state::WingState<f64>;
pub type ControlInput64 = state::ControlInput<f64>;
pub type Disturbance64 = state::Disturbance<f64>;
pub type PlantParams64 = plant::PlantParams<f64>;
pub type Trajectory64 = plant::Trajectory<f64>;
