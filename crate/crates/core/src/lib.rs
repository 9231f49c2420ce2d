//! Planning and control for free-flying robots with a serial arm.
//!
//! The stack runs LQR-RRT* planning, shortcut smoothing, LQR re-timing and a
//! single-shooting nonlinear MPC solved with a PANOC-type method, driven by a
//! deterministic assembly simulator.

pub mod collision;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod lqr;
pub mod ltv;
pub mod nmpc;
pub mod planner;
pub mod smoother;
pub mod trajectory;

pub use error::{Error, Result};
pub use trajectory::Trajectory;
