//! Stabilized centroidal model-predictive locomotion.
//!
//! The crate models a legged robot as a single floating mass driven by
//! ground-contact forces applied at foot corners. On top of that model it
//! provides:
//!
//! - [`dynamics`] — centroidal momentum dynamics, contact maps, and fixed-step
//!   integrators (forward Euler for predictions, a 4th-order step for the
//!   simulation plant);
//! - [`gait`] — footstep plans and twice-differentiable center-of-mass
//!   references for walking and standing scenarios;
//! - [`stabilizer`] — the error coordinates, adaptive disturbance estimator,
//!   and the Lyapunov machinery (stability residual, contraction bound) that
//!   the constrained MPC enforces;
//! - [`nlp`] — a dense/banded operator-splitting QP solver and an SQP layer
//!   with exact KKT checking, written for deterministic, warm-started
//!   receding-horizon use;
//! - [`mpc`] — the receding-horizon problem itself: multiple-shooting
//!   centroidal predictions, friction pyramids, contact adaptation bounds,
//!   and the optional stability constraints;
//! - [`sim`] — the closed-loop scenario runner (controller at a fixed period,
//!   plant integrated at 10 substeps per period) plus disturbance handling
//!   and summary metrics.

pub mod dynamics;
pub mod gait;
pub mod mpc;
pub mod nlp;
pub mod sim;
pub mod stabilizer;
