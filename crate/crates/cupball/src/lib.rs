//! Planning and control for a planar cup-and-ball system.
//!
//! The pipeline has three stages:
//!
//! 1. [`swingup`]: offline trajectory optimization that swings the tethered
//!    ball from rest to a release state whose free-fall arc returns to the cup.
//! 2. [`noise`]: estimation of a box support for the measurement noise from
//!    calibration samples, with a joint confidence guarantee.
//! 3. [`controller`] + [`sim`]: an output-feedback tube controller that steers
//!    the cup-ball relative position to zero during the ballistic phase, and a
//!    seeded Monte Carlo harness that measures catch statistics as the learned
//!    noise support converges.
//!
//! [`sets`] provides the 2D convex set algebra (boxes, zonotopes, halfspace
//! polytopes, robust positively invariant sets) that the controller is built
//! on, and [`qp`] the dense strictly convex QP solver used at every control
//! step.

pub mod config;
pub mod controller;
pub mod dynamics;
pub mod noise;
pub mod qp;
pub mod report;
pub mod sets;
pub mod sim;
pub mod swingup;
