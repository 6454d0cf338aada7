//! Trail-following MAV stack at desk scale.
//!
//! Perception turns the vehicle's pose relative to a trail into two 3-way
//! soft labels (view orientation and lateral offset), the controller mixes
//! them into a turn angle and a waypoint, and the simulator closes the loop.
//! `scale_align` recovers metric scale for monocular odometry.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod control;
pub mod error;
pub mod experiments;
pub mod geo;
pub mod loss;
pub mod perception;
pub mod scale_align;
pub mod sim;
pub mod trail;

pub use error::{Error, Result};
