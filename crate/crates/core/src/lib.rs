//! Deterministic, interactively steerable multi-UAV formation simulator.
//!
//! A leader UAV tracks a walking worker with a camera while followers hold
//! observation angles relative to the leader. Worker gestures and operator
//! requests adjust the per-UAV viewing parameters `(β, γ, d)` at runtime.

// `!(x > 0.0)` is how inputs reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod estimator;
pub mod formation;
pub mod gesture;
pub mod model;
pub mod planner;
pub mod runtime;
pub mod world;
