//! End-to-end driving stack with multi-granularity waypoint planning.
//!
//! The crate covers ground-truth waypoint generation, a synthetic multi-camera
//! world, a query-based decoder with distance-scaled and deformable attention,
//! the multi-granularity planning head, align-matched training, waypoint
//! selection and control, and a kinematic closed-loop simulator.

pub mod config;
pub mod control;
pub mod decoder;
pub mod error;
pub mod model;
pub mod numerics;
pub mod planning_head;
pub mod scene;
pub mod simulator;
pub mod training;
pub mod trajectory;

#[cfg(test)]
mod test_support;

pub use error::{Error, Result};
