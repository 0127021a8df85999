//! Time-stepped simulation of a truck platoon run by a centralized
//! controller over lossy vehicle-to-vehicle links.
//!
//! The platoon leader hosts the controller. Members report position, speed
//! and gap every tick; the controller answers each member with an
//! accelerate / decelerate / maintain command. Both directions cross a
//! channel whose delivery probability depends on antenna distance.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod cli;
pub mod controller;
pub mod error;
pub mod kinematics;
pub mod metrics;
pub mod scenario;

pub use error::{Error, Result};
