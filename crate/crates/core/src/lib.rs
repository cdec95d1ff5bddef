//! Feedback control with a prescribed time-varying output set.
//!
//! The output `y` is written as `y = Phi(eps, t)` where `Phi` maps the whole
//! real line onto the admissible band. Keeping `eps` bounded then keeps `y`
//! strictly inside the band. The crate provides the coordinate changes, three
//! control laws built on them, algebraic feasibility certificates and a
//! fixed-step closed-loop simulator with presets for the reference examples.

pub mod certificates;
pub mod cli;
pub mod controllers;
pub mod linalg;
pub mod plants;
pub mod poly;
pub mod profile;
pub mod simkit;
pub mod transforms;

pub use profile::{BoundaryProfile, BoundaryValue, Profile, Term};
pub use transforms::{Channel, Transform, TransformError, TransformKind, TransformOptions};
