//! Vision toolkit for underwater docking.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bbox;
pub mod camera;
pub mod config;
pub mod deform;
pub mod detector;
pub mod eval;
pub mod image;
pub mod landmarks;
pub mod pipeline;
pub mod pnp;
pub mod pose;
pub mod scene;
