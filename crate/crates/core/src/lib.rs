//! Multi-annotator tendency learning with per-annotator learnable queries.
//!
//! The crate is split along the pipeline: [`numerics`] (matrices, tape,
//! optimizer), [`model`], [`data`], [`train`], [`metrics`] and [`harness`].

pub mod data;
pub mod harness;
pub mod jsonfmt;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod train;
