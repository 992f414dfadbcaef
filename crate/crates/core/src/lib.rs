#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bvh;
pub mod error;
pub mod geometry;
pub mod io;
pub mod map_builder;
pub mod metrics;
pub mod object_bank;
pub mod par;
pub mod pipeline;
pub mod polar_grid;
pub mod raycast;
pub mod raydrop;
pub mod rng;
pub mod scene;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
