#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod api;
pub mod energy;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod guidance;
pub mod io;
pub mod overlay;
pub mod pipeline;
pub mod synthlab;

pub use error::{Error, Result};
pub use nalgebra;
