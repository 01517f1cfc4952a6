//! Multi-head consensus-aware visual-semantic embedding for image-text
//! matching, built on a small reverse-mode autodiff engine.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod consensus;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod training;

pub use error::{Error, Result};
