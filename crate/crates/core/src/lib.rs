pub mod cli;
pub mod config;
pub mod domain;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod hierarchy;
pub mod image;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
