//! Persona-aware neural news recommendation with cross-view contrastive learning.

pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod persona;
pub mod recommender;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
