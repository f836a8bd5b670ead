pub mod error;
pub mod grid;
pub mod par;
pub mod noise;
pub mod symbols;
pub mod evolve;
pub mod characteristics;
pub mod microlocal;
pub mod stats;

pub use error::{Error, Result};
