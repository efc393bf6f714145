pub mod arrival;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod field;
pub mod grid;
pub mod levelset;
pub mod stats;

pub use error::{Error, Result};
