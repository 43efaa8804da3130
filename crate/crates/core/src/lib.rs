pub mod adapters;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
