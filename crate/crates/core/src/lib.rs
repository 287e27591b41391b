pub mod attrloss;
pub mod datapipe;
pub mod diffcore;
mod error;
pub mod evalkit;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
