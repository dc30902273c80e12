//! Point-to-point and point-to-region matching losses for point-based
//! counting, point-specific activation maps, and a small mean-teacher
//! training loop on synthetic scenes.

pub mod assignment;
pub mod cli;
pub mod config;
pub mod counter;
pub mod error;
pub mod loss;
pub mod manifest;
pub mod matching;
pub mod points;
pub mod psam;
pub mod semisup;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
