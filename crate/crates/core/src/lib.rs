//! LiDAR-conditioned learned image compression.

pub mod codec;
pub mod context;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fixture;
pub mod projection;
pub mod training;

pub use error::{Error, Result};
