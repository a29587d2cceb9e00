pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
