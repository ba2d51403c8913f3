pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
