//! Generalized-Bayes registration of 2D functional activation maps.

pub mod error;
pub mod grid;
pub mod kriging;
pub mod landmarks;
pub mod modelselect;
pub mod optim;
pub mod pipeline;
pub mod posterior;
pub mod sampler;
pub mod simulate;
pub mod transform;

pub use error::{Error, Result};
