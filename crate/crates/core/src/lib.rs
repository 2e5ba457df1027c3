pub mod checkpoint;
pub mod data;
pub mod discriminators;
mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optimizer;
pub mod trainer;

pub use error::{Error, Result};
pub use ratenet_autograd as autograd;
