pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod prior;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
