pub mod autograd;
pub mod domain;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod losses;
pub mod model;
pub mod phantom;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
