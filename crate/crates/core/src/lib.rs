pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod params;
pub mod tadn;
pub mod train;

pub use error::{Error, Result};
