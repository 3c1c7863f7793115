pub mod agl;
pub mod data;
pub mod diff;
mod error;
pub mod gconv;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod params;
pub mod preprocess;
pub mod tconv;
pub mod train;

pub use error::{Error, Result};
