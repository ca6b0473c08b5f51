pub mod checkpoint;
pub mod egn;
pub mod error;
pub mod frn;
pub mod gradcheck;
pub mod losses;
pub mod mcrn;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod semantic;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
