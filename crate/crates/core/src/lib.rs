//! Linear and kernel anomalous change detection for co-registered image pairs.

pub mod detectors;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod raster;
pub mod simulate;
pub mod tune;

pub use error::{Error, Result};
