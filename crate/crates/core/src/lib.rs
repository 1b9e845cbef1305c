//! Pseudo-label mining for sparsely annotated rotated-box detection.

pub mod cbp;
pub mod dataset;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod pipeline;
pub mod plf;
pub mod report;
pub mod rng;
pub mod surrogate;

pub use error::{Error, Result};
pub use exec::Exec;
pub use geometry::{rotated_iou, RotatedBox};
