//! Mean-field variational classification heads with MC uncertainty,
//! accuracy-vs-uncertainty calibration and uncertainty-gated late fusion.

pub mod block;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod head;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::{Matrix, RngStream};
