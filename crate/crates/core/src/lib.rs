//! Predictive state recurrent neural networks: two-stage regression
//! initialization, normalized bilinear filtering, CP-factorized cells and
//! BPTT refinement.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod model;
pub mod modelfile;
pub mod oracle;
pub mod par;
pub mod regress;
pub mod tensor;
pub mod train;
pub mod twostage;

pub use error::{PsrnnError, Result};
