//! Closed-loop convolutional detection: a feedback loop that feeds a
//! detection head's output back into its input features, a spectral
//! harness for checking the loop's stability argument, reverse-mode
//! training through the unrolled loop, and a small synthetic detector to
//! exercise it end to end.

pub mod analysis;
pub mod error;
pub mod iff;
pub mod spectral;
pub mod tensor;
pub mod toydet;
pub mod traingraph;

pub use error::{Error, Result};
