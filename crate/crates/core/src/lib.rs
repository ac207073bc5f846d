//! Nonnegative deconvolution, a differentiable NDC layer and the Deconver
//! segmentation network.

// Negated comparisons also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod error;
pub mod grad;
pub mod ndc;
pub mod net;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::{FilterTensor, Padding, Tensor};
