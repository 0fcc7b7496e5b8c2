//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! value; [`Graph::backward`] walks the nodes once in reverse creation order
//! and returns gradients for every parameter leaf. Images are laid out as
//! `[channels, rows, cols]` and one graph holds one sample; batches are
//! formed by building independent graphs and summing their gradients.
//!
//! [`grad_check`] compares those gradients against central finite
//! differences.

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{GraphError, Result};
pub use gradcheck::{grad_check, BlockReport, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar type a graph computes in. Implemented for `f32` (training) and
/// `f64` (gradient checks).
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this precision.
    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
