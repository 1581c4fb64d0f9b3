//! Minimal dense reverse-mode automatic differentiation.
//!
//! Tensors are row-major `f64`. A [`Tape`] is rebuilt for every forward pass;
//! parameters live in a [`ParamStore`] and are registered on the tape by name
//! so that [`Tape::backward`] can report one gradient per parameter.

mod error;
pub mod gradcheck;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use params::ParamStore;
pub use rng::SeededRng;
pub use tape::{
    dot, logsumexp, norm, normal_cdf, normal_pdf, population_std, sigmoid, softplus, DenseKind,
    EdgeIndex, Reduction, SegmentKind, Tape, Var,
};
pub use tensor::Tensor;
