//! Salient-point adversarial attacks on small 3-D point-cloud classifiers.
//!
//! The crate is a self-contained laboratory: it can synthesize labelled
//! point-cloud datasets, train two small differentiable victim models,
//! run a locality-constrained adversarial attack with a perturbation
//! budget-withdrawing step, filter clouds through statistical defenses,
//! and aggregate everything into evaluation reports.
//!
//! ```
//! use saliencystrike::tensor::Tensor;
//!
//! let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])?;
//! assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
//! # Ok::<(), saliencystrike::Error>(())
//! ```

#![forbid(unsafe_code)]

pub mod attack;
pub mod cli;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod loss;
pub mod ops;
pub mod seeds;
pub mod tensor;
pub mod victim;

pub use error::{Error, Result};
