//! Margin-based softmax losses with an intra-class compactness term, plus
//! the training loop and geometry diagnostics used to study them on small
//! synthetic datasets.

pub mod data;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod geometry;
pub mod intra;
pub mod margin;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{Matrix, UnitVector};
pub use intra::{IntraConfig, IntraParams};
pub use margin::{MarginConfig, MarginScheme};
