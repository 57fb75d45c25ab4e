//! Generalized cross-domain similarity learning.
//!
//! The similarity between a sample `x` from one domain and `y` from another is
//! the quadratic form `[xᵀ yᵀ 1] S [x; y; 1]` over the augmented vector, with
//!
//! ```text
//!     | A   C   d |
//! S = | Cᵀ  B   e |
//!     | dᵀ  eᵀ  f |
//! ```
//!
//! It fuses an affine Mahalanobis distance with an affine Cosine similarity.
//! `A` and `B` are kept positive semi-definite by learning factors
//! `A = L_AᵀL_A`, `B = L_BᵀL_B`, `C = -L_CxᵀL_Cy`. The factors are trained
//! jointly with a small feed-forward feature extractor under a pairwise hinge
//! loss, using per-sample gradients of the output-layer activations.
//!
//! Lower scores mean more similar.
//!
//! Modules:
//! - [`simcore`]: the measure in factorized, block and projected forms, the
//!   affine fusion and classic special cases.
//! - [`featnet`]: the fully-connected feature extractor with backpropagation.
//! - [`trainer`]: hinge objective, pair generation, gradients and SGD.
//! - [`evalkit`]: CMC curves, verification accuracy, point-to-set scores.
//! - [`dataio`]: synthetic datasets and the text file formats.
//! - [`cli`]: the `gsim` command-line driver.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod featnet;
pub mod simcore;
pub mod trainer;

pub use error::{Error, Result};

/// Which side of a cross-domain pair a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::X => f.write_str("X"),
            Domain::Y => f.write_str("Y"),
        }
    }
}

/// Formats a float with 17 significant digits; round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
