//! Nearest simplex-ETF guided training for unconstrained feature models.
//!
//! The crate solves the proximal Procrustes-type problem on the Stiefel
//! manifold, differentiates its argmin implicitly, and measures the neural
//! collapse of learned features.

pub mod ddn;
pub mod error;
pub mod etf;
pub mod nearest_etf;
pub mod stiefel;
pub mod ufm;
pub mod vectorisation;

pub use error::{Error, Result};
pub use nearest_etf::{solve_nearest_etf, EtfSolution, InitScheme, NearestEtfProblem};
pub use stiefel::{StiefelPoint, TrustRegionOptions};
