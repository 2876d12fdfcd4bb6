//! Branching capacity of subsets of `Z^d`, `d >= 5`: samplers for critical
//! Galton-Watson trees and the spine-decomposed invariant tree, tree-indexed
//! random walks, lattice Green kernels, and Monte Carlo estimators for the
//! equilibrium measure, the capacity of random-walk ranges, and the
//! energy-minimization capacity proxy.

pub mod capacity;
pub mod error;
pub mod experiments;
pub mod green;
pub mod gwtree;
pub mod lattice;
pub mod lawler;
pub mod offspring;
pub mod pathsum;
pub mod rng;
pub mod stats;

pub use error::Error;
pub use green::{AsymptoticConstants, GreenEval, GreenTable};
pub use gwtree::{GwOccupation, InvariantTreeSample, TruncationPolicy};
pub use lattice::{LatticePoint, SiteCounts, SiteSet, TwoSidedWalk, WalkPath, MAX_DIM};
pub use offspring::{OffspringLaw, SizeBiasedLaw, SpineSplit};
pub use stats::McEstimate;

/// Convenience alias used throughout.
pub type Result<T> = std::result::Result<T, Error>;
