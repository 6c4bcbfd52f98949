//! Dense and structured linear algebra used throughout the crate.

mod chol;
mod kmeans;
mod structured;

pub use chol::{chol_psd, CholFactor};
pub use kmeans::{kmeans, KMeans};
pub use structured::{woodbury_solve, GramFactor, StructuredGram, WoodburyFactor};
