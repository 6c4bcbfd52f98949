pub mod error;
pub mod fourier_basis;
pub mod kernels;
pub mod likelihoods;
pub mod model;
pub mod training;
pub mod data;
pub mod metrics;
pub mod config;
pub mod linalg;
pub mod runner;
