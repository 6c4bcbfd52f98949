use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{CovarianceBasis, Method, SparseGp};
use crate::error::{Error, Result};
use crate::fourier_basis::MultiDimBasis;
use crate::kernels::{InputDomain, KernelSpec, Structure};
use crate::likelihoods::Likelihood;
use crate::linalg::kmeans;

/// Largest sample handed to k-means when choosing locations.
const KMEANS_SAMPLE: usize = 20_000;

/// How inducing locations are initialized from the training inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    RandomSubset,
    Kmeans,
}

/// Basis sizes for one method. SVGP, SGPR and VFF use `n_beta + n_gamma`
/// covariance basis functions and no mean basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub method: Method,
    pub n_beta: usize,
    pub n_gamma: usize,
    #[serde(default)]
    pub init: InitMode,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_beta + self.n_gamma == 0 {
            return Err(Error::config("n_beta", "basis budget n_beta + n_gamma must be positive"));
        }
        if self.method.has_mean_basis() && self.n_beta == 0 {
            return Err(Error::config("n_beta", format!("{} needs a covariance basis (n_beta > 0)", self.method.name())));
        }
        Ok(())
    }

    fn covariance_budget(&self) -> usize {
        if self.method.has_mean_basis() {
            self.n_beta
        } else {
            self.n_beta + self.n_gamma
        }
    }

    fn mean_budget(&self) -> usize {
        if self.method.has_mean_basis() {
            self.n_gamma
        } else {
            0
        }
    }
}

/// Picks `count` rows of `x` as locations.
pub fn initial_locations(x: &DMatrix<f64>, count: usize, mode: InitMode, seed: u64) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if count > n {
        return Err(Error::InvalidInput(format!("cannot place {count} locations with {n} training points")));
    }
    if count == 0 {
        return Ok(DMatrix::zeros(0, x.ncols()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    match mode {
        InitMode::RandomSubset => {
            let idx = rand::seq::index::sample(&mut rng, n, count);
            Ok(DMatrix::from_fn(count, x.ncols(), |r, c| x[(idx.index(r), c)]))
        }
        InitMode::Kmeans => {
            let sample = if n > KMEANS_SAMPLE {
                let idx = rand::seq::index::sample(&mut rng, n, KMEANS_SAMPLE);
                DMatrix::from_fn(KMEANS_SAMPLE, x.ncols(), |r, c| x[(idx.index(r), c)])
            } else {
                x.clone()
            };
            Ok(kmeans(&sample, count, seed)?.centers)
        }
    }
}

/// Builds a model at its prior state. Mean and covariance locations are drawn
/// jointly so the two sets never coincide.
pub fn configure(
    spec: &ModelSpec,
    kernel: KernelSpec,
    likelihood: Likelihood,
    x: &DMatrix<f64>,
    domain: &InputDomain,
    seed: u64,
) -> Result<SparseGp> {
    spec.validate()?;
    let hybrid = kernel.structure == Structure::HybridAdditive;
    let n_cov = spec.covariance_budget();
    let cov_points = match (spec.method.uses_features(), hybrid) {
        (true, true) => n_cov / 2,
        (true, false) => 0,
        (false, _) => n_cov,
    };
    let n_gamma = spec.mean_budget();
    let all = initial_locations(x, cov_points + n_gamma, spec.init, seed)?;
    let gamma = all.rows(cov_points, n_gamma).into_owned();
    let cov_locs = all.rows(0, cov_points).into_owned();
    let basis = if spec.method.uses_features() {
        let inducing = hybrid.then_some(cov_locs);
        CovarianceBasis::Features {
            basis: MultiDimBasis::for_kernel(&kernel, domain, n_cov, inducing)?,
        }
    } else {
        CovarianceBasis::InducingPoints { locations: cov_locs }
    };
    SparseGp::new(kernel, likelihood, basis, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::MaternFamily;

    fn grid(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64)
    }

    #[test]
    fn method_sizes() {
        let x = grid(300);
        let domain = InputDomain::from_data(&x, 0.1).unwrap();
        let k = KernelSpec::one_dim(MaternFamily::Matern32, 0.2, 1.0).unwrap();
        let lik = Likelihood::gaussian(0.1).unwrap();
        let sizes = |method, n_beta, n_gamma| {
            let spec = ModelSpec { method, n_beta, n_gamma, init: InitMode::RandomSubset };
            let m = configure(&spec, k.clone(), lik.clone(), &x, &domain, 1).unwrap();
            (m.n_beta(), m.n_gamma())
        };
        assert_eq!(sizes(Method::Odvff, 21, 179), (21, 179));
        assert_eq!(sizes(Method::Odvgp, 10, 30), (10, 30));
        assert_eq!(sizes(Method::Svgp, 10, 30), (40, 0));
        assert_eq!(sizes(Method::Sgpr, 10, 30), (40, 0));
        assert_eq!(sizes(Method::Vff, 10, 11), (21, 0));
    }

    #[test]
    fn empty_covariance_basis_rejected() {
        let spec = ModelSpec { method: Method::Odvff, n_beta: 0, n_gamma: 10, init: InitMode::Kmeans };
        assert!(matches!(spec.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn locations_are_training_rows_or_centers() {
        let x = grid(50);
        let z = initial_locations(&x, 10, InitMode::RandomSubset, 3).unwrap();
        for r in 0..10 {
            assert!(x.column(0).iter().any(|&v| v == z[(r, 0)]));
        }
        assert_eq!(initial_locations(&x, 10, InitMode::RandomSubset, 3).unwrap(), z);
        assert_eq!(initial_locations(&x, 10, InitMode::Kmeans, 3).unwrap().nrows(), 10);
        assert!(initial_locations(&x, 51, InitMode::Kmeans, 3).is_err());
    }
}
