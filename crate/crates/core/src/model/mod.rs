//! Orthogonally decoupled sparse variational GP.
//!
//! The posterior mean uses an inducing-point basis `γ` and a covariance basis
//! `β` (Fourier features or inducing points); the covariance uses `β` only.
//! With `c = a_β - K_β⁻¹ K_βγ a_γ`:
//!
//! ```text
//! m(x) = k_xγ a_γ + k_xβ c
//! s(x) = k(x,x) + k_xβ K_β⁻¹ (S - K_β) K_β⁻¹ k_βx
//! ```
//!
//! SVGP, SGPR, ODVGP and VFF are configurations of the same model.

mod baselines;
mod configure;
mod elbo;
mod optimum;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier_basis::MultiDimBasis;
use crate::kernels::{KernelSpec, Part};
use crate::likelihoods::Likelihood;
use crate::linalg::{chol_psd, GramFactor, StructuredGram};

pub use baselines::{
    collapsed_bound, exact_gp_log_marginal, exact_gp_predict, sgpr_dense_predict, inducing_optimum,
    inducing_predict, BaselineState,
};
pub use configure::{configure, initial_locations, InitMode, ModelSpec};
pub use elbo::{ElboGrad, ParamGrads};
pub use optimum::DEFAULT_FULL_BATCH_CAP;

/// Basis spanning the posterior covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceBasis {
    Features { basis: MultiDimBasis },
    InducingPoints { locations: DMatrix<f64> },
}

impl CovarianceBasis {
    pub fn len(&self) -> usize {
        match self {
            CovarianceBasis::Features { basis } => basis.len(),
            CovarianceBasis::InducingPoints { locations } => locations.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gram(&self, kernel: &KernelSpec) -> Result<StructuredGram> {
        match self {
            CovarianceBasis::Features { basis } => basis.gram(kernel),
            CovarianceBasis::InducingPoints { locations } => Ok(StructuredGram::Dense(kernel.gram(locations, Part::Full)?)),
        }
    }

    /// `K_{β,x}`.
    pub fn cross(&self, kernel: &KernelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            CovarianceBasis::Features { basis } => basis.cross_covariance(kernel, x),
            CovarianceBasis::InducingPoints { locations } => kernel.matrix(locations, x),
        }
    }

    /// Returns `(∂/∂params, ∂/∂locations)` given `∂L/∂K_β`.
    fn gram_backward(&self, kernel: &KernelSpec, grad: &DMatrix<f64>) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
        match self {
            CovarianceBasis::Features { basis } => Ok((basis.gram_backward(kernel, grad)?, None)),
            CovarianceBasis::InducingPoints { locations } => {
                let (p, dz) = kernel.gram_backward(locations, grad, Part::Full);
                Ok((p, Some(dz)))
            }
        }
    }

    /// Returns `(∂/∂params, ∂/∂locations, ∂/∂x)` given `∂L/∂K_{β,x}`.
    fn cross_backward(
        &self,
        kernel: &KernelSpec,
        x: &DMatrix<f64>,
        grad: &DMatrix<f64>,
        want_dx: bool,
    ) -> Result<(Vec<f64>, Option<DMatrix<f64>>, Option<DMatrix<f64>>)> {
        match self {
            CovarianceBasis::Features { basis } => {
                let (p, dx) = basis.cross_backward(kernel, x, grad, want_dx)?;
                Ok((p, None, dx))
            }
            CovarianceBasis::InducingPoints { locations } => {
                let mg = kernel.matrix_backward(locations, x, grad, Part::Full, true, want_dx);
                Ok((mg.params, mg.dx1, mg.dx2))
            }
        }
    }

    pub fn locations(&self) -> Option<&DMatrix<f64>> {
        match self {
            CovarianceBasis::InducingPoints { locations } => Some(locations),
            CovarianceBasis::Features { .. } => None,
        }
    }

    pub fn locations_mut(&mut self) -> Option<&mut DMatrix<f64>> {
        match self {
            CovarianceBasis::InducingPoints { locations } => Some(locations),
            CovarianceBasis::Features { .. } => None,
        }
    }

    /// Projects locations onto the Fourier intervals. Outside them `φ(z)` is
    /// no longer the cross-covariance and `K_γ - K_γβ K_β⁻¹ K_βγ` can lose
    /// positive semi-definiteness.
    pub fn clamp_inside(&self, z: &mut DMatrix<f64>) {
        if let CovarianceBasis::Features { basis } = self {
            basis.clamp_inside(z);
        }
    }

    fn count_outside(&self, x: &DMatrix<f64>) -> usize {
        match self {
            CovarianceBasis::Features { basis } => basis.count_outside(x),
            CovarianceBasis::InducingPoints { .. } => 0,
        }
    }
}

/// Variational parameters. `S = L Lᵀ` is held through its lower factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub a_gamma: DVector<f64>,
    pub a_beta: DVector<f64>,
    pub chol_s: DMatrix<f64>,
    /// Mean-basis inducing locations, one per row.
    pub gamma: DMatrix<f64>,
}

impl VariationalState {
    pub fn s(&self) -> DMatrix<f64> {
        &self.chol_s * self.chol_s.transpose()
    }

    /// Natural parameters `(S⁻¹ m, -½ S⁻¹)` of `q(β) = N(K_β a_β, S)`.
    pub fn natural_parameters(&self, k_beta: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let sinv = chol_psd(&self.s())?.inverse();
        let m = k_beta * &self.a_beta;
        Ok((&sinv * m, sinv * -0.5))
    }
}

/// Per-point predictive distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: DVector<f64>,
    /// Latent variance `s(x)`, clamped at zero.
    pub variance: DVector<f64>,
    /// Noise variance for Gaussian likelihoods, zero otherwise.
    pub noise_variance: f64,
    /// Number of negative variances clamped to zero.
    pub clamped: usize,
    /// Number of query points outside the Fourier intervals.
    pub outside_domain: usize,
}

impl PredictiveDistribution {
    pub fn observation_variance(&self) -> DVector<f64> {
        self.variance.add_scalar(self.noise_variance)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Odvff,
    Odvgp,
    Svgp,
    Sgpr,
    Vff,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Odvff => "ODVFF",
            Method::Odvgp => "ODVGP",
            Method::Svgp => "SVGP",
            Method::Sgpr => "SGPR",
            Method::Vff => "VFF",
        }
    }

    /// Collapsed full-batch methods whose variational parameters are set in
    /// closed form.
    pub fn is_analytic(self) -> bool {
        matches!(self, Method::Sgpr | Method::Vff)
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Method::Odvff | Method::Vff)
    }

    pub fn has_mean_basis(self) -> bool {
        matches!(self, Method::Odvff | Method::Odvgp)
    }

    /// SVGP takes first-order steps on `(a_β, L)`; the decoupled methods use
    /// natural-gradient steps on the β-block.
    pub fn uses_natural_gradient(self) -> bool {
        matches!(self, Method::Odvff | Method::Odvgp)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "odvff" => Ok(Method::Odvff),
            "odvgp" => Ok(Method::Odvgp),
            "svgp" => Ok(Method::Svgp),
            "sgpr" => Ok(Method::Sgpr),
            "vff" => Ok(Method::Vff),
            other => Err(Error::InvalidInput(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseGp {
    pub kernel: KernelSpec,
    pub likelihood: Likelihood,
    pub basis: CovarianceBasis,
    pub state: VariationalState,
}

/// Prior quantities that depend on hyperparameters and locations only.
pub(crate) struct Prior {
    pub kb: DMatrix<f64>,
    pub kf: GramFactor,
    pub kbg: DMatrix<f64>,
    pub kg: DMatrix<f64>,
    /// `K_β⁻¹ K_βγ a_γ`.
    pub p: DVector<f64>,
    /// `a_β - p`.
    pub c: DVector<f64>,
}

impl SparseGp {
    /// Model initialized at the prior: `a = 0`, `S = K_β`.
    pub fn new(kernel: KernelSpec, likelihood: Likelihood, basis: CovarianceBasis, gamma: DMatrix<f64>) -> Result<Self> {
        kernel.validate()?;
        likelihood.validate()?;
        if let CovarianceBasis::Features { basis } = &basis {
            basis.check_kernel(&kernel)?;
        }
        if basis.is_empty() {
            return Err(Error::InvalidBasis("covariance basis must have at least one element".into()));
        }
        if gamma.nrows() > 0 && gamma.ncols() != kernel.dim() {
            return Err(Error::DimensionMismatch {
                expected: kernel.dim(),
                got: gamma.ncols(),
            });
        }
        let gamma = if gamma.nrows() == 0 {
            DMatrix::zeros(0, kernel.dim())
        } else {
            gamma
        };
        let b = basis.len();
        let mut model = SparseGp {
            state: VariationalState {
                a_gamma: DVector::zeros(gamma.nrows()),
                a_beta: DVector::zeros(b),
                chol_s: DMatrix::identity(b, b),
                gamma,
            },
            kernel,
            likelihood,
            basis,
        };
        model.reset_to_prior()?;
        Ok(model)
    }

    /// Sets `a = 0` and `S = K_β`.
    pub fn reset_to_prior(&mut self) -> Result<()> {
        let kb = self.basis.gram(&self.kernel)?.dense();
        self.state.a_gamma.fill(0.0);
        self.state.a_beta.fill(0.0);
        self.state.chol_s = chol_psd(&kb)?.l();
        Ok(())
    }

    pub fn n_gamma(&self) -> usize {
        self.state.gamma.nrows()
    }

    pub fn n_beta(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub(crate) fn prior(&self) -> Result<Prior> {
        let gram = self.basis.gram(&self.kernel)?;
        let kb = gram.dense();
        let kf = gram.factor()?;
        let z = &self.state.gamma;
        let (kbg, kg) = if z.nrows() > 0 {
            (self.basis.cross(&self.kernel, z)?, self.kernel.gram(z, Part::Full)?)
        } else {
            (DMatrix::zeros(kb.nrows(), 0), DMatrix::zeros(0, 0))
        };
        let p = if z.nrows() > 0 {
            kf.solve_vec(&(&kbg * &self.state.a_gamma))
        } else {
            DVector::zeros(kb.nrows())
        };
        let c = &self.state.a_beta - &p;
        Ok(Prior { kb, kf, kbg, kg, p, c })
    }

    fn check_inputs(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite input".into()));
        }
        Ok(())
    }

    /// Predictive marginals at the rows of `xs`.
    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        self.check_inputs(xs)?;
        let prior = self.prior()?;
        let n = xs.nrows();
        let mut mean = DVector::zeros(n);
        let mut variance = DVector::zeros(n);
        let mut clamped = 0;
        const CHUNK: usize = 2048;
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let x = xs.rows(start, len).into_owned();
            let (m, s) = self.latent_moments(&prior, &x)?;
            for i in 0..len {
                mean[start + i] = m[i];
                if s[i] < 0.0 {
                    clamped += 1;
                }
                variance[start + i] = s[i].max(0.0);
            }
            start += len;
        }
        if n > 0 && clamped as f64 > 1e-3 * n as f64 {
            log::warn!("{clamped} of {n} predictive variances were negative and clamped to zero");
        }
        let outside = self.basis.count_outside(xs);
        if outside > 0 {
            log::warn!("{outside} query points lie outside the Fourier feature intervals");
        }
        Ok(PredictiveDistribution {
            mean,
            variance,
            noise_variance: self.likelihood.noise_variance().unwrap_or(0.0),
            clamped,
            outside_domain: outside,
        })
    }

    /// Unclamped `(m(x), s(x))`.
    pub(crate) fn latent_moments(&self, prior: &Prior, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let kbx = self.basis.cross(&self.kernel, x)?;
        let a = prior.kf.solve(&kbx);
        let mut mean = kbx.transpose() * &prior.c;
        if self.n_gamma() > 0 {
            let kgx = self.kernel.matrix(&self.state.gamma, x)?;
            mean += kgx.transpose() * &self.state.a_gamma;
        }
        let q = self.state.chol_s.transpose() * &a;
        let kdiag = self.kernel.diag_value();
        let var = DVector::from_fn(x.nrows(), |i, _| {
            let nys: f64 = a.column(i).dot(&kbx.column(i));
            kdiag - nys + q.column(i).norm_squared()
        });
        Ok((mean, var))
    }

    /// `KL(q || p)`.
    pub fn kl_divergence(&self) -> Result<f64> {
        let prior = self.prior()?;
        Ok(self.kl_with(&prior))
    }

    pub(crate) fn kl_with(&self, prior: &Prior) -> f64 {
        let l = &self.state.chol_s;
        let b = l.nrows() as f64;
        let kinv_l = prior.kf.solve(l);
        let trace = kinv_l.component_mul(l).sum();
        let logdet_s = 2.0 * l.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>();
        let ab = &self.state.a_beta;
        let mut quad = ab.dot(&(&prior.kb * ab));
        if self.n_gamma() > 0 {
            let ag = &self.state.a_gamma;
            quad += ag.dot(&(&prior.kg * ag)) - (&prior.kbg * ag).dot(&prior.p);
        }
        0.5 * (trace - b + quad - logdet_s + prior.kf.logdet())
    }

    /// Log-space hyperparameters: kernel followed by likelihood.
    pub fn hyperparameters(&self) -> Vec<f64> {
        let mut p = self.kernel.params();
        p.extend(self.likelihood.params());
        p
    }

    pub fn set_hyperparameters(&mut self, params: &[f64]) -> Result<()> {
        let nk = self.kernel.n_params();
        if params.len() != nk + self.likelihood.n_params() {
            return Err(Error::DimensionMismatch {
                expected: nk + self.likelihood.n_params(),
                got: params.len(),
            });
        }
        self.kernel.set_params(&params[..nk])?;
        self.likelihood.set_params(&params[nk..])
    }

    pub fn hyperparameter_names(&self) -> Vec<String> {
        let mut n = self.kernel.param_names();
        if self.likelihood.n_params() > 0 {
            n.push("log_noise_variance".into());
        }
        n
    }
}
