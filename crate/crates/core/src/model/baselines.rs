//! Dense reference formulas for the classic sparse GP models. These are
//! independent of the decoupled model's code path and serve as oracles.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CovarianceBasis, PredictiveDistribution, SparseGp};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, Part};
use crate::linalg::chol_psd;

/// Inducing-point posterior `q(u) = N(b, S_u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub locations: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl BaselineState {
    /// Reads `(u, b, S_u)` off an SVGP-configured model: `b = K_uu a_β`.
    pub fn from_model(model: &SparseGp) -> Result<Self> {
        let u = match &model.basis {
            CovarianceBasis::InducingPoints { locations } if model.n_gamma() == 0 => locations.clone(),
            _ => {
                return Err(Error::InvalidBasis(
                    "baseline state needs an inducing-point basis and no mean basis".into(),
                ))
            }
        };
        let kuu = model.kernel.gram(&u, Part::Full)?;
        Ok(BaselineState {
            mean: &kuu * &model.state.a_beta,
            covariance: model.state.s(),
            locations: u,
        })
    }
}

/// Coupled-basis predictive: `m = k_xu K⁻¹ b`, `s = k + k_xu K⁻¹ (S - K) K⁻¹ k_ux`.
pub fn inducing_predict(
    kernel: &KernelSpec,
    state: &BaselineState,
    noise_variance: f64,
    xs: &DMatrix<f64>,
) -> Result<PredictiveDistribution> {
    let u = &state.locations;
    let kuu = kernel.gram(u, Part::Full)?;
    let f = chol_psd(&kuu)?;
    let a_alpha = f.solve_vec(&state.mean);
    let big_a = -f.solve(&f.solve(&(&state.covariance - &kuu)).transpose());
    let kux = kernel.matrix(u, xs)?;
    let mean = kux.transpose() * a_alpha;
    let kd = kernel.diag_value();
    let variance = DVector::from_fn(xs.nrows(), |i, _| {
        let k = kux.column(i);
        kd - k.dot(&(&big_a * k))
    });
    Ok(PredictiveDistribution {
        mean,
        variance: variance.map(|v| v.max(0.0)),
        noise_variance,
        clamped: 0,
        outside_domain: 0,
    })
}

/// Optimal `(b, S_u)` for a Gaussian likelihood:
/// `S_u = K (K + σ⁻² K_uf K_fu)⁻¹ K`, `b = σ⁻² S_u K⁻¹ K_uf y`.
pub fn inducing_optimum(
    kernel: &KernelSpec,
    u: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: f64,
) -> Result<BaselineState> {
    let kuu = kernel.gram(u, Part::Full)?;
    let kuf = kernel.matrix(u, x)?;
    let p = &kuu + &kuf * kuf.transpose() / noise_variance;
    let pf = chol_psd(&p)?;
    let s = &kuu * pf.solve(&kuu);
    let s = (&s + s.transpose()) * 0.5;
    let kf = chol_psd(&kuu)?;
    let mean = &s * kf.solve_vec(&(&kuf * y)) / noise_variance;
    Ok(BaselineState {
        locations: u.clone(),
        mean,
        covariance: s,
    })
}

/// Dense SGPR predictive with generic inducing variables described by their
/// covariances `K_bb`, `K_bx` (train) and `K_b*` (test).
pub fn sgpr_dense_predict(
    kbb: &DMatrix<f64>,
    kbx: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: f64,
    kbs: &DMatrix<f64>,
    kdiag_test: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let sigma = kbb + kbx * kbx.transpose() / noise_variance;
    let sf = chol_psd(&sigma)?;
    let kf = chol_psd(kbb)?;
    let mean = kbs.transpose() * sf.solve_vec(&(kbx * y)) / noise_variance;
    let t1 = kf.solve(kbs);
    let t2 = sf.solve(kbs);
    let var = DVector::from_fn(kbs.ncols(), |i, _| {
        kdiag_test[i] - kbs.column(i).dot(&t1.column(i)) + kbs.column(i).dot(&t2.column(i))
    });
    Ok((mean, var))
}

/// Collapsed bound `log N(y | 0, Q + σ²I) - tr(K - Q) / (2σ²)` with
/// `Q = K_xb K_bb⁻¹ K_bx`, formed densely.
pub fn collapsed_bound(kbb: &DMatrix<f64>, kbx: &DMatrix<f64>, kdiag: &DVector<f64>, y: &DVector<f64>, noise_variance: f64) -> Result<f64> {
    let n = y.len();
    let q = kbx.transpose() * chol_psd(kbb)?.solve(kbx);
    let mut c = q.clone();
    for i in 0..n {
        c[(i, i)] += noise_variance;
    }
    let cf = chol_psd(&c)?;
    let alpha = cf.solve_vec(y);
    let trace: f64 = (0..n).map(|i| kdiag[i] - q[(i, i)]).sum();
    Ok(-0.5 * y.dot(&alpha) - 0.5 * cf.logdet() - 0.5 * n as f64 * std::f64::consts::TAU.ln() - trace / (2.0 * noise_variance))
}

/// `log N(y | 0, K + σ²I)`.
pub fn exact_gp_log_marginal(kernel: &KernelSpec, x: &DMatrix<f64>, y: &DVector<f64>, noise_variance: f64) -> Result<f64> {
    let n = y.len();
    let mut k = kernel.gram(x, Part::Full)?;
    for i in 0..n {
        k[(i, i)] += noise_variance;
    }
    let f = chol_psd(&k)?;
    Ok(-0.5 * y.dot(&f.solve_vec(y)) - 0.5 * f.logdet() - 0.5 * n as f64 * std::f64::consts::TAU.ln())
}

/// Exact GP posterior latent mean and variance.
pub fn exact_gp_predict(
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: f64,
    xs: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut k = kernel.gram(x, Part::Full)?;
    for i in 0..x.nrows() {
        k[(i, i)] += noise_variance;
    }
    let f = chol_psd(&k)?;
    let ks = kernel.matrix(x, xs)?;
    let mean = ks.transpose() * f.solve_vec(y);
    let t = f.solve(&ks);
    let kd = kernel.diag_value();
    let var = DVector::from_fn(xs.nrows(), |i, _| kd - ks.column(i).dot(&t.column(i)));
    Ok((mean, var))
}
