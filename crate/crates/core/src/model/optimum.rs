use nalgebra::{DMatrix, DVector};

use super::{ParamGrads, SparseGp};
use crate::error::{Error, Result};
use crate::linalg::{chol_psd, CholFactor};

/// Largest `N` accepted by the dense full-batch optimum.
pub const DEFAULT_FULL_BATCH_CAP: usize = 20_000;

const CHUNK: usize = 2048;

/// Cholesky of a symmetric PD matrix after symmetric diagonal scaling, which
/// keeps the jitter ladder meaningful when diagonal entries span many orders
/// of magnitude. Returns the factor of the scaled matrix and the scaling.
fn scaled_chol(a: &DMatrix<f64>) -> Result<(CholFactor, DVector<f64>)> {
    let d = DVector::from_fn(a.nrows(), |i, _| 1.0 / a[(i, i)].abs().max(f64::MIN_POSITIVE).sqrt());
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| d[i] * a[(i, j)] * d[j]);
    let scaled = (&scaled + scaled.transpose()) * 0.5;
    Ok((chol_psd(&scaled)?, d))
}

pub(crate) fn solve_spd_scaled(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (f, d) = scaled_chol(a)?;
    let rhs = b.component_mul(&d);
    Ok(f.solve_vec(&rhs).component_mul(&d))
}

/// Lower Cholesky factor of `K (K + M)⁻¹ K` computed without forming the
/// product: with `K + M = L_P L_Pᵀ` and `W = L_P⁻¹ K = Q R`, the product is
/// `Rᵀ R`.
pub(crate) fn sandwich_factor(k: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = k + m;
    let (f, d) = scaled_chol(&p)?;
    let mut dk = k.clone();
    for (i, mut row) in dk.row_iter_mut().enumerate() {
        row *= d[i];
    }
    let w = f.solve_lower(&dk);
    let mut r = w.qr().r();
    for i in 0..r.nrows() {
        if r[(i, i)] < 0.0 {
            let mut row = r.row_mut(i);
            row *= -1.0;
        }
    }
    Ok(r.transpose())
}

impl SparseGp {
    /// Sets the variational parameters to the Gaussian-likelihood optimum
    /// for the current hyperparameters and locations.
    pub fn set_analytic_optimum(&mut self, x: &DMatrix<f64>, y: &DVector<f64>, cap: usize) -> Result<()> {
        let noise = self.likelihood.noise_variance().ok_or_else(|| {
            Error::InvalidInput("closed-form optimum requires a Gaussian likelihood".into())
        })?;
        self.check_inputs(x)?;
        if y.len() != x.nrows() || x.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        let n = x.nrows();
        if n > cap {
            return Err(Error::TooLarge { n, cap });
        }
        let prior = self.prior()?;
        let g = self.n_gamma();
        let b = self.n_beta();
        let na = g + b;

        let mut m = DMatrix::zeros(na, na);
        let mut r = DVector::zeros(na);
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let xc = x.rows(start, len).into_owned();
            let mut kax = DMatrix::zeros(na, len);
            if g > 0 {
                kax.rows_mut(0, g).copy_from(&self.kernel.matrix(&self.state.gamma, &xc)?);
            }
            kax.rows_mut(g, b).copy_from(&self.basis.cross(&self.kernel, &xc)?);
            m += &kax * kax.transpose();
            r += &kax * y.rows(start, len);
            start += len;
        }

        let mut k_alpha = DMatrix::zeros(na, na);
        if g > 0 {
            k_alpha.view_mut((0, 0), (g, g)).copy_from(&prior.kg);
            k_alpha.view_mut((g, 0), (b, g)).copy_from(&prior.kbg);
            k_alpha.view_mut((0, g), (g, b)).copy_from(&prior.kbg.transpose());
        }
        k_alpha.view_mut((g, g), (b, b)).copy_from(&prior.kb);
        let system = &m + k_alpha * noise;
        let a_alpha = solve_spd_scaled(&system, &r)?;

        let a_g = a_alpha.rows(0, g).into_owned();
        let mut a_b = a_alpha.rows(g, b).into_owned();
        if g > 0 {
            a_b += prior.kf.solve_vec(&(&prior.kbg * &a_g));
        }
        let m_bb = m.view((g, g), (b, b)).into_owned() / noise;
        self.state.chol_s = sandwich_factor(&prior.kb, &m_bb)?;
        self.state.a_gamma = a_g;
        self.state.a_beta = a_b;
        Ok(())
    }
}

impl SparseGp {
    /// Natural-gradient step of size `rho` on the `β` block `(a_β, S)`.
    /// Halves the step until the new precision is positive definite and
    /// returns the step actually taken (zero if none succeeded).
    pub fn natural_gradient_step(&mut self, grads: &ParamGrads, rho: f64) -> Result<f64> {
        if rho == 0.0 {
            return Ok(0.0);
        }
        let prior = self.prior()?;
        let l = &self.state.chol_s;
        let b = l.nrows();
        let linv = l.solve_lower_triangular(&DMatrix::identity(b, b)).ok_or_else(|| Error::NonFinite {
            iteration: 0,
            block: "covariance factor".into(),
        })?;
        let sinv = linv.transpose() * &linv;
        let m = &prior.kb * &self.state.a_beta;
        let theta1 = &sinv * &m;
        let d1 = prior.kf.solve_vec(&grads.a_beta) - &grads.s * &m * 2.0;
        let mut step = rho;
        for _ in 0..30 {
            let p = &sinv - &grads.s * (2.0 * step);
            if let Some((f, d)) = exact_scaled_chol(&p) {
                let t1 = &theta1 + &d1 * step;
                let m_new = f.solve_vec(&t1.component_mul(&d)).component_mul(&d);
                // S' = P'⁻¹ = (L_s⁻¹ D)ᵀ (L_s⁻¹ D); its lower factor is Rᵀ from QR
                let w = f.solve_lower(&DMatrix::from_diagonal(&d));
                let mut r = w.qr().r();
                for i in 0..b {
                    if r[(i, i)] < 0.0 {
                        let mut row = r.row_mut(i);
                        row *= -1.0;
                    }
                }
                self.state.chol_s = r.transpose();
                self.state.a_beta = prior.kf.solve_vec(&m_new);
                return Ok(step);
            }
            step *= 0.5;
        }
        log::warn!("natural-gradient step rejected at every step size");
        Ok(0.0)
    }
}

fn exact_scaled_chol(a: &DMatrix<f64>) -> Option<(CholFactor, DVector<f64>)> {
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let d = DVector::from_fn(a.nrows(), |i, _| 1.0 / a[(i, i)].abs().max(f64::MIN_POSITIVE).sqrt());
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| d[i] * a[(i, j)] * d[j]);
    let scaled = (&scaled + scaled.transpose()) * 0.5;
    Some((CholFactor::exact(&scaled)?, d))
}
