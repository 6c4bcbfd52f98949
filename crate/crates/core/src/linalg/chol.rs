use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const JITTER_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Cholesky factor of a symmetric PSD matrix, with the jitter that had to be
/// added to the diagonal (absolute, in the units of the matrix).
#[derive(Clone, Debug)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

/// Cholesky with escalating diagonal jitter (relative to the mean diagonal).
pub fn chol_psd(m: &DMatrix<f64>) -> Result<CholFactor> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "cholesky needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(CholFactor {
            chol: Cholesky::new(DMatrix::zeros(0, 0)).expect("empty cholesky"),
            jitter: 0.0,
        });
    }
    let scale = m.trace() / n as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::NotPsd { max_jitter: 0.0 });
    }
    for rel in JITTER_LADDER {
        let jitter = rel * scale;
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(a) {
            return Ok(CholFactor { chol, jitter });
        }
    }
    Err(Error::NotPsd {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * scale,
    })
}

impl CholFactor {
    /// Factor without jitter; `None` if the matrix is not numerically PD.
    pub fn exact(m: &DMatrix<f64>) -> Option<Self> {
        Cholesky::new(m.clone()).map(|chol| CholFactor { chol, jitter: 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is positive")
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn identity_needs_no_jitter() {
        let f = chol_psd(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(f.jitter(), 0.0);
        assert_eq!(f.l(), DMatrix::identity(4, 4));
    }

    #[test]
    fn singular_ones_gets_jitter() {
        let f = chol_psd(&DMatrix::from_element(2, 2, 1.0)).unwrap();
        assert!(f.jitter() > 0.0);
    }

    #[test]
    fn indefinite_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(chol_psd(&m), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn reconstructs_random_spd() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(30, 30, |_, _| rng.random::<f64>() - 0.5);
        let m = &a * a.transpose() + DMatrix::identity(30, 30) * 0.1;
        let f = chol_psd(&m).unwrap();
        let l = f.l();
        let err = (&l * l.transpose() - &m).norm() / m.norm();
        assert!(err <= 1e-10);
        let dense_logdet = m.clone().lu().determinant().ln();
        assert!((f.logdet() - dense_logdet).abs() <= 1e-8 * dense_logdet.abs().max(1.0));
    }
}
