use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::chol::{chol_psd, CholFactor};
use crate::error::{Error, Result};

/// A symmetric PD matrix kept in one of several structured forms.
#[derive(Clone, Debug, PartialEq)]
pub enum StructuredGram {
    Dense(DMatrix<f64>),
    /// `diag(d) + Σ_j s_j u_j u_jᵀ`, with `u_j` the columns of `factors`.
    DiagPlusRankOnes {
        diag: DVector<f64>,
        factors: DMatrix<f64>,
        signs: DVector<f64>,
    },
    BlockDiag(Vec<StructuredGram>),
    /// `G_1 ⊗ G_2 ⊗ …`, first factor varying slowest.
    Kronecker(Vec<StructuredGram>),
}

impl StructuredGram {
    pub fn size(&self) -> usize {
        match self {
            StructuredGram::Dense(m) => m.nrows(),
            StructuredGram::DiagPlusRankOnes { diag, .. } => diag.len(),
            StructuredGram::BlockDiag(blocks) => blocks.iter().map(|b| b.size()).sum(),
            StructuredGram::Kronecker(fs) => fs.iter().map(|f| f.size()).product(),
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            StructuredGram::Dense(m) => m.clone(),
            StructuredGram::DiagPlusRankOnes {
                diag,
                factors,
                signs,
            } => {
                let mut m = factors * DMatrix::from_diagonal(signs) * factors.transpose();
                for i in 0..diag.len() {
                    m[(i, i)] += diag[i];
                }
                m
            }
            StructuredGram::BlockDiag(blocks) => {
                let n = self.size();
                let mut m = DMatrix::zeros(n, n);
                let mut off = 0;
                for b in blocks {
                    let k = b.size();
                    m.view_mut((off, off), (k, k)).copy_from(&b.dense());
                    off += k;
                }
                m
            }
            StructuredGram::Kronecker(fs) => fs
                .iter()
                .map(|f| f.dense())
                .reduce(|acc, f| acc.kronecker(&f))
                .unwrap_or_else(|| DMatrix::identity(1, 1)),
        }
    }

    /// `G · B`.
    pub fn matmul(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            StructuredGram::Dense(m) => m * b,
            StructuredGram::DiagPlusRankOnes {
                diag,
                factors,
                signs,
            } => {
                let mut inner = factors.transpose() * b;
                for (i, mut row) in inner.row_iter_mut().enumerate() {
                    row *= signs[i];
                }
                let mut out = factors * inner;
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row += b.row(i) * diag[i];
                }
                out
            }
            StructuredGram::BlockDiag(blocks) => {
                let mut out = DMatrix::zeros(b.nrows(), b.ncols());
                let mut off = 0;
                for blk in blocks {
                    let k = blk.size();
                    let part = blk.matmul(&b.rows(off, k).into_owned());
                    out.rows_mut(off, k).copy_from(&part);
                    off += k;
                }
                out
            }
            StructuredGram::Kronecker(fs) => {
                let sizes: Vec<usize> = fs.iter().map(|f| f.size()).collect();
                let ops: Vec<Box<dyn Fn(&DMatrix<f64>) -> DMatrix<f64> + '_>> = fs
                    .iter()
                    .map(|f| Box::new(move |x: &DMatrix<f64>| f.matmul(x)) as Box<dyn Fn(&DMatrix<f64>) -> DMatrix<f64>>)
                    .collect();
                kron_apply(&sizes, &ops, b)
            }
        }
    }

    pub fn matvec(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = self.matmul(&DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
        DVector::from_column_slice(m.as_slice())
    }

    pub fn factor(&self) -> Result<GramFactor> {
        Ok(match self {
            StructuredGram::Dense(m) => GramFactor::Dense(chol_psd(m)?),
            StructuredGram::DiagPlusRankOnes {
                diag,
                factors,
                signs,
            } => GramFactor::Woodbury(WoodburyFactor::new(diag, factors, signs)?),
            StructuredGram::BlockDiag(blocks) => GramFactor::BlockDiag(
                blocks.iter().map(|b| b.factor()).collect::<Result<Vec<_>>>()?,
            ),
            StructuredGram::Kronecker(fs) => GramFactor::Kronecker(
                fs.iter().map(|f| f.factor()).collect::<Result<Vec<_>>>()?,
            ),
        })
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.factor()?.solve(b))
    }

    pub fn logdet(&self) -> Result<f64> {
        Ok(self.factor()?.logdet())
    }
}

/// Reusable factorization of a [`StructuredGram`].
#[derive(Clone, Debug)]
pub enum GramFactor {
    Dense(CholFactor),
    Woodbury(WoodburyFactor),
    BlockDiag(Vec<GramFactor>),
    Kronecker(Vec<GramFactor>),
}

impl GramFactor {
    pub fn size(&self) -> usize {
        match self {
            GramFactor::Dense(c) => c.dim(),
            GramFactor::Woodbury(w) => w.diag.len(),
            GramFactor::BlockDiag(bs) => bs.iter().map(|b| b.size()).sum(),
            GramFactor::Kronecker(fs) => fs.iter().map(|f| f.size()).product(),
        }
    }

    /// `G⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            GramFactor::Dense(c) => c.solve(b),
            GramFactor::Woodbury(w) => w.solve(b),
            GramFactor::BlockDiag(bs) => {
                let mut out = DMatrix::zeros(b.nrows(), b.ncols());
                let mut off = 0;
                for f in bs {
                    let k = f.size();
                    let part = f.solve(&b.rows(off, k).into_owned());
                    out.rows_mut(off, k).copy_from(&part);
                    off += k;
                }
                out
            }
            GramFactor::Kronecker(fs) => {
                let sizes: Vec<usize> = fs.iter().map(|f| f.size()).collect();
                let ops: Vec<Box<dyn Fn(&DMatrix<f64>) -> DMatrix<f64> + '_>> = fs
                    .iter()
                    .map(|f| Box::new(move |x: &DMatrix<f64>| f.solve(x)) as Box<dyn Fn(&DMatrix<f64>) -> DMatrix<f64>>)
                    .collect();
                kron_apply(&sizes, &ops, b)
            }
        }
    }

    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = self.solve(&DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
        DVector::from_column_slice(m.as_slice())
    }

    pub fn logdet(&self) -> f64 {
        match self {
            GramFactor::Dense(c) => c.logdet(),
            GramFactor::Woodbury(w) => w.logdet,
            GramFactor::BlockDiag(bs) => bs.iter().map(|b| b.logdet()).sum(),
            GramFactor::Kronecker(fs) => {
                let n: usize = fs.iter().map(|f| f.size()).product();
                fs.iter().map(|f| (n / f.size()) as f64 * f.logdet()).sum()
            }
        }
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.size();
        let mut inv = self.solve(&DMatrix::identity(n, n));
        inv = (&inv + inv.transpose()) * 0.5;
        inv
    }
}

/// Precomputed Woodbury solve for `diag(d) + U diag(s) Uᵀ`.
///
/// The capacitance `diag(1/s) + Uᵀ D⁻¹ U` may be indefinite when some signs
/// are negative; it is handled through its symmetric eigendecomposition and
/// its inertia is used to certify that the implied matrix is SPD.
#[derive(Clone, Debug)]
pub struct WoodburyFactor {
    diag: DVector<f64>,
    /// `D⁻¹ U` restricted to the columns with nonzero sign.
    dinv_u: DMatrix<f64>,
    cap_vecs: DMatrix<f64>,
    cap_vals: DVector<f64>,
    logdet: f64,
}

impl WoodburyFactor {
    pub fn new(diag: &DVector<f64>, factors: &DMatrix<f64>, signs: &DVector<f64>) -> Result<Self> {
        let n = diag.len();
        if factors.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: factors.nrows(),
            });
        }
        if signs.len() != factors.ncols() {
            return Err(Error::DimensionMismatch {
                expected: factors.ncols(),
                got: signs.len(),
            });
        }
        if let Some(&bad) = diag.iter().find(|d| !(**d > 0.0)) {
            return Err(Error::NotSpd { pivot: bad });
        }
        let active: Vec<usize> = (0..signs.len()).filter(|&j| signs[j] != 0.0).collect();
        let r = active.len();
        let u = DMatrix::from_fn(n, r, |i, j| factors[(i, active[j])]);
        let s: Vec<f64> = active.iter().map(|&j| signs[j]).collect();
        let dinv_u = DMatrix::from_fn(n, r, |i, j| u[(i, j)] / diag[i]);
        let diag_logdet = diag.iter().map(|d| d.ln()).sum::<f64>();
        if r == 0 {
            return Ok(WoodburyFactor {
                diag: diag.clone(),
                dinv_u,
                cap_vecs: DMatrix::zeros(0, 0),
                cap_vals: DVector::zeros(0),
                logdet: diag_logdet,
            });
        }
        let mut cap = u.transpose() * &dinv_u;
        cap = (&cap + cap.transpose()) * 0.5;
        for j in 0..r {
            cap[(j, j)] += 1.0 / s[j];
        }
        let eig = SymmetricEigen::new(cap);
        // Inertia: #neg(D + UΣUᵀ) = #pos(cap) - #pos(Σ), given D > 0.
        let tol = 1e-13 * eig.eigenvalues.amax().max(1.0);
        let positive_signs = s.iter().filter(|v| **v > 0.0).count();
        let positive_cap = eig.eigenvalues.iter().filter(|v| **v > tol).count();
        let near_zero = eig.eigenvalues.iter().any(|v| v.abs() <= tol);
        if near_zero || positive_cap != positive_signs {
            let pivot = eig
                .eigenvalues
                .iter()
                .copied()
                .min_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(0.0);
            return Err(Error::NotSpd { pivot: -pivot.abs() });
        }
        let logdet = diag_logdet
            + eig.eigenvalues.iter().map(|v| v.abs().ln()).sum::<f64>()
            + s.iter().map(|v| v.abs().ln()).sum::<f64>();
        Ok(WoodburyFactor {
            diag: diag.clone(),
            dinv_u,
            cap_vecs: eig.eigenvectors,
            cap_vals: eig.eigenvalues,
            logdet,
        })
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for (i, mut row) in x.row_iter_mut().enumerate() {
            row /= self.diag[i];
        }
        if self.cap_vals.is_empty() {
            return x;
        }
        // x -= D⁻¹U cap⁻¹ Uᵀ D⁻¹ b, with Uᵀ D⁻¹ b = (D⁻¹U)ᵀ b.
        let mut t = self.cap_vecs.transpose() * (self.dinv_u.transpose() * b);
        for (j, mut row) in t.row_iter_mut().enumerate() {
            row /= self.cap_vals[j];
        }
        x -= &self.dinv_u * (&self.cap_vecs * t);
        x
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }
}

/// `(diag(d) + Σ s_j u_j u_jᵀ)⁻¹ B`.
pub fn woodbury_solve(
    diag: &DVector<f64>,
    factors: &DMatrix<f64>,
    signs: &DVector<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if b.nrows() != diag.len() {
        return Err(Error::DimensionMismatch {
            expected: diag.len(),
            got: b.nrows(),
        });
    }
    Ok(WoodburyFactor::new(diag, factors, signs)?.solve(b))
}

/// Applies `op_1 ⊗ op_2 ⊗ …` to each column of `b` by successive mode products.
fn kron_apply(
    sizes: &[usize],
    ops: &[Box<dyn Fn(&DMatrix<f64>) -> DMatrix<f64> + '_>],
    b: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n: usize = sizes.iter().product();
    assert_eq!(b.nrows(), n, "kronecker operand size");
    let mut out = b.clone();
    for col in 0..b.ncols() {
        let mut t: Vec<f64> = out.column(col).iter().copied().collect();
        for (d, op) in ops.iter().enumerate() {
            let nd = sizes[d];
            let post: usize = sizes[d + 1..].iter().product();
            let pre = n / (nd * post);
            let fibers = DMatrix::from_fn(nd, pre * post, |i, f| {
                let (p, q) = (f / post, f % post);
                t[(p * nd + i) * post + q]
            });
            let res = op(&fibers);
            for f in 0..pre * post {
                let (p, q) = (f / post, f % post);
                for i in 0..nd {
                    t[(p * nd + i) * post + q] = res[(i, f)];
                }
            }
        }
        out.column_mut(col).copy_from_slice(&t);
    }
    out
}
