//! Truncated harmonic Fourier features on an interval and their RKHS Gram
//! matrices for Matérn-1/2, 3/2 and 5/2 kernels.
//!
//! For a 1-D Matérn kernel with Markov order `p` the Gram of the features
//! `[1, cos(ω_i(x-a)), sin(ω_i(x-a))]` under the kernel's RKHS inner product
//! is a diagonal matrix plus a rank-`(p+1)` correction coming from the
//! boundary term of the norm at `a`. Both parts are formed in closed form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{InputDomain, KernelSpec, MaternFamily, Part, Structure};
use crate::linalg::StructuredGram;

/// Harmonic frequencies `2πi / (b - a)` for `i = 1..=F`.
pub fn make_frequencies(n_freq: usize, lower: f64, upper: f64) -> Result<Vec<f64>> {
    if n_freq == 0 {
        return Err(Error::InvalidBasis("frequency count F must be at least 1".into()));
    }
    if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
        return Err(Error::InvalidBasis(format!("degenerate interval [{lower}, {upper}]")));
    }
    let w = std::f64::consts::TAU / (upper - lower);
    Ok((1..=n_freq).map(|i| w * i as f64).collect())
}

/// Features `[1, cos(ω_1(x-a)), …, cos(ω_F(x-a)), sin(ω_1(x-a)), …, sin(ω_F(x-a))]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierBasis {
    pub lower: f64,
    pub upper: f64,
    pub n_freq: usize,
}

impl FourierBasis {
    pub fn new(n_freq: usize, lower: f64, upper: f64) -> Result<Self> {
        make_frequencies(n_freq, lower, upper)?;
        Ok(FourierBasis { lower, upper, n_freq })
    }

    /// Largest basis with at most `target` features (`F = ⌊(target-1)/2⌋`, at least 1).
    pub fn with_target(target: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new((target.saturating_sub(1) / 2).max(1), lower, upper)
    }

    pub fn len(&self) -> usize {
        2 * self.n_freq + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let w = std::f64::consts::TAU / (self.upper - self.lower);
        (1..=self.n_freq).map(|i| w * i as f64).collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    pub fn eval_features(&self, x: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        self.eval_into(x, out.as_mut_slice());
        out
    }

    fn eval_into(&self, x: f64, out: &mut [f64]) {
        let f = self.n_freq;
        let w = std::f64::consts::TAU / (self.upper - self.lower);
        let t = x - self.lower;
        out[0] = 1.0;
        for i in 1..=f {
            let (s, c) = (w * i as f64 * t).sin_cos();
            out[i] = c;
            out[f + i] = s;
        }
    }

    fn eval_deriv_into(&self, x: f64, out: &mut [f64]) {
        let f = self.n_freq;
        let w = std::f64::consts::TAU / (self.upper - self.lower);
        let t = x - self.lower;
        out[0] = 0.0;
        for i in 1..=f {
            let om = w * i as f64;
            let (s, c) = (om * t).sin_cos();
            out[i] = -om * s;
            out[f + i] = om * c;
        }
    }

    /// Diagonal part, boundary-state matrix `V` and the stationary state
    /// covariance `P∞` such that `K = diag + V P∞⁻¹ Vᵀ`.
    fn gram_parts(&self, family: MaternFamily, lengthscale: f64, variance: f64) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let p = family.order();
        let lam = family.rate(lengthscale);
        let len = self.upper - self.lower;
        let c = family.spectral_constant() * variance * lam.powi(2 * p as i32 + 1);
        let f = self.n_freq;
        let omegas = self.frequencies();

        let mut diag = DVector::zeros(self.len());
        diag[0] = len * lam.powi(2 * p as i32 + 2) / c;
        for (i, om) in omegas.iter().enumerate() {
            let d = len * (lam * lam + om * om).powi(p as i32 + 1) / (2.0 * c);
            diag[1 + i] = d;
            diag[1 + f + i] = d;
        }

        let mut v = DMatrix::zeros(self.len(), p + 1);
        v[(0, 0)] = 1.0;
        for (i, &om) in omegas.iter().enumerate() {
            v[(1 + i, 0)] = 1.0;
            if p >= 1 {
                v[(1 + f + i, 1)] = om;
            }
            if p >= 2 {
                v[(1 + i, 2)] = -om * om;
            }
        }
        (diag, v, stationary_covariance(family, lam, variance))
    }

    /// RKHS Gram `[⟨φ_i, φ_j⟩]` for a 1-D Matérn kernel.
    pub fn gram(&self, family: MaternFamily, lengthscale: f64, variance: f64) -> StructuredGram {
        let (diag, v, pinf) = self.gram_parts(family, lengthscale, variance);
        let pinv = invert_small_spd(&pinf);
        let l = pinv.cholesky().expect("stationary covariance is SPD").l();
        StructuredGram::DiagPlusRankOnes {
            diag,
            factors: v * l,
            signs: DVector::from_element(family.order() + 1, 1.0),
        }
    }

    /// Dense `∂K/∂log ℓ`.
    pub fn gram_dlog_lengthscale(&self, family: MaternFamily, lengthscale: f64, variance: f64) -> DMatrix<f64> {
        let p = family.order() as f64;
        let lam = family.rate(lengthscale);
        let (diag, v, pinf) = self.gram_parts(family, lengthscale, variance);
        let omegas = self.frequencies();
        let f = self.n_freq;
        // derivatives with respect to log λ, negated at the end (dλ/dlog ℓ = -λ)
        let mut ddiag = DVector::zeros(self.len());
        ddiag[0] = diag[0];
        for (i, om) in omegas.iter().enumerate() {
            let factor = 2.0 * (p + 1.0) * lam * lam / (lam * lam + om * om) - (2.0 * p + 1.0);
            ddiag[1 + i] = diag[1 + i] * factor;
            ddiag[1 + f + i] = diag[1 + f + i] * factor;
        }
        let dpinf = stationary_covariance_dlog_rate(family, lam, variance);
        let pinv = invert_small_spd(&pinf);
        let dpinv = -(&pinv * dpinf * &pinv);
        let mut out = &v * dpinv * v.transpose();
        for i in 0..self.len() {
            out[(i, i)] += ddiag[i];
        }
        -out
    }
}

fn stationary_covariance(family: MaternFamily, lam: f64, variance: f64) -> DMatrix<f64> {
    let l2 = lam * lam;
    let m = match family {
        MaternFamily::Matern12 => DMatrix::from_element(1, 1, 1.0),
        MaternFamily::Matern32 => DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, l2]),
        MaternFamily::Matern52 => DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, -l2 / 3.0, 0.0, l2 / 3.0, 0.0, -l2 / 3.0, 0.0, l2 * l2],
        ),
    };
    m * variance
}

fn stationary_covariance_dlog_rate(family: MaternFamily, lam: f64, variance: f64) -> DMatrix<f64> {
    let l2 = lam * lam;
    let m = match family {
        MaternFamily::Matern12 => DMatrix::zeros(1, 1),
        MaternFamily::Matern32 => DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0 * l2]),
        MaternFamily::Matern52 => DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 0.0, -2.0 * l2 / 3.0, 0.0, 2.0 * l2 / 3.0, 0.0, -2.0 * l2 / 3.0, 0.0, 4.0 * l2 * l2],
        ),
    };
    m * variance
}

fn invert_small_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let inv = m.clone().cholesky().expect("stationary covariance is SPD").inverse();
    (&inv + inv.transpose()) * 0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisStructure {
    Additive,
    Separable,
    Hybrid,
}

/// Feature basis over `D` input dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiDimBasis {
    pub structure: BasisStructure,
    pub dims: Vec<FourierBasis>,
    /// Inducing locations of the non-stationary block (hybrid only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inducing: Option<DMatrix<f64>>,
}

impl MultiDimBasis {
    pub fn additive(dims: Vec<FourierBasis>) -> Self {
        MultiDimBasis {
            structure: BasisStructure::Additive,
            dims,
            inducing: None,
        }
    }

    pub fn separable(dims: Vec<FourierBasis>) -> Self {
        MultiDimBasis {
            structure: BasisStructure::Separable,
            dims,
            inducing: None,
        }
    }

    /// Fourier block over `stationary` plus inducing points for the
    /// non-stationary addend; the two halves must have equal size.
    pub fn hybrid(stationary: Vec<FourierBasis>, inducing: DMatrix<f64>) -> Result<Self> {
        let fourier: usize = stationary.iter().map(|b| b.len()).sum();
        if inducing.nrows() == 0 {
            return Err(Error::InvalidBasis("hybrid basis needs inducing locations".into()));
        }
        if inducing.ncols() != stationary.len() {
            return Err(Error::DimensionMismatch {
                expected: stationary.len(),
                got: inducing.ncols(),
            });
        }
        if fourier > inducing.nrows() + 1 {
            return Err(Error::InvalidBasis(format!(
                "hybrid blocks overlap in size: {fourier} features vs {} inducing points",
                inducing.nrows()
            )));
        }
        Ok(MultiDimBasis {
            structure: BasisStructure::Hybrid,
            dims: stationary,
            inducing: Some(inducing),
        })
    }

    /// Builds the basis matching `kernel` on `domain` with a total budget of
    /// `target` features. Additive bases spread the budget evenly over
    /// dimensions; separable ones use `⌊target^(1/D)⌋` per dimension; hybrid
    /// bases split it evenly between features and the given inducing points.
    pub fn for_kernel(
        kernel: &KernelSpec,
        domain: &InputDomain,
        target: usize,
        inducing: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let d = kernel.dim();
        if domain.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: domain.dim(),
            });
        }
        if target == 0 {
            return Err(Error::InvalidBasis("feature budget must be positive".into()));
        }
        let per_dim = |count: usize| -> Result<Vec<FourierBasis>> {
            domain
                .bounds
                .iter()
                .map(|&(a, b)| FourierBasis::with_target(count, a, b))
                .collect()
        };
        match kernel.structure {
            Structure::OneDim | Structure::Additive => Ok(Self::additive(per_dim(target / d)?)),
            Structure::Separable => {
                let mut m = (target as f64).powf(1.0 / d as f64).floor() as usize;
                while (m + 1).pow(d as u32) <= target {
                    m += 1;
                }
                Ok(Self::separable(per_dim(m)?))
            }
            Structure::HybridAdditive => {
                if target % 2 == 1 {
                    return Err(Error::InvalidBasis(format!("hybrid basis needs an even budget, got {target}")));
                }
                let z = inducing.ok_or_else(|| Error::InvalidBasis("hybrid basis needs inducing locations".into()))?;
                if z.nrows() != target / 2 {
                    return Err(Error::DimensionMismatch {
                        expected: target / 2,
                        got: z.nrows(),
                    });
                }
                Self::hybrid(per_dim(target / 2 / d)?, z)
            }
            Structure::Ard => Err(Error::NoRkhsFeatures(
                "ard (Euclidean-distance) Matérn kernels have no harmonic feature basis".into(),
            )),
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    fn fourier_len(&self) -> usize {
        match self.structure {
            BasisStructure::Separable => self.dims.iter().map(|b| b.len()).product(),
            _ => self.dims.iter().map(|b| b.len()).sum(),
        }
    }

    pub fn len(&self) -> usize {
        self.fourier_len() + self.inducing.as_ref().map_or(0, |z| z.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_kernel(&self, kernel: &KernelSpec) -> Result<()> {
        if kernel.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: kernel.dim(),
            });
        }
        let ok = matches!(
            (self.structure, kernel.structure),
            (BasisStructure::Additive, Structure::OneDim)
                | (BasisStructure::Additive, Structure::Additive)
                | (BasisStructure::Separable, Structure::Separable)
                | (BasisStructure::Hybrid, Structure::HybridAdditive)
        );
        if ok {
            Ok(())
        } else if kernel.structure == Structure::Ard {
            Err(Error::NoRkhsFeatures("ard kernels have no harmonic feature basis".into()))
        } else {
            Err(Error::InvalidBasis(format!(
                "basis structure {:?} does not match kernel structure {:?}",
                self.structure, kernel.structure
            )))
        }
    }

    /// Moves every row of `x` onto the nearest point of the Fourier intervals.
    pub fn clamp_inside(&self, x: &mut DMatrix<f64>) {
        for (d, b) in self.dims.iter().enumerate() {
            x.column_mut(d).apply(|v| *v = v.clamp(b.lower, b.upper));
        }
    }

    /// Number of rows of `x` outside the Fourier intervals.
    pub fn count_outside(&self, x: &DMatrix<f64>) -> usize {
        (0..x.nrows())
            .filter(|&n| self.dims.iter().enumerate().any(|(d, b)| !b.contains(x[(n, d)])))
            .count()
    }

    fn block_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.dims.len());
        let mut off = 0;
        for b in &self.dims {
            offs.push(off);
            off += b.len();
        }
        offs
    }

    /// `K_{β,x}`, one row per feature.
    pub fn cross_covariance(&self, kernel: &KernelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_kernel(kernel)?;
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        let n = x.nrows();
        let mut out = DMatrix::zeros(self.len(), n);
        match self.structure {
            BasisStructure::Additive | BasisStructure::Hybrid => {
                let offs = self.block_offsets();
                let mut buf = vec![0.0; self.dims.iter().map(|b| b.len()).max().unwrap_or(0)];
                for col in 0..n {
                    for (d, b) in self.dims.iter().enumerate() {
                        b.eval_into(x[(col, d)], &mut buf);
                        for i in 0..b.len() {
                            out[(offs[d] + i, col)] = buf[i];
                        }
                    }
                }
                if let Some(z) = &self.inducing {
                    let kz = kernel.matrix_part(z, x, Part::Periodic)?;
                    out.rows_mut(self.fourier_len(), z.nrows()).copy_from(&kz);
                }
            }
            BasisStructure::Separable => {
                let mut feats: Vec<Vec<f64>> = self.dims.iter().map(|b| vec![0.0; b.len()]).collect();
                for col in 0..n {
                    for (d, b) in self.dims.iter().enumerate() {
                        b.eval_into(x[(col, d)], &mut feats[d]);
                    }
                    for (row, idx) in KronIndex::new(self.dims.iter().map(|b| b.len()).collect()).enumerate() {
                        out[(row, col)] = idx.iter().enumerate().map(|(d, &i)| feats[d][i]).product();
                    }
                }
            }
        }
        Ok(out)
    }

    /// Structured Gram `K_β`.
    pub fn gram(&self, kernel: &KernelSpec) -> Result<StructuredGram> {
        self.check_kernel(kernel)?;
        let blocks: Vec<StructuredGram> = self
            .dims
            .iter()
            .enumerate()
            .map(|(d, b)| {
                let (fam, ell, var) = kernel.dim_component(d);
                b.gram(fam, ell, var)
            })
            .collect();
        Ok(match self.structure {
            BasisStructure::Additive => {
                if blocks.len() == 1 {
                    blocks.into_iter().next().expect("one block")
                } else {
                    StructuredGram::BlockDiag(blocks)
                }
            }
            BasisStructure::Separable => StructuredGram::Kronecker(blocks),
            BasisStructure::Hybrid => {
                let z = self.inducing.as_ref().expect("hybrid basis has inducing points");
                let kz = kernel.gram(z, Part::Periodic)?;
                StructuredGram::BlockDiag(vec![StructuredGram::BlockDiag(blocks), StructuredGram::Dense(kz)])
            }
        })
    }

    /// `∂L/∂params` given `G = ∂L/∂K_β` (dense).
    pub fn gram_backward(&self, kernel: &KernelSpec, grad: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_kernel(kernel)?;
        let dim = self.dim();
        let mut dparams = vec![0.0; kernel.n_params()];
        match self.structure {
            BasisStructure::Additive | BasisStructure::Hybrid => {
                let offs = self.block_offsets();
                for (d, b) in self.dims.iter().enumerate() {
                    let (fam, ell, var) = kernel.dim_component(d);
                    let k = b.len();
                    let g = grad.view((offs[d], offs[d]), (k, k));
                    let kd = b.gram(fam, ell, var).dense();
                    let dl = b.gram_dlog_lengthscale(fam, ell, var);
                    dparams[d] += g.component_mul(&dl).sum();
                    dparams[dim] -= g.component_mul(&kd).sum();
                }
                if let Some(z) = &self.inducing {
                    let off = self.fourier_len();
                    let m = z.nrows();
                    let g = grad.view((off, off), (m, m)).into_owned();
                    let (dp, _) = kernel.gram_backward(z, &g, Part::Periodic);
                    for (a, b) in dparams.iter_mut().zip(dp) {
                        *a += b;
                    }
                }
            }
            BasisStructure::Separable => {
                let dense: Vec<DMatrix<f64>> = self
                    .dims
                    .iter()
                    .enumerate()
                    .map(|(d, b)| {
                        let (fam, ell, var) = kernel.dim_component(d);
                        b.gram(fam, ell, var).dense()
                    })
                    .collect();
                let full = kron_all(&dense);
                dparams[dim] -= grad.component_mul(&full).sum();
                for (d, b) in self.dims.iter().enumerate() {
                    let (fam, ell, var) = kernel.dim_component(d);
                    let mut factors = dense.clone();
                    factors[d] = b.gram_dlog_lengthscale(fam, ell, var);
                    dparams[d] += grad.component_mul(&kron_all(&factors)).sum();
                }
            }
        }
        Ok(dparams)
    }

    /// Backward pass of `K_{β,x} = cross_covariance(x)`: returns `∂L/∂params`
    /// and `∂L/∂x`.
    pub fn cross_backward(&self, kernel: &KernelSpec, x: &DMatrix<f64>, grad: &DMatrix<f64>, want_dx: bool) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
        self.check_kernel(kernel)?;
        let n = x.nrows();
        let mut dparams = vec![0.0; kernel.n_params()];
        let mut dx = want_dx.then(|| DMatrix::zeros(n, self.dim()));
        match self.structure {
            BasisStructure::Additive | BasisStructure::Hybrid => {
                if let Some(dx) = dx.as_mut() {
                    let offs = self.block_offsets();
                    let mut buf = vec![0.0; self.dims.iter().map(|b| b.len()).max().unwrap_or(0)];
                    for col in 0..n {
                        for (d, b) in self.dims.iter().enumerate() {
                            b.eval_deriv_into(x[(col, d)], &mut buf);
                            dx[(col, d)] += (0..b.len()).map(|i| grad[(offs[d] + i, col)] * buf[i]).sum::<f64>();
                        }
                    }
                }
                if let Some(z) = &self.inducing {
                    let off = self.fourier_len();
                    let g = grad.rows(off, z.nrows()).transpose();
                    let mg = kernel.matrix_backward(x, z, &g, Part::Periodic, want_dx, false);
                    for (a, b) in dparams.iter_mut().zip(mg.params) {
                        *a += b;
                    }
                    if let (Some(dx), Some(dxz)) = (dx.as_mut(), mg.dx1) {
                        *dx += dxz;
                    }
                }
            }
            BasisStructure::Separable => {
                if let Some(dx) = dx.as_mut() {
                    let lens: Vec<usize> = self.dims.iter().map(|b| b.len()).collect();
                    let mut feats: Vec<Vec<f64>> = lens.iter().map(|&l| vec![0.0; l]).collect();
                    let mut derivs = feats.clone();
                    for col in 0..n {
                        for (d, b) in self.dims.iter().enumerate() {
                            b.eval_into(x[(col, d)], &mut feats[d]);
                            b.eval_deriv_into(x[(col, d)], &mut derivs[d]);
                        }
                        for (row, idx) in KronIndex::new(lens.clone()).enumerate() {
                            let g = grad[(row, col)];
                            if g == 0.0 {
                                continue;
                            }
                            for d in 0..idx.len() {
                                let others: f64 = idx
                                    .iter()
                                    .enumerate()
                                    .filter(|(e, _)| *e != d)
                                    .map(|(e, &i)| feats[e][i])
                                    .product();
                                dx[(col, d)] += g * others * derivs[d][idx[d]];
                            }
                        }
                    }
                }
            }
        }
        Ok((dparams, dx))
    }
}

fn kron_all(ms: &[DMatrix<f64>]) -> DMatrix<f64> {
    ms.iter()
        .cloned()
        .reduce(|acc, m| acc.kronecker(&m))
        .unwrap_or_else(|| DMatrix::identity(1, 1))
}

/// Multi-indices in Kronecker order (first index slowest).
struct KronIndex {
    sizes: Vec<usize>,
    current: Option<Vec<usize>>,
}

impl KronIndex {
    fn new(sizes: Vec<usize>) -> Self {
        let current = if sizes.iter().all(|&s| s > 0) {
            Some(vec![0; sizes.len()])
        } else {
            None
        };
        KronIndex { sizes, current }
    }
}

impl Iterator for KronIndex {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let mut next = out.clone();
        let mut d = next.len();
        loop {
            if d == 0 {
                self.current = None;
                break;
            }
            d -= 1;
            next[d] += 1;
            if next[d] < self.sizes[d] {
                self.current = Some(next);
                break;
            }
            next[d] = 0;
        }
        Some(out)
    }
}
