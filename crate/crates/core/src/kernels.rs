//! Stationary Matérn kernels (ν ∈ {1/2, 3/2, 5/2}) with ARD lengthscales.
//!
//! Every kernel here is stationary, so evaluation is expressed in terms of the
//! lag `τ = x - x'`. Multi-dimensional inputs are handled through one of the
//! [`Structure`] variants. Hyperparameters are exposed to optimizers in
//! log-space through [`KernelSpec::params`] / [`KernelSpec::set_params`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaternFamily {
    Matern12,
    Matern32,
    Matern52,
}

impl MaternFamily {
    /// Smoothness ν.
    pub fn nu(self) -> f64 {
        match self {
            MaternFamily::Matern12 => 0.5,
            MaternFamily::Matern32 => 1.5,
            MaternFamily::Matern52 => 2.5,
        }
    }

    /// Markov order `p` with `ν = p + 1/2`.
    pub fn order(self) -> usize {
        match self {
            MaternFamily::Matern12 => 0,
            MaternFamily::Matern32 => 1,
            MaternFamily::Matern52 => 2,
        }
    }

    /// Rate `λ = sqrt(2ν) / ℓ`.
    pub fn rate(self, lengthscale: f64) -> f64 {
        (2.0 * self.nu()).sqrt() / lengthscale
    }

    /// Unit-variance correlation as a function of `u = λ|τ|`.
    pub fn correlation(self, u: f64) -> f64 {
        let e = (-u).exp();
        match self {
            MaternFamily::Matern12 => e,
            MaternFamily::Matern32 => (1.0 + u) * e,
            MaternFamily::Matern52 => (1.0 + u + u * u / 3.0) * e,
        }
    }

    /// `dρ/du`.
    pub fn correlation_du(self, u: f64) -> f64 {
        let e = (-u).exp();
        match self {
            MaternFamily::Matern12 => -e,
            MaternFamily::Matern32 => -u * e,
            MaternFamily::Matern52 => -(u / 3.0) * (1.0 + u) * e,
        }
    }

    /// Numerator of the spectral density `S(ω) = c σ² λ^(2p+1) / (λ² + ω²)^(p+1)`.
    pub fn spectral_constant(self) -> f64 {
        match self {
            MaternFamily::Matern12 => 2.0,
            MaternFamily::Matern32 => 4.0,
            MaternFamily::Matern52 => 16.0 / 3.0,
        }
    }
}

impl std::str::FromStr for MaternFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "matern12" => Ok(MaternFamily::Matern12),
            "matern32" => Ok(MaternFamily::Matern32),
            "matern52" => Ok(MaternFamily::Matern52),
            other => Err(Error::InvalidKernel(format!(
                "unknown family `{other}` (squared exponential has no RKHS features; use matern12/32/52)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    OneDim,
    /// `Σ_d k_d(x_d, x'_d)`, each addend carrying variance `σ²/D`.
    Additive,
    /// `Π_d k_d(x_d, x'_d)`.
    Separable,
    /// Matérn of the lengthscale-scaled Euclidean distance. Used for data
    /// generation and inducing-point models; it has no Fourier features.
    Ard,
    /// Additive Matérn plus a periodic addend.
    HybridAdditive,
}

/// Periodic addend `σ_p² exp(-2 sin²(π‖τ‖/p) / ℓ_p²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Periodic {
    pub lengthscale: f64,
    pub period: f64,
    pub variance: f64,
}

impl Periodic {
    fn eval_dist(&self, d: f64) -> f64 {
        let s = (std::f64::consts::PI * d / self.period).sin();
        self.variance * (-2.0 * s * s / (self.lengthscale * self.lengthscale)).exp()
    }
}

/// Gradients returned by [`KernelSpec::matrix_backward`].
#[derive(Clone, Debug)]
pub struct MatrixGrad {
    pub params: Vec<f64>,
    pub dx1: Option<DMatrix<f64>>,
    pub dx2: Option<DMatrix<f64>>,
}

/// Which addends of a kernel to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Full,
    Stationary,
    Periodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub families: Vec<MaternFamily>,
    pub lengthscales: Vec<f64>,
    pub variance: f64,
    pub structure: Structure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periodic: Option<Periodic>,
}

impl KernelSpec {
    pub fn one_dim(family: MaternFamily, lengthscale: f64, variance: f64) -> Result<Self> {
        Self::new(vec![family], vec![lengthscale], variance, Structure::OneDim, None)
    }

    pub fn additive(family: MaternFamily, lengthscales: Vec<f64>, variance: f64) -> Result<Self> {
        let families = vec![family; lengthscales.len()];
        Self::new(families, lengthscales, variance, Structure::Additive, None)
    }

    pub fn separable(family: MaternFamily, lengthscales: Vec<f64>, variance: f64) -> Result<Self> {
        let families = vec![family; lengthscales.len()];
        Self::new(families, lengthscales, variance, Structure::Separable, None)
    }

    pub fn ard(family: MaternFamily, lengthscales: Vec<f64>, variance: f64) -> Result<Self> {
        let families = vec![family; lengthscales.len()];
        Self::new(families, lengthscales, variance, Structure::Ard, None)
    }

    pub fn hybrid(
        family: MaternFamily,
        lengthscales: Vec<f64>,
        variance: f64,
        periodic: Periodic,
    ) -> Result<Self> {
        let families = vec![family; lengthscales.len()];
        Self::new(
            families,
            lengthscales,
            variance,
            Structure::HybridAdditive,
            Some(periodic),
        )
    }

    pub fn new(
        families: Vec<MaternFamily>,
        lengthscales: Vec<f64>,
        variance: f64,
        structure: Structure,
        periodic: Option<Periodic>,
    ) -> Result<Self> {
        let spec = KernelSpec {
            families,
            lengthscales,
            variance,
            structure,
            periodic,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lengthscales.len();
        if d == 0 {
            return Err(Error::InvalidKernel("at least one input dimension required".into()));
        }
        if self.families.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.families.len(),
            });
        }
        for &l in &self.lengthscales {
            check_positive("lengthscale", l)?;
        }
        check_positive("variance", self.variance)?;
        match self.structure {
            Structure::OneDim if d != 1 => {
                return Err(Error::InvalidKernel(format!("one_dim structure requires D = 1, got {d}")))
            }
            Structure::Separable if d > 3 => {
                return Err(Error::InvalidKernel(format!(
                    "separable structure is limited to D <= 3, got {d}"
                )))
            }
            Structure::Ard if self.families.iter().any(|f| *f != self.families[0]) => {
                return Err(Error::InvalidKernel("ard structure needs a single family".into()))
            }
            _ => {}
        }
        match (self.structure, &self.periodic) {
            (Structure::HybridAdditive, None) => {
                return Err(Error::InvalidKernel("hybrid_additive requires a periodic addend".into()))
            }
            (Structure::HybridAdditive, Some(p)) => {
                check_positive("periodic.lengthscale", p.lengthscale)?;
                check_positive("periodic.period", p.period)?;
                check_positive("periodic.variance", p.variance)?;
            }
            (_, Some(_)) => {
                return Err(Error::InvalidKernel(
                    "periodic addend only valid for hybrid_additive".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `(family, lengthscale, variance)` of the 1-D factor / addend for
    /// dimension `d`. For separable kernels the full variance sits on the
    /// first factor.
    pub fn dim_component(&self, d: usize) -> (MaternFamily, f64, f64) {
        let share = match self.structure {
            Structure::Additive | Structure::HybridAdditive => self.variance / self.dim() as f64,
            Structure::Separable if d > 0 => 1.0,
            _ => self.variance,
        };
        (self.families[d], self.lengthscales[d], share)
    }

    /// `k(x, x)`.
    pub fn diag_value(&self) -> f64 {
        self.variance + self.periodic.map_or(0.0, |p| p.variance)
    }

    fn diag_part(&self, part: Part) -> f64 {
        match part {
            Part::Full => self.diag_value(),
            Part::Stationary => self.variance,
            Part::Periodic => self.periodic.map_or(0.0, |p| p.variance),
        }
    }

    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(x2)?;
        let tau: Vec<f64> = x.iter().zip(x2).map(|(a, b)| a - b).collect();
        Ok(self.eval_lag(&tau, Part::Full))
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Kernel value at lag `τ`.
    pub fn eval_lag(&self, tau: &[f64], part: Part) -> f64 {
        let mut value = 0.0;
        if part != Part::Periodic {
            value += self.stationary_lag(tau);
        }
        if part != Part::Stationary {
            if let Some(p) = &self.periodic {
                value += p.eval_dist(norm(tau));
            }
        }
        value
    }

    fn stationary_lag(&self, tau: &[f64]) -> f64 {
        match self.structure {
            Structure::OneDim | Structure::Additive | Structure::HybridAdditive => (0..self.dim())
                .map(|d| {
                    let (fam, ell, v) = self.dim_component(d);
                    v * fam.correlation(fam.rate(ell) * tau[d].abs())
                })
                .sum(),
            Structure::Separable => {
                self.variance
                    * (0..self.dim())
                        .map(|d| {
                            let fam = self.families[d];
                            fam.correlation(fam.rate(self.lengthscales[d]) * tau[d].abs())
                        })
                        .product::<f64>()
            }
            Structure::Ard => {
                let fam = self.families[0];
                let r = scaled_norm(tau, &self.lengthscales);
                self.variance * fam.correlation((2.0 * fam.nu()).sqrt() * r)
            }
        }
    }

    /// Dense `k(X, X')` for row-wise inputs.
    pub fn matrix(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.matrix_part(x, x2, Part::Full)
    }

    pub fn matrix_part(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>, part: Part) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        if x2.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x2.ncols(),
            });
        }
        let mut tau = vec![0.0; self.dim()];
        Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
            for (d, t) in tau.iter_mut().enumerate() {
                *t = x[(i, d)] - x2[(j, d)];
            }
            self.eval_lag(&tau, part)
        }))
    }

    /// Symmetric `k(X, X)`; the diagonal is exact.
    pub fn gram(&self, x: &DMatrix<f64>, part: Part) -> Result<DMatrix<f64>> {
        let mut k = self.matrix_part(x, x, part)?;
        let diag = self.diag_part(part);
        for i in 0..k.nrows() {
            k[(i, i)] = diag;
            for j in 0..i {
                let v = 0.5 * (k[(i, j)] + k[(j, i)]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    // ---- parameters -------------------------------------------------------

    pub fn n_params(&self) -> usize {
        self.dim() + 1 + if self.periodic.is_some() { 3 } else { 0 }
    }

    /// Log-space hyperparameters `[log ℓ_1..D, log σ², (log ℓ_p, log p, log σ_p²)]`.
    pub fn params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        out.push(self.variance.ln());
        if let Some(p) = &self.periodic {
            out.extend([p.lengthscale.ln(), p.period.ln(), p.variance.ln()]);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: params.len(),
            });
        }
        let d = self.dim();
        for (l, p) in self.lengthscales.iter_mut().zip(params) {
            *l = p.exp();
        }
        self.variance = params[d].exp();
        if let Some(p) = &mut self.periodic {
            p.lengthscale = params[d + 1].exp();
            p.period = params[d + 2].exp();
            p.variance = params[d + 3].exp();
        }
        self.validate()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.dim()).map(|d| format!("log_lengthscale[{d}]")).collect();
        names.push("log_variance".into());
        if self.periodic.is_some() {
            names.extend(["log_periodic_lengthscale".into(), "log_period".into(), "log_periodic_variance".into()]);
        }
        names
    }

    // ---- gradients --------------------------------------------------------

    /// Accumulates `weight · ∂k(τ)/∂params` into `dparams` and
    /// `weight · ∂k(τ)/∂τ` into `dtau` (when given).
    pub fn accumulate_lag_grad(
        &self,
        tau: &[f64],
        part: Part,
        weight: f64,
        dparams: &mut [f64],
        mut dtau: Option<&mut [f64]>,
    ) {
        let dim = self.dim();
        if part != Part::Periodic {
            match self.structure {
                Structure::OneDim | Structure::Additive | Structure::HybridAdditive => {
                    for d in 0..dim {
                        let (fam, ell, v) = self.dim_component(d);
                        let lam = fam.rate(ell);
                        let u = lam * tau[d].abs();
                        let rho = fam.correlation(u);
                        let drho = fam.correlation_du(u);
                        dparams[d] += weight * v * drho * (-u);
                        dparams[dim] += weight * v * rho;
                        if let Some(dt) = dtau.as_deref_mut() {
                            dt[d] += weight * v * drho * lam * sign(tau[d]);
                        }
                    }
                }
                Structure::Separable => {
                    let rhos: Vec<(f64, f64, f64, f64)> = (0..dim)
                        .map(|d| {
                            let fam = self.families[d];
                            let lam = fam.rate(self.lengthscales[d]);
                            let u = lam * tau[d].abs();
                            (fam.correlation(u), fam.correlation_du(u), u, lam)
                        })
                        .collect();
                    let total: f64 = rhos.iter().map(|r| r.0).product();
                    dparams[dim] += weight * self.variance * total;
                    for d in 0..dim {
                        let others: f64 = rhos
                            .iter()
                            .enumerate()
                            .filter(|(e, _)| *e != d)
                            .map(|(_, r)| r.0)
                            .product();
                        let (_, drho, u, lam) = rhos[d];
                        dparams[d] += weight * self.variance * others * drho * (-u);
                        if let Some(dt) = dtau.as_deref_mut() {
                            dt[d] += weight * self.variance * others * drho * lam * sign(tau[d]);
                        }
                    }
                }
                Structure::Ard => {
                    let fam = self.families[0];
                    let c = (2.0 * fam.nu()).sqrt();
                    let r = scaled_norm(tau, &self.lengthscales);
                    let u = c * r;
                    dparams[dim] += weight * self.variance * fam.correlation(u);
                    if r > 0.0 {
                        let drho = fam.correlation_du(u);
                        for d in 0..dim {
                            let l2 = self.lengthscales[d] * self.lengthscales[d];
                            dparams[d] += weight * self.variance * drho * (-c * tau[d] * tau[d] / (l2 * r));
                            if let Some(dt) = dtau.as_deref_mut() {
                                dt[d] += weight * self.variance * drho * c * tau[d] / (l2 * r);
                            }
                        }
                    }
                }
            }
        }
        if part != Part::Stationary {
            if let Some(p) = &self.periodic {
                let dist = norm(tau);
                let k = p.eval_dist(dist);
                let arg = std::f64::consts::PI * dist / p.period;
                let l2 = p.lengthscale * p.lengthscale;
                let s = arg.sin();
                let s2 = (2.0 * arg).sin();
                dparams[dim + 1] += weight * k * 4.0 * s * s / l2;
                dparams[dim + 2] += weight * k * 2.0 * arg * s2 / l2;
                dparams[dim + 3] += weight * k;
                if dist > 0.0 {
                    if let Some(dt) = dtau.as_deref_mut() {
                        let dk_dd = -k * 2.0 * std::f64::consts::PI * s2 / (p.period * l2);
                        for d in 0..dim {
                            dt[d] += weight * dk_dd * tau[d] / dist;
                        }
                    }
                }
            }
        }
    }

    /// Backward pass of `K = k(X1, X2)`: given `∂L/∂K`, returns `∂L/∂params`
    /// and, on request, `∂L/∂X1` and `∂L/∂X2`.
    pub fn matrix_backward(
        &self,
        x1: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        grad: &DMatrix<f64>,
        part: Part,
        want_dx1: bool,
        want_dx2: bool,
    ) -> MatrixGrad {
        let dim = self.dim();
        let mut dparams = vec![0.0; self.n_params()];
        let mut dx1 = want_dx1.then(|| DMatrix::zeros(x1.nrows(), dim));
        let mut dx2 = want_dx2.then(|| DMatrix::zeros(x2.nrows(), dim));
        let need_tau = want_dx1 || want_dx2;
        let mut tau = vec![0.0; dim];
        let mut dtau = vec![0.0; dim];
        for j in 0..x2.nrows() {
            for i in 0..x1.nrows() {
                let g = grad[(i, j)];
                if g == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    tau[d] = x1[(i, d)] - x2[(j, d)];
                }
                if need_tau {
                    dtau.iter_mut().for_each(|v| *v = 0.0);
                    self.accumulate_lag_grad(&tau, part, g, &mut dparams, Some(&mut dtau));
                    if let Some(dx) = dx1.as_mut() {
                        for d in 0..dim {
                            dx[(i, d)] += dtau[d];
                        }
                    }
                    if let Some(dx) = dx2.as_mut() {
                        for d in 0..dim {
                            dx[(j, d)] -= dtau[d];
                        }
                    }
                } else {
                    self.accumulate_lag_grad(&tau, part, g, &mut dparams, None);
                }
            }
        }
        MatrixGrad {
            params: dparams,
            dx1,
            dx2,
        }
    }

    /// Backward pass of the symmetric `K = k(X, X)` (both arguments move).
    pub fn gram_backward(&self, x: &DMatrix<f64>, grad: &DMatrix<f64>, part: Part) -> (Vec<f64>, DMatrix<f64>) {
        let dim = self.dim();
        let n = x.nrows();
        let mut dparams = vec![0.0; self.n_params()];
        let mut dx = DMatrix::zeros(n, dim);
        let mut tau = vec![0.0; dim];
        let mut dtau = vec![0.0; dim];
        let mut trace = 0.0;
        for i in 0..n {
            trace += grad[(i, i)];
            for j in 0..i {
                let g = grad[(i, j)] + grad[(j, i)];
                if g == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    tau[d] = x[(i, d)] - x[(j, d)];
                }
                dtau.iter_mut().for_each(|v| *v = 0.0);
                self.accumulate_lag_grad(&tau, part, g, &mut dparams, Some(&mut dtau));
                for d in 0..dim {
                    dx[(i, d)] += dtau[d];
                    dx[(j, d)] -= dtau[d];
                }
            }
        }
        for (p, v) in dparams.iter_mut().zip(self.diag_backward(trace, part)) {
            *p += v;
        }
        (dparams, dx)
    }

    /// `∂L/∂params` for `L = Σ_i g_i k(x_i, x_i)` with `Σ g_i = grad_sum`.
    pub fn diag_backward(&self, grad_sum: f64, part: Part) -> Vec<f64> {
        let dim = self.dim();
        let mut dparams = vec![0.0; self.n_params()];
        if part != Part::Periodic {
            dparams[dim] += grad_sum * self.variance;
        }
        if part != Part::Stationary {
            if let Some(p) = &self.periodic {
                dparams[dim + 3] += grad_sum * p.variance;
            }
        }
        dparams
    }
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidHyperparameter { name, value })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scaled_norm(tau: &[f64], ell: &[f64]) -> f64 {
    tau.iter().zip(ell).map(|(t, l)| (t / l).powi(2)).sum::<f64>().sqrt()
}

/// Hyper-rectangle `Π_d [a_d, b_d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDomain {
    pub bounds: Vec<(f64, f64)>,
}

impl InputDomain {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::InvalidInput("domain needs at least one dimension".into()));
        }
        for (d, &(a, b)) in bounds.iter().enumerate() {
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(Error::InvalidInput(format!("degenerate interval [{a}, {b}] in dimension {d}")));
            }
        }
        Ok(InputDomain { bounds })
    }

    /// Per-dimension data range expanded symmetrically by `expansion` (a
    /// fraction of the range) on each side.
    pub fn from_data(x: &DMatrix<f64>, expansion: f64) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("cannot infer a domain from no points".into()));
        }
        let bounds = (0..x.ncols())
            .map(|d| {
                let col = x.column(d);
                let lo = col.min();
                let hi = col.max();
                let width = if hi > lo { hi - lo } else { 1.0 };
                (lo - expansion * width, hi + expansion * width)
            })
            .collect();
        Self::new(bounds)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn contains_row(&self, x: &DMatrix<f64>, i: usize) -> bool {
        self.bounds
            .iter()
            .enumerate()
            .all(|(d, &(a, b))| x[(i, d)] >= a && x[(i, d)] <= b)
    }

    /// Number of rows of `x` outside the domain.
    pub fn count_outside(&self, x: &DMatrix<f64>) -> usize {
        (0..x.nrows()).filter(|&i| !self.contains_row(x, i)).count()
    }
}
