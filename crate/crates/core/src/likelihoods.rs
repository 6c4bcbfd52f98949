//! Per-point likelihoods and their expectations under a Gaussian marginal
//! `f ~ N(m, s)`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const DEFAULT_QUADRATURE: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Likelihood {
    Gaussian { noise_variance: f64 },
    Probit {
        #[serde(default = "default_quadrature")]
        quadrature: usize,
    },
}

fn default_quadrature() -> usize {
    DEFAULT_QUADRATURE
}

/// Value and first derivatives of an expected log-likelihood term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EllGrad {
    pub value: f64,
    pub dm: f64,
    pub ds: f64,
    /// Derivative with respect to `log σ_n²` (Gaussian only).
    pub dlog_noise: f64,
}

impl Likelihood {
    pub fn gaussian(noise_variance: f64) -> Result<Self> {
        let lik = Likelihood::Gaussian { noise_variance };
        lik.validate()?;
        Ok(lik)
    }

    pub fn probit() -> Self {
        Likelihood::Probit {
            quadrature: DEFAULT_QUADRATURE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Likelihood::Gaussian { noise_variance } if !(noise_variance > 0.0 && noise_variance.is_finite()) => {
                Err(Error::InvalidHyperparameter {
                    name: "noise_variance",
                    value: noise_variance,
                })
            }
            Likelihood::Probit { quadrature } if quadrature < 2 => Err(Error::InvalidInput(format!(
                "quadrature order must be at least 2, got {quadrature}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn noise_variance(&self) -> Option<f64> {
        match *self {
            Likelihood::Gaussian { noise_variance } => Some(noise_variance),
            Likelihood::Probit { .. } => None,
        }
    }

    pub fn n_params(&self) -> usize {
        usize::from(matches!(self, Likelihood::Gaussian { .. }))
    }

    pub fn params(&self) -> Vec<f64> {
        self.noise_variance().map(f64::ln).into_iter().collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: params.len(),
            });
        }
        if let Likelihood::Gaussian { noise_variance } = self {
            *noise_variance = params[0].exp();
        }
        self.validate()
    }

    pub fn check_target(&self, y: f64) -> Result<()> {
        match self {
            Likelihood::Gaussian { .. } if !y.is_finite() => Err(Error::InvalidInput(format!("non-finite target {y}"))),
            Likelihood::Probit { .. } if y != 1.0 && y != -1.0 => Err(Error::InvalidLabel(y)),
            _ => Ok(()),
        }
    }

    /// `E_{N(f|m,s)}[log p(y|f)]`.
    pub fn expected_log_lik(&self, y: f64, m: f64, s: f64) -> Result<f64> {
        self.check_target(y)?;
        if !(s >= 0.0) {
            return Err(Error::InvalidInput(format!("negative predictive variance {s}")));
        }
        Ok(self.expected_log_lik_grad(y, m, s).value)
    }

    /// Value and derivatives of the expected log-likelihood. Inputs are
    /// assumed valid.
    pub fn expected_log_lik_grad(&self, y: f64, m: f64, s: f64) -> EllGrad {
        match *self {
            Likelihood::Gaussian { noise_variance: v } => {
                let r = y - m;
                let q = (r * r + s) / (2.0 * v);
                EllGrad {
                    value: -0.5 * (std::f64::consts::TAU * v).ln() - q,
                    dm: r / v,
                    ds: -0.5 / v,
                    dlog_noise: -0.5 + q,
                }
            }
            Likelihood::Probit { quadrature } => probit_ell(y, m, s, quadrature),
        }
    }

    /// `log p(y*)` under the predictive distribution.
    pub fn predictive_log_density(&self, y: f64, m: f64, s: f64) -> Result<f64> {
        self.check_target(y)?;
        if !(s >= 0.0) {
            return Err(Error::InvalidInput(format!("negative predictive variance {s}")));
        }
        Ok(match *self {
            Likelihood::Gaussian { noise_variance } => {
                let v = s + noise_variance;
                -0.5 * (std::f64::consts::TAU * v).ln() - (y - m).powi(2) / (2.0 * v)
            }
            Likelihood::Probit { .. } => log_ndtr(y * m / (1.0 + s).sqrt()),
        })
    }
}

/// `log Φ(z)` for the standard normal CDF, accurate in both tails.
pub fn log_ndtr(z: f64) -> f64 {
    if z > -6.0 {
        (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        // Φ(z) = φ(z) R(-z) with the Mills ratio R by continued fraction
        let x = -z;
        let mut cf = 0.0;
        for k in (1..=60).rev() {
            cf = k as f64 / (x + cf);
        }
        -0.5 * x * x - 0.5 * std::f64::consts::TAU.ln() - (x + cf).ln()
    }
}

/// `φ(z) / Φ(z)`, the derivative of `log Φ`.
fn dlog_ndtr(z: f64) -> f64 {
    if z > -6.0 {
        let pdf = (-0.5 * z * z).exp() / std::f64::consts::TAU.sqrt();
        pdf / (0.5 * erfc(-z / std::f64::consts::SQRT_2))
    } else {
        let x = -z;
        let mut cf = 0.0;
        for k in (1..=60).rev() {
            cf = k as f64 / (x + cf);
        }
        x + cf
    }
}

fn probit_ell(y: f64, m: f64, s: f64, q: usize) -> EllGrad {
    let (nodes, weights) = gauss_hermite(q);
    let sd = (2.0 * s).sqrt();
    let norm = std::f64::consts::PI.sqrt();
    let mut value = 0.0;
    let mut dm = 0.0;
    let mut dsd = 0.0;
    let mut d2 = 0.0;
    for (t, w) in nodes.iter().zip(&weights) {
        let z = y * (m + sd * t);
        let w = w / norm;
        let g = dlog_ndtr(z);
        value += w * log_ndtr(z);
        dm += w * y * g;
        dsd += w * y * g * t;
        // second derivative of log Φ: -g (z + g)
        d2 += w * (-g * (z + g));
    }
    // d/ds via the chain through sd = sqrt(2s); at s ≈ 0 use
    // E[f''] / 2 (Price's theorem) which is its limit.
    let ds = if s > 1e-12 { dsd / (2.0 * s).sqrt() } else { 0.5 * d2 };
    EllGrad {
        value,
        dm,
        ds,
        dlog_noise: 0.0,
    }
}

/// Gauss–Hermite nodes and weights for `∫ e^{-t²} f(t) dt` (physicists'
/// convention), by Newton iteration on the Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}
