use nalgebra::{DMatrix, DVector};

use super::{Prior, SparseGp};
use crate::error::{Error, Result};
use crate::kernels::Part;

/// Gradients of the ELBO with respect to every parameter block.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    /// Log-space hyperparameters, kernel first then likelihood.
    pub hyper: Vec<f64>,
    /// Mean-basis locations (`|γ| × D`).
    pub gamma: DMatrix<f64>,
    /// Covariance-basis locations for inducing-point bases.
    pub beta_locations: Option<DMatrix<f64>>,
    pub a_gamma: DVector<f64>,
    pub a_beta: DVector<f64>,
    /// Symmetric `∂L/∂S`.
    pub s: DMatrix<f64>,
    /// Lower-triangular `∂L/∂L` for `S = L Lᵀ`.
    pub chol_s: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct ElboGrad {
    pub value: f64,
    pub grads: ParamGrads,
}

struct Forward {
    kbx: DMatrix<f64>,
    kgx: DMatrix<f64>,
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    ell: f64,
    gm: DVector<f64>,
    gs: DVector<f64>,
    dnoise: f64,
}

impl SparseGp {
    fn check_batch(&self, x: &DMatrix<f64>, y: &DVector<f64>, n_total: usize) -> Result<()> {
        self.check_inputs(x)?;
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if n_total < x.nrows() {
            return Err(Error::InvalidInput(format!(
                "total data size {n_total} smaller than batch size {}",
                x.nrows()
            )));
        }
        for &v in y.iter() {
            self.likelihood.check_target(v)?;
        }
        Ok(())
    }

    fn forward(&self, prior: &Prior, x: &DMatrix<f64>, y: &DVector<f64>, scale: f64) -> Result<Forward> {
        let n = x.nrows();
        let kbx = self.basis.cross(&self.kernel, x)?;
        let a = prior.kf.solve(&kbx);
        let kgx = if self.n_gamma() > 0 {
            self.kernel.matrix(&self.state.gamma, x)?
        } else {
            DMatrix::zeros(0, n)
        };
        let mean = kbx.transpose() * &prior.c + kgx.transpose() * &self.state.a_gamma;
        let q = self.state.chol_s.transpose() * &a;
        let kdiag = self.kernel.diag_value();
        let mut ell = 0.0;
        let mut gm = DVector::zeros(n);
        let mut gs = DVector::zeros(n);
        let mut dnoise = 0.0;
        for i in 0..n {
            let s = kdiag - a.column(i).dot(&kbx.column(i)) + q.column(i).norm_squared();
            let g = self.likelihood.expected_log_lik_grad(y[i], mean[i], s.max(0.0));
            ell += g.value;
            gm[i] = scale * g.dm;
            gs[i] = scale * g.ds;
            dnoise += g.dlog_noise;
        }
        Ok(Forward {
            kbx,
            kgx,
            a,
            q,
            ell: scale * ell,
            gm,
            gs,
            dnoise: scale * dnoise,
        })
    }

    /// `(N/|batch|) Σ E_q[log p(y_i | f_i)] - KL`.
    pub fn elbo(&self, x: &DMatrix<f64>, y: &DVector<f64>, n_total: usize) -> Result<f64> {
        self.check_batch(x, y, n_total)?;
        let prior = self.prior()?;
        let scale = n_total as f64 / x.nrows() as f64;
        let f = self.forward(&prior, x, y, scale)?;
        Ok(f.ell - self.kl_with(&prior))
    }

    /// Scaled expected log-likelihood of a batch, without the KL term.
    pub fn expected_log_lik_sum(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
        self.check_batch(x, y, x.nrows())?;
        let prior = self.prior()?;
        Ok(self.forward(&prior, x, y, 1.0)?.ell)
    }

    /// ELBO and its gradient with respect to all parameters.
    pub fn elbo_grad(&self, x: &DMatrix<f64>, y: &DVector<f64>, n_total: usize) -> Result<ElboGrad> {
        self.check_batch(x, y, n_total)?;
        let prior = self.prior()?;
        let scale = n_total as f64 / x.nrows() as f64;
        let Forward {
            kbx,
            kgx,
            a,
            q,
            ell,
            gm,
            gs,
            dnoise,
        } = self.forward(&prior, x, y, scale)?;
        let value = ell - self.kl_with(&prior);

        let l = &self.state.chol_s;
        let b = l.nrows();
        let s = l * l.transpose();
        let kinv = prior.kf.inverse();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(b, b))
            .ok_or_else(|| Error::NonFinite {
                iteration: 0,
                block: "covariance factor".into(),
            })?;
        let sinv = linv.transpose() * &linv;
        let a_g = &self.state.a_gamma;
        let a_b = &self.state.a_beta;

        // variance term
        let sa = l * &q;
        let kinv_sa = prior.kf.solve(&sa);
        let mut a_gs = a.clone();
        for (i, mut col) in a_gs.column_iter_mut().enumerate() {
            col *= gs[i];
        }
        let r = &a_gs * a.transpose();
        let mut g_kbx = (kinv_sa - &a) * 2.0;
        for (i, mut col) in g_kbx.column_iter_mut().enumerate() {
            col *= gs[i];
        }
        let kinv_s = &kinv * &s;
        let kinv_s_r = &kinv_s * &r;
        let mut g_k = &r - &kinv_s_r - kinv_s_r.transpose();
        let mut g_s = &r + (&sinv - &kinv) * 0.5;

        // mean term
        g_kbx += &prior.c * gm.transpose();
        let v = &kbx * &gm;
        let w = prior.kf.solve_vec(&v);
        g_k += &w * prior.p.transpose();
        let g_ab = &v - &prior.kb * a_b;
        let mut g_ag = DVector::zeros(a_g.len());
        let mut g_kbg = DMatrix::zeros(b, a_g.len());
        let mut g_kg = DMatrix::zeros(a_g.len(), a_g.len());
        if self.n_gamma() > 0 {
            g_ag = &kgx * &gm - prior.kbg.transpose() * &w + prior.kbg.transpose() * &prior.p - &prior.kg * a_g;
            g_kbg = (&prior.p - &w) * a_g.transpose();
            g_kg = a_g * a_g.transpose() * -0.5;
        }

        // remaining -KL terms
        g_k += (&kinv_s * &kinv) * 0.5 - (&prior.p * prior.p.transpose()) * 0.5 - (a_b * a_b.transpose()) * 0.5 - &kinv * 0.5;
        g_s = (&g_s + g_s.transpose()) * 0.5;

        // chain to hyperparameters and locations
        let nk = self.kernel.n_params();
        let mut hyper = vec![0.0; nk + self.likelihood.n_params()];
        let mut dgamma = DMatrix::zeros(self.n_gamma(), self.dim());
        let mut dbeta = self.basis.locations().map(|u| DMatrix::zeros(u.nrows(), u.ncols()));
        let mut add = |p: Vec<f64>| {
            for (h, v) in hyper.iter_mut().zip(p) {
                *h += v;
            }
        };
        let mut add_beta = |d: Option<DMatrix<f64>>| {
            if let (Some(acc), Some(d)) = (dbeta.as_mut(), d) {
                *acc += d;
            }
        };

        let (p1, dl1, _) = self.basis.cross_backward(&self.kernel, x, &g_kbx, false)?;
        add(p1);
        add_beta(dl1);
        let (p2, dl2) = self.basis.gram_backward(&self.kernel, &g_k)?;
        add(p2);
        add_beta(dl2);
        add(self.kernel.diag_backward(gs.sum(), Part::Full));
        if self.n_gamma() > 0 {
            let z = &self.state.gamma;
            let g_kgx = a_g * gm.transpose();
            let mg = self.kernel.matrix_backward(z, x, &g_kgx, Part::Full, true, false);
            add(mg.params);
            if let Some(d) = mg.dx1 {
                dgamma += d;
            }
            let (p4, dl4, dz4) = self.basis.cross_backward(&self.kernel, z, &g_kbg, true)?;
            add(p4);
            add_beta(dl4);
            if let Some(d) = dz4 {
                dgamma += d;
            }
            let (p5, dz5) = self.kernel.gram_backward(z, &g_kg, Part::Full);
            add(p5);
            dgamma += dz5;
        }
        if self.likelihood.n_params() > 0 {
            hyper[nk] = dnoise;
        }

        let g_l = (&g_s * l * 2.0).lower_triangle();
        Ok(ElboGrad {
            value,
            grads: ParamGrads {
                hyper,
                gamma: dgamma,
                beta_locations: dbeta,
                a_gamma: g_ag,
                a_beta: g_ab,
                s: g_s,
                chol_s: g_l,
            },
        })
    }
}
