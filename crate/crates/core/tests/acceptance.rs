//! Acceptance gates for the decoupled Fourier-feature GP.
//!
//! Criteria 1-7 are fast, deterministic oracle checks and always run.
//! Criteria 8-11 are stochastic desk-scale reproductions through the full
//! experiment runner. They take tens of minutes, so they run only with
//! `--ignored` (or `--include-ignored`) and should be built with `--release`.
//!
//! Every criterion prints one line. A criterion recorded as unattainable in
//! the decisions ledger prints `XFAIL` and does not fail the process;
//! any other failure does.
//!
//!     cargo test --release -p odvff --test acceptance -- --include-ignored

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use odvff::config::ExperimentConfig;
use odvff::fourier_basis::{FourierBasis, MultiDimBasis};
use odvff::kernels::{KernelSpec, MaternFamily, Part};
use odvff::likelihoods::{log_ndtr, Likelihood};
use odvff::linalg::chol_psd;
use odvff::metrics::{evaluate, MetricsRecord};
use odvff::model::{
    collapsed_bound, exact_gp_log_marginal, sgpr_dense_predict, inducing_optimum, inducing_predict, BaselineState,
    CovarianceBasis, Method, SparseGp, DEFAULT_FULL_BATCH_CAP,
};
use odvff::model::PredictiveDistribution;
use odvff::runner::run_experiment;
use odvff::training::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

// Tolerances, as pinned by the acceptance contract.
const GRAM_REL: f64 = 1e-2;
const GRAM_PSD: f64 = -1e-6;
const GRAM_GRID: usize = 2000;
const BOUND_SLACK: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;
const FD_REL: f64 = 1e-4;
const STATIONARY_REL: f64 = 1e-5;
const SGPR_PRED: f64 = 1e-8;
const SVGP_PRED: f64 = 1e-10;
const KL_ORACLE: f64 = 1e-8;
const COVERAGE_BAND: f64 = 0.003;
const MC_SIGMAS: f64 = 3.0;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    /// Failing as recorded in the ledger.
    XFail,
    Skip,
}

struct Outcome {
    id: u32,
    name: &'static str,
    status: Status,
    detail: String,
    seconds: f64,
}

fn verdict(pass: bool) -> Status {
    if pass {
        Status::Pass
    } else {
        Status::Fail
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fn uniform_x(rng: &mut ChaCha20Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>())
}

fn fourier_basis(n_freq: usize, lower: f64, upper: f64) -> CovarianceBasis {
    CovarianceBasis::Features {
        basis: MultiDimBasis::additive(vec![FourierBasis::new(n_freq, lower, upper).unwrap()]),
    }
}

/// Random variational state near the prior: `L = 0.8 L_K + noise`, `a`
/// scaled by the basis norms.
fn randomize_state(model: &mut SparseGp, rng: &mut ChaCha20Rng) {
    let kb = model.basis.gram(&model.kernel).unwrap().dense();
    let l = chol_psd(&kb).unwrap().l();
    let b = l.nrows();
    for i in 0..b {
        for j in 0..=i {
            let noise = 0.3 * (rng.random::<f64>() - 0.5);
            model.state.chol_s[(i, j)] = 0.8 * l[(i, j)] + noise * l[(i, i)];
        }
    }
    model.state.a_beta = DVector::from_fn(b, |i, _| (rng.random::<f64>() - 0.5) / kb[(i, i)].sqrt());
    model.state.a_gamma = DVector::from_fn(model.n_gamma(), |_, _| rng.random::<f64>() - 0.5);
}

fn logdet_spd(m: &DMatrix<f64>) -> f64 {
    2.0 * m.clone().cholesky().expect("SPD").l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

// ---------------------------------------------------------------------------
// 1. Gram oracle
// ---------------------------------------------------------------------------

fn c01_gram_oracle() -> (Status, String) {
    let xg = DMatrix::from_fn(GRAM_GRID, 1, |i, _| i as f64 / (GRAM_GRID - 1) as f64);
    let mut worst_rel: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    let mut worst_eig = f64::INFINITY;
    for fam in [MaternFamily::Matern12, MaternFamily::Matern32] {
        for ell in [0.1, 0.5] {
            let k = KernelSpec::one_dim(fam, ell, 1.0).unwrap();
            let mut kg = k.gram(&xg, Part::Full).unwrap();
            let jitter = 1e-8 * kg.trace() / GRAM_GRID as f64;
            for i in 0..GRAM_GRID {
                kg[(i, i)] += jitter;
            }
            let kg = kg.cholesky().expect("grid Gram");
            for n_freq in [4, 10] {
                let basis = MultiDimBasis::additive(vec![FourierBasis::new(n_freq, 0.0, 1.0).unwrap()]);
                let dense = basis.gram(&k).unwrap().dense();
                let phi = basis.cross_covariance(&k, &xg).unwrap();
                let oracle = &phi * kg.solve(&phi.transpose());
                let diff = &dense - &oracle;
                for i in 0..dense.nrows() {
                    for j in 0..dense.ncols() {
                        let d = diff[(i, j)].abs();
                        worst_rel = worst_rel.max(d / oracle[(i, j)].abs());
                        worst_norm = worst_norm.max(d / (dense[(i, i)] * dense[(j, j)]).sqrt());
                    }
                }
                let sym = (&diff + diff.transpose()) * 0.5;
                worst_eig = worst_eig.min(SymmetricEigen::new(sym).eigenvalues.min());
            }
        }
    }
    let psd = worst_eig >= GRAM_PSD;
    let detail = format!(
        "entrywise rel {worst_rel:.3e} (tol {GRAM_REL:e}); normalized {worst_norm:.3e}; min eig(dense - oracle) {worst_eig:.3e} (tol {GRAM_PSD:e})"
    );
    let status = if worst_rel <= GRAM_REL && psd {
        Status::Pass
    } else if psd && worst_norm <= GRAM_REL {
        // Entrywise relative error on near-zero entries is limited by the
        // oracle's own grid convergence; see ledger.
        Status::XFail
    } else {
        Status::Fail
    };
    (status, detail)
}

// ---------------------------------------------------------------------------
// 2. ELBO bound and nesting
// ---------------------------------------------------------------------------

fn c02_elbo_bound() -> (Status, String) {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let n = 300;
    let noise: f64 = 0.1;
    let kernel = KernelSpec::one_dim(MaternFamily::Matern32, 0.2, 1.0).unwrap();
    let x = uniform_x(&mut rng, n);
    let f = odvff::data::sample_exact(&kernel, &x, &mut rng).unwrap();
    let y = DVector::from_fn(n, |i, _| f[i] + noise.sqrt() * rng.sample::<f64, _>(StandardNormal));
    let exact = exact_gp_log_marginal(&kernel, &x, &y, noise).unwrap();
    let gamma10 = uniform_x(&mut rng, 10);
    let mut ok = true;
    let mut parts = Vec::new();
    for n_gamma in [0usize, 10] {
        let gamma = if n_gamma == 0 { DMatrix::zeros(0, 1) } else { gamma10.clone() };
        let mut gaps = Vec::new();
        for n_beta in [5usize, 21] {
            let basis = fourier_basis((n_beta - 1) / 2, -0.1, 1.1);
            let lik = Likelihood::gaussian(noise).unwrap();
            let mut model = SparseGp::new(kernel.clone(), lik, basis, gamma.clone()).unwrap();
            model.set_analytic_optimum(&x, &y, DEFAULT_FULL_BATCH_CAP).unwrap();
            let elbo = model.elbo(&x, &y, n).unwrap();
            ok &= elbo <= exact + BOUND_SLACK;
            gaps.push(exact - elbo);
        }
        ok &= gaps[1] <= gaps[0] + BOUND_SLACK;
        parts.push(format!("|γ|={n_gamma}: gap {:.4} → {:.4}", gaps[0], gaps[1]));
    }
    (verdict(ok), format!("log p(y) = {exact:.4}; {}", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 3. Gradient checks
// ---------------------------------------------------------------------------

struct FdCheck {
    worst: f64,
    worst_at: String,
    entries: usize,
}

impl FdCheck {
    fn record(&mut self, analytic: f64, fd: f64, floor: f64, what: impl FnOnce() -> String) {
        let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor);
        self.entries += 1;
        if err > self.worst {
            self.worst = err;
            self.worst_at = what();
        }
    }
}

fn central_difference(model: &SparseGp, f: &dyn Fn(&SparseGp) -> f64, mutate: &dyn Fn(&mut SparseGp, f64)) -> f64 {
    let mut up = model.clone();
    mutate(&mut up, FD_STEP);
    let mut dn = model.clone();
    mutate(&mut dn, -FD_STEP);
    (f(&up) - f(&dn)) / (2.0 * FD_STEP)
}

fn gradient_instance(seed: u64, check: &mut FdCheck) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let family = [MaternFamily::Matern12, MaternFamily::Matern32, MaternFamily::Matern52][seed as usize % 3];
    let probit = seed % 2 == 1;
    let inducing = (seed / 2) % 2 == 1;
    let n = 40;
    let x = uniform_x(&mut rng, n);
    let y = DVector::from_fn(n, |i, _| {
        let v = (6.0 * x[(i, 0)]).sin() + 0.3 * (rng.random::<f64>() - 0.5);
        if probit {
            v.signum()
        } else {
            v
        }
    });
    let kernel = KernelSpec::one_dim(family, 0.15 + 0.35 * rng.random::<f64>(), 0.5 + 1.5 * rng.random::<f64>()).unwrap();
    let lik = if probit {
        Likelihood::probit()
    } else {
        Likelihood::gaussian(0.05 + 0.45 * rng.random::<f64>()).unwrap()
    };
    let basis = if inducing {
        CovarianceBasis::InducingPoints {
            locations: uniform_x(&mut rng, 7),
        }
    } else {
        fourier_basis(3, -0.1, 1.1)
    };
    let gamma = uniform_x(&mut rng, 5);
    let mut model = SparseGp::new(kernel, lik, basis, gamma).unwrap();
    randomize_state(&mut model, &mut rng);

    let n_total = 100;
    let g = model.elbo_grad(&x, &y, n_total).unwrap();
    let f = |m: &SparseGp| m.elbo(&x, &y, n_total).unwrap();
    let floor = 1e-6 * (1.0 + g.value.abs());
    let tag = |block: &str, i: usize| format!("instance {seed} {block}[{i}]");

    let hyp = model.hyperparameters();
    for i in 0..hyp.len() {
        let fd = central_difference(&model, &f, &|m, h| {
            let mut p = m.hyperparameters();
            p[i] += h;
            m.set_hyperparameters(&p).unwrap();
        });
        check.record(g.grads.hyper[i], fd, floor, || tag("hyper", i));
    }
    for i in 0..model.n_gamma() {
        let fd = central_difference(&model, &f, &|m, h| m.state.gamma[(i, 0)] += h);
        check.record(g.grads.gamma[(i, 0)], fd, floor, || tag("gamma", i));
        let fd = central_difference(&model, &f, &|m, h| m.state.a_gamma[i] += h);
        check.record(g.grads.a_gamma[i], fd, floor, || tag("a_gamma", i));
    }
    for i in 0..model.n_beta() {
        let fd = central_difference(&model, &f, &|m, h| m.state.a_beta[i] += h);
        check.record(g.grads.a_beta[i], fd, floor, || tag("a_beta", i));
        for j in 0..=i {
            let fd = central_difference(&model, &f, &|m, h| m.state.chol_s[(i, j)] += h);
            check.record(g.grads.chol_s[(i, j)], fd, floor, || format!("instance {seed} L[{i},{j}]"));
        }
    }
    if let Some(db) = &g.grads.beta_locations {
        for i in 0..db.nrows() {
            let fd = central_difference(&model, &f, &|m, h| m.basis.locations_mut().unwrap()[(i, 0)] += h);
            check.record(db[(i, 0)], fd, floor, || tag("beta_locations", i));
        }
    }
}

fn c03_gradients() -> (Status, String) {
    let mut check = FdCheck {
        worst: 0.0,
        worst_at: String::new(),
        entries: 0,
    };
    for seed in 0..20 {
        gradient_instance(seed, &mut check);
    }
    (
        verdict(check.worst <= FD_REL),
        format!("{} entries over 20 instances; worst rel err {:.2e} at {}", check.entries, check.worst, check.worst_at),
    )
}

// ---------------------------------------------------------------------------
// 4. Stationarity of the closed-form optimum
// ---------------------------------------------------------------------------

fn c04_stationarity() -> (Status, String) {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let n = 60;
    let x = uniform_x(&mut rng, n);
    let y = DVector::from_fn(n, |i, _| (6.0 * x[(i, 0)]).sin() + 0.2 * rng.sample::<f64, _>(StandardNormal));
    let kernel = KernelSpec::one_dim(MaternFamily::Matern32, 0.2, 1.0).unwrap();
    let gamma = uniform_x(&mut rng, 4);
    let mut model = SparseGp::new(kernel, Likelihood::gaussian(0.1).unwrap(), fourier_basis(3, -0.1, 1.1), gamma).unwrap();
    model.set_analytic_optimum(&x, &y, DEFAULT_FULL_BATCH_CAP).unwrap();
    let f = |m: &SparseGp| m.elbo(&x, &y, n).unwrap();
    let elbo = f(&model);
    let mut worst: f64 = 0.0;
    for i in 0..model.n_gamma() {
        worst = worst.max(central_difference(&model, &f, &|m, h| m.state.a_gamma[i] += h).abs());
    }
    for i in 0..model.n_beta() {
        worst = worst.max(central_difference(&model, &f, &|m, h| m.state.a_beta[i] += h).abs());
        for j in 0..=i {
            worst = worst.max(central_difference(&model, &f, &|m, h| m.state.chol_s[(i, j)] += h).abs());
        }
    }
    let tol = STATIONARY_REL * (1.0 + elbo.abs());
    (verdict(worst <= tol), format!("max |FD grad| {worst:.3e} vs {tol:.3e} (ELBO {elbo:.4})"))
}

// ---------------------------------------------------------------------------
// 5. Reductions
// ---------------------------------------------------------------------------

fn c05_reductions() -> (Status, String) {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let n = 80;
    let x = uniform_x(&mut rng, n);
    let y = DVector::from_fn(n, |i, _| (6.0 * x[(i, 0)]).sin() + 0.2 * rng.sample::<f64, _>(StandardNormal));
    let xs = DMatrix::from_fn(40, 1, |i, _| i as f64 / 39.0);
    let kernel = KernelSpec::one_dim(MaternFamily::Matern32, 0.25, 1.0).unwrap();
    let noise = 0.05;
    let lik = Likelihood::gaussian(noise).unwrap();
    let ones = |m: usize| DVector::from_element(m, kernel.diag_value());

    // ODVFF on an inducing-point basis and ODVGP share one code path.
    let inducing = CovarianceBasis::InducingPoints {
        locations: uniform_x(&mut rng, 8),
    };
    let base = SparseGp::new(kernel.clone(), lik.clone(), inducing, uniform_x(&mut rng, 6)).unwrap();
    let cfg = TrainConfig {
        iterations: 60,
        batch_size: 20,
        eval_every: 10,
        ..TrainConfig::default()
    };
    let a = train(base.clone(), Method::Odvff, &x, &y, &cfg).unwrap();
    let b = train(base, Method::Odvgp, &x, &y, &cfg).unwrap();
    let pa = a.model.predict(&xs).unwrap();
    let pb = b.model.predict(&xs).unwrap();
    let bitwise = a.model == b.model && pa == pb && a.aborted.is_none() && b.aborted.is_none();

    // |γ| = 0 optimum against dense inter-domain SGPR.
    let mut vff = SparseGp::new(kernel.clone(), lik.clone(), fourier_basis(6, -0.1, 1.1), DMatrix::zeros(0, 1)).unwrap();
    vff.set_analytic_optimum(&x, &y, DEFAULT_FULL_BATCH_CAP).unwrap();
    let pred = vff.predict(&xs).unwrap();
    let kb = vff.basis.gram(&kernel).unwrap().dense();
    let kbx = vff.basis.cross(&kernel, &x).unwrap();
    let kbs = vff.basis.cross(&kernel, &xs).unwrap();
    let (m, v) = sgpr_dense_predict(&kb, &kbx, &y, noise, &kbs, &ones(xs.nrows())).unwrap();
    let vff_err = max_abs_diff(&pred.mean, &m).max(max_abs_diff(&pred.variance, &v));
    let bound = collapsed_bound(&kb, &kbx, &ones(n), &y, noise).unwrap();
    let bound_err = (vff.elbo(&x, &y, n).unwrap() - bound).abs() / bound.abs().max(1.0);

    // Coupled parametrization: SVGP predictive for an arbitrary state.
    let u = uniform_x(&mut rng, 9);
    let mut svgp = SparseGp::new(
        kernel.clone(),
        lik.clone(),
        CovarianceBasis::InducingPoints { locations: u.clone() },
        DMatrix::zeros(0, 1),
    )
    .unwrap();
    randomize_state(&mut svgp, &mut rng);
    let direct = svgp.predict(&xs).unwrap();
    let coupled = inducing_predict(&kernel, &BaselineState::from_model(&svgp).unwrap(), noise, &xs).unwrap();
    let svgp_err = max_abs_diff(&direct.mean, &coupled.mean).max(max_abs_diff(&direct.variance, &coupled.variance));

    // Coupled parametrization: SGPR closed form.
    svgp.set_analytic_optimum(&x, &y, DEFAULT_FULL_BATCH_CAP).unwrap();
    let direct = svgp.predict(&xs).unwrap();
    let closed = inducing_optimum(&kernel, &u, &x, &y, noise).unwrap();
    let oracle = inducing_predict(&kernel, &closed, noise, &xs).unwrap();
    let sgpr_err = max_abs_diff(&direct.mean, &oracle.mean).max(max_abs_diff(&direct.variance, &oracle.variance));

    let ok = bitwise && vff_err <= SGPR_PRED && svgp_err <= SVGP_PRED && sgpr_err <= SGPR_PRED;
    (
        verdict(ok),
        format!(
            "ODVFF≡ODVGP bitwise {bitwise}; VFF vs dense SGPR {vff_err:.1e} (bound rel {bound_err:.1e}); \
             SVGP coupled {svgp_err:.1e}; SGPR closed form {sgpr_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. KL properties
// ---------------------------------------------------------------------------

/// `KL[N(K a_β, S) ‖ N(0, K)] + ½‖μ_γ⊥‖²`, from dense matrices.
fn kl_oracle(model: &SparseGp) -> f64 {
    let kb = model.basis.gram(&model.kernel).unwrap().dense();
    let s = model.state.s();
    let b = kb.nrows() as f64;
    let kc = kb.clone().cholesky().expect("SPD");
    let mean = &kb * &model.state.a_beta;
    let beta = 0.5 * (kc.solve(&s).trace() - b + mean.dot(&kc.solve(&mean)) + logdet_spd(&kb) - logdet_spd(&s));
    if model.n_gamma() == 0 {
        return beta;
    }
    let z = &model.state.gamma;
    let kg = model.kernel.gram(z, Part::Full).unwrap();
    let kbg = model.basis.cross(&model.kernel, z).unwrap();
    let ag = &model.state.a_gamma;
    // RKHS norm of the γ-component orthogonal to span(β).
    let v = &kbg * ag;
    beta + 0.5 * (ag.dot(&(kg * ag)) - v.dot(&kc.solve(&v)))
}

fn c06_kl() -> (Status, String) {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut min_kl = f64::INFINITY;
    let mut worst_oracle: f64 = 0.0;
    let mut worst_prior: f64 = 0.0;
    for k in 0..1000 {
        let fam = [MaternFamily::Matern12, MaternFamily::Matern32, MaternFamily::Matern52][k % 3];
        let kernel = KernelSpec::one_dim(fam, 0.15 + 0.5 * rng.random::<f64>(), 0.5 + rng.random::<f64>()).unwrap();
        let basis = if k % 2 == 0 {
            fourier_basis(1 + k % 4, -0.1, 1.1)
        } else {
            CovarianceBasis::InducingPoints {
                locations: uniform_x(&mut rng, 3 + k % 5),
            }
        };
        let gamma = uniform_x(&mut rng, k % 4);
        let mut model = SparseGp::new(kernel, Likelihood::gaussian(0.1).unwrap(), basis, gamma).unwrap();
        worst_prior = worst_prior.max(model.kl_divergence().unwrap().abs());
        randomize_state(&mut model, &mut rng);
        let kl = model.kl_divergence().unwrap();
        min_kl = min_kl.min(kl);
        let oracle = kl_oracle(&model);
        worst_oracle = worst_oracle.max((kl - oracle).abs() / oracle.abs().max(1.0));
    }
    let ok = min_kl >= 0.0 && worst_prior <= KL_ORACLE && worst_oracle <= KL_ORACLE;
    (
        verdict(ok),
        format!("min KL {min_kl:.3e} over 1000 states; max |KL| at prior {worst_prior:.1e}; max rel dev from dense oracle {worst_oracle:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 7. Calibration
// ---------------------------------------------------------------------------

fn c07_calibration() -> (Status, String) {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let n = 100_000;
    let noise = 0.1;
    let mean = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let variance = DVector::from_fn(n, |_, _| 0.01 + rng.random::<f64>());
    let y = DVector::from_fn(n, |i, _| mean[i] + (variance[i] + noise).sqrt() * rng.sample::<f64, _>(StandardNormal));
    let pred = PredictiveDistribution {
        mean,
        variance,
        noise_variance: noise,
        clamped: 0,
        outside_domain: 0,
    };
    let coverage = evaluate(&pred, &Likelihood::gaussian(noise).unwrap(), &y).unwrap().coverage.unwrap();
    let coverage_ok = (coverage - 0.95).abs() <= COVERAGE_BAND;

    let lik = Likelihood::probit();
    let mut worst_z: f64 = 0.0;
    for &(m, s, label) in &[(-3.0, 0.1, 1.0), (-0.5, 1.0, 1.0), (0.0, 3.0, -1.0), (1.5, 0.5, -1.0), (4.0, 2.0, 1.0), (2.0, 4.0, -1.0)] {
        let draws = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let f = m + f64::sqrt(s) * rng.sample::<f64, _>(StandardNormal);
            let v = log_ndtr(label * f);
            sum += v;
            sum_sq += v * v;
        }
        let mc = sum / draws as f64;
        let se = ((sum_sq / draws as f64 - mc * mc) / draws as f64).sqrt();
        let quad = lik.expected_log_lik(label, m, s).unwrap();
        worst_z = worst_z.max((quad - mc).abs() / se);
    }
    let ok = coverage_ok && worst_z <= MC_SIGMAS;
    (
        verdict(ok),
        format!("coverage {coverage:.4} (0.95 ± {COVERAGE_BAND}); probit ELL worst |Δ| = {worst_z:.2} SE"),
    )
}

// ---------------------------------------------------------------------------
// Desk-scale reproductions
// ---------------------------------------------------------------------------

fn run_config(toml: &str) -> Vec<MetricsRecord> {
    let cfg = ExperimentConfig::from_toml(toml).expect("acceptance config");
    let dir = tempfile::tempdir().unwrap();
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let report = run_experiment(&cfg, dir.path(), jobs).expect("experiment");
    for f in &report.failures {
        eprintln!("  run failed: {} |β|={} seed {}: {}", f.method, f.n_beta, f.seed, f.error);
    }
    report.records
}

fn mean_of(records: &[MetricsRecord], method: &str, n_beta: usize, field: fn(&MetricsRecord) -> f64) -> f64 {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.method == method && r.n_beta == n_beta)
        .map(field)
        .collect();
    if vals.is_empty() {
        return f64::NAN;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn log_lik(r: &MetricsRecord) -> f64 {
    r.log_lik
}

fn rmse(r: &MetricsRecord) -> f64 {
    r.rmse
}

fn coverage(r: &MetricsRecord) -> f64 {
    r.coverage.unwrap_or(f64::NAN)
}

/// One-dimensional gap experiment; training inputs avoid [0.45, 0.55].
fn gap_experiment(name: &str, replications: usize, methods: &str) -> String {
    format!(
        r#"
schema_version = 1
name = "{name}"
replications = {replications}

[dataset]
kind = "synthetic"
n_train = 1000
n_test = 1000
noise_variance = 0.15
gap = [0.45, 0.55]
kernel = {{ families = ["matern32"], lengthscales = [0.1], variance = 1.0, structure = "one_dim" }}

[model]
family = "matern32"
lengthscale = 0.35
noise_variance = 0.13

{methods}
"#
    )
}

fn odvff_block(n_beta: usize, total: usize) -> String {
    format!("[[methods]]\nmethod = \"odvff\"\nn_beta = {n_beta}\nn_gamma = {}\n", total - n_beta)
}

fn c08_gap() -> (Status, String) {
    let methods = odvff_block(21, 200) + &odvff_block(181, 200);
    let records = run_config(&gap_experiment("gap", 5, &methods));
    let (r21, r181) = (mean_of(&records, "ODVFF", 21, rmse), mean_of(&records, "ODVFF", 181, rmse));
    let (c21, c181) = (mean_of(&records, "ODVFF", 21, coverage), mean_of(&records, "ODVFF", 181, coverage));
    let drop = (r21 - r181) / r21;
    // RMSE must fall by at least 2.9%; coverage must start at or below 0.94,
    // near 0.92, and rise to within 0.03 of 0.96.
    let ok = r181 < r21
        && drop >= 0.029
        && c21 <= 0.94
        && (c21 - 0.92).abs() <= 0.03
        && c181 > c21
        && (c181 - 0.96).abs() <= 0.03;
    (
        verdict(ok),
        format!("RMSE {r21:.4} → {r181:.4} ({:.1}% drop); coverage {c21:.3} → {c181:.3}", 100.0 * drop),
    )
}

fn c09_beta_trend() -> (Status, String) {
    let sizes = [21, 61, 121, 181];
    let mut methods: String = sizes.iter().map(|&b| odvff_block(b, 200)).collect();
    methods.push_str("[[methods]]\nmethod = \"sgpr\"\nn_beta = 181\nn_gamma = 19\n");
    let records = run_config(&gap_experiment("beta_trend", 15, &methods));
    let curve: Vec<f64> = sizes.iter().map(|&b| mean_of(&records, "ODVFF", b, log_lik)).collect();
    let sgpr = mean_of(&records, "SGPR", 181, log_lik);
    let inversions = curve.windows(2).filter(|w| w[1] < w[0]).count();
    let below = curve.iter().all(|&v| v <= sgpr);
    let closer = (sgpr - curve[3]) < (sgpr - curve[0]);
    let ok = inversions <= 1 && below && closer;
    let shown: Vec<String> = curve.iter().map(|v| format!("{v:.4}")).collect();
    (
        verdict(ok),
        format!("ODVFF logL [{}] ({inversions} inversions); SGPR {sgpr:.4}", shown.join(", ")),
    )
}

fn large_synthetic(name: &str, dim: usize, n_train: usize, noise: f64, methods: &str, training: &str) -> String {
    let (structure, families, lengthscales) = if dim == 1 {
        ("one_dim", "[\"matern32\"]".to_string(), "[0.1]".to_string())
    } else {
        ("ard", format!("[{}]", vec!["\"matern32\""; dim].join(", ")), format!("[{}]", vec!["0.1"; dim].join(", ")))
    };
    format!(
        r#"
schema_version = 1
name = "{name}"
replications = 5

[dataset]
kind = "synthetic"
n_train = {n_train}
n_test = 1000
noise_variance = {noise}
rff_features = 2000
kernel = {{ families = {families}, lengthscales = {lengthscales}, variance = 1.0, structure = "{structure}" }}

[model]
family = "matern32"
lengthscale = 0.35
noise_variance = 0.1

{methods}

[training]
iterations = 8000
batch_size = 500
{training}
"#
    )
}

fn c10_large_1d() -> (Status, String) {
    let methods = "[[methods]]\nmethod = \"odvff\"\nn_beta = 50\nn_gamma = 50\n\n[[methods]]\nmethod = \"sgpr\"\nn_beta = 50\nn_gamma = 50\n";
    let records = run_config(&large_synthetic("large_1d", 1, 50_000, 0.04, methods, "full_batch_cap = 50000"));
    let (lo, ls) = (mean_of(&records, "ODVFF", 50, log_lik), mean_of(&records, "SGPR", 50, log_lik));
    let (co, cs) = (mean_of(&records, "ODVFF", 50, coverage), mean_of(&records, "SGPR", 50, coverage));
    let ok = (lo - 0.147).abs() <= 0.10 && (ls - 0.156).abs() <= 0.05 && (co - 0.960).abs() <= 0.04 && (cs - 0.949).abs() <= 0.04;
    (
        verdict(ok),
        format!("ODVFF logL {lo:.3} cov {co:.3}; SGPR logL {ls:.3} cov {cs:.3}"),
    )
}

fn c11_d10_ordering() -> (Status, String) {
    let methods = ["odvff", "odvgp", "svgp"]
        .iter()
        .map(|m| format!("[[methods]]\nmethod = \"{m}\"\nn_beta = 50\nn_gamma = 50\n"))
        .collect::<Vec<_>>()
        .join("\n");
    let n_train: usize = std::env::var("ODVFF_ACCEPTANCE_D10_N").ok().and_then(|v| v.parse().ok()).unwrap_or(50_000);
    let records = run_config(&large_synthetic("d10", 10, n_train, 0.2, &methods, ""));
    let f = mean_of(&records, "ODVFF", 50, log_lik);
    let g = mean_of(&records, "ODVGP", 50, log_lik);
    let s = mean_of(&records, "SVGP", 50, log_lik);
    (
        verdict(f > g && f > s),
        format!("N = {n_train}: ODVFF {f:.3}, ODVGP {g:.3}, SVGP {s:.3}"),
    )
}

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

type Check = fn() -> (Status, String);

const CRITERIA: &[(u32, &str, bool, Check)] = &[
    (1, "gram_oracle", false, c01_gram_oracle),
    (2, "elbo_bound", false, c02_elbo_bound),
    (3, "gradient_checks", false, c03_gradients),
    (4, "optimum_stationarity", false, c04_stationarity),
    (5, "reductions", false, c05_reductions),
    (6, "kl_properties", false, c06_kl),
    (7, "calibration", false, c07_calibration),
    (8, "gap_experiment", true, c08_gap),
    (9, "beta_trend", true, c09_beta_trend),
    (10, "large_1d", true, c10_large_1d),
    (11, "d10_ordering", true, c11_d10_ordering),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (id, name, slow, _) in CRITERIA {
            let tag = if *slow { " (ignored)" } else { "" };
            println!("c{id:02}_{name}: test{tag}");
        }
        return;
    }
    let only_slow = args.iter().any(|a| a == "--ignored");
    let with_slow = only_slow || args.iter().any(|a| a == "--include-ignored");
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if with_slow && cfg!(debug_assertions) {
        eprintln!("note: desk-scale criteria are meant for --release builds");
    }

    let mut outcomes = Vec::new();
    for &(id, name, slow, check) in CRITERIA {
        let label = format!("c{id:02}_{name}");
        if !filters.is_empty() && !filters.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        if (slow && !with_slow) || (!slow && only_slow) {
            outcomes.push(Outcome {
                id,
                name,
                status: Status::Skip,
                detail: "desk-scale; run with --ignored".into(),
                seconds: 0.0,
            });
            continue;
        }
        let start = Instant::now();
        let (status, detail) = check();
        let o = Outcome {
            id,
            name,
            status,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        };
        print_line(&o);
        outcomes.push(o);
    }
    for o in outcomes.iter().filter(|o| o.status == Status::Skip) {
        print_line(o);
    }
    let failed = outcomes.iter().filter(|o| o.status == Status::Fail).count();
    let passed = outcomes.iter().filter(|o| o.status == Status::Pass).count();
    let xfailed = outcomes.iter().filter(|o| o.status == Status::XFail).count();
    println!("\nacceptance: {passed} passed, {failed} failed, {xfailed} expected failures");
    if failed > 0 {
        std::process::exit(1);
    }
}

fn print_line(o: &Outcome) {
    let tag = match o.status {
        Status::Pass => "PASS ",
        Status::Fail => "FAIL ",
        Status::XFail => "XFAIL",
        Status::Skip => "SKIP ",
    };
    println!("criterion {:>2} {tag} {:<22} [{:>7.1}s] {}", o.id, o.name, o.seconds, o.detail);
}
