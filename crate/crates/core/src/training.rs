//! Stochastic training: natural-gradient steps on the `β` block, Adam on the
//! remaining parameters, seeded epoch-wise minibatching.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovarianceBasis, ElboGrad, Method, SparseGp, DEFAULT_FULL_BATCH_CAP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Adam learning rate for hyperparameters, locations and first-order
    /// variational parameters.
    pub learning_rate: f64,
    pub natgrad_step: f64,
    /// Multiplier applied to the natural-gradient step every
    /// `natgrad_decay_every` iterations.
    pub natgrad_decay: f64,
    pub natgrad_decay_every: usize,
    pub seed: u64,
    /// Optimize γ locations, plus inducing locations for SVGP and SGPR.
    pub optimize_locations: bool,
    pub optimize_hyperparameters: bool,
    /// Trace cadence in iterations.
    pub eval_every: usize,
    /// Also record the full-data ELBO at each cadence.
    pub trace_full_elbo: bool,
    /// Hyperparameter steps for the closed-form methods (SGPR, VFF).
    pub full_batch_iterations: usize,
    pub full_batch_learning_rate: f64,
    /// Largest training set accepted by the closed-form methods.
    pub full_batch_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 8000,
            batch_size: 500,
            learning_rate: 1e-2,
            natgrad_step: 0.1,
            natgrad_decay: 0.5,
            natgrad_decay_every: 2000,
            seed: 0,
            optimize_locations: true,
            optimize_hyperparameters: true,
            eval_every: 100,
            trace_full_elbo: false,
            full_batch_iterations: 200,
            full_batch_learning_rate: 5e-2,
            full_batch_cap: DEFAULT_FULL_BATCH_CAP,
        }
    }
}

impl TrainConfig {
    /// Checks the config on its own and, when `n` is given, against the data size.
    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(name, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("iterations", self.iterations)?;
        positive("batch_size", self.batch_size)?;
        positive("eval_every", self.eval_every)?;
        positive("natgrad_decay_every", self.natgrad_decay_every)?;
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("natgrad_step", self.natgrad_step),
            ("full_batch_learning_rate", self.full_batch_learning_rate),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        if !(self.natgrad_decay > 0.0 && self.natgrad_decay <= 1.0) {
            return Err(Error::config("natgrad_decay", "must lie in (0, 1]"));
        }
        if let Some(n) = n {
            if self.batch_size > n {
                return Err(Error::config(
                    "batch_size",
                    format!("batch size {} exceeds training size {n}", self.batch_size),
                ));
            }
        }
        Ok(())
    }

    pub fn natgrad_step_at(&self, iteration: usize) -> f64 {
        let halvings = (iteration.saturating_sub(1) / self.natgrad_decay_every) as i32;
        self.natgrad_step * self.natgrad_decay.powi(halvings)
    }
}

/// Epoch-wise shuffled index batches; the last batch of an epoch may be short.
#[derive(Clone, Debug)]
pub struct MinibatchStream {
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha20Rng,
}

pub fn minibatch_stream(n: usize, batch_size: usize, seed: u64) -> MinibatchStream {
    MinibatchStream {
        batch_size: batch_size.clamp(1, n.max(1)),
        order: (0..n).collect(),
        pos: n,
        rng: ChaCha20Rng::seed_from_u64(seed),
    }
}

impl Iterator for MinibatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let n = self.order.len();
        if n == 0 {
            return None;
        }
        if self.pos >= n {
            // full batches keep the natural order so sums match the full-data ELBO
            if self.batch_size < n {
                self.order.shuffle(&mut self.rng);
            }
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(n);
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Adam ascent on a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, n: usize) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] += self.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Hyper,
    GammaLocations,
    BetaLocations,
    AGamma,
    ABeta,
    CholS,
}

/// Which parameter blocks the first-order optimizer owns.
#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<Block>,
}

impl Layout {
    fn new(method: Method, model: &SparseGp, cfg: &TrainConfig) -> Self {
        let mut blocks = Vec::new();
        if cfg.optimize_hyperparameters {
            blocks.push(Block::Hyper);
        }
        if cfg.optimize_locations {
            if model.n_gamma() > 0 {
                blocks.push(Block::GammaLocations);
            }
            // Natural-gradient methods keep β locations fixed: a_β = K_β⁻¹m
            // is only meaningful for the K_β the step was taken under.
            if matches!(model.basis, CovarianceBasis::InducingPoints { .. }) && !method.uses_natural_gradient() {
                blocks.push(Block::BetaLocations);
            }
        }
        if !method.is_analytic() {
            if model.n_gamma() > 0 {
                blocks.push(Block::AGamma);
            }
            if !method.uses_natural_gradient() {
                blocks.push(Block::ABeta);
                blocks.push(Block::CholS);
            }
        }
        Layout { blocks }
    }

    fn pack(&self, model: &SparseGp) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Hyper => out.extend(model.hyperparameters()),
                Block::GammaLocations => out.extend(row_major(&model.state.gamma)),
                Block::BetaLocations => out.extend(row_major(model.basis.locations().expect("inducing basis"))),
                Block::AGamma => out.extend(model.state.a_gamma.iter()),
                Block::ABeta => out.extend(model.state.a_beta.iter()),
                Block::CholS => out.extend(lower_entries(&model.state.chol_s)),
            }
        }
        out
    }

    fn gradient(&self, g: &ElboGrad) -> Vec<f64> {
        let g = &g.grads;
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Hyper => out.extend(g.hyper.iter()),
                Block::GammaLocations => out.extend(row_major(&g.gamma)),
                Block::BetaLocations => out.extend(row_major(g.beta_locations.as_ref().expect("inducing basis"))),
                Block::AGamma => out.extend(g.a_gamma.iter()),
                Block::ABeta => out.extend(g.a_beta.iter()),
                Block::CholS => out.extend(lower_entries(&g.chol_s)),
            }
        }
        out
    }

    fn unpack(&self, model: &mut SparseGp, params: &[f64]) -> Result<()> {
        let mut pos = 0;
        let mut take = |len: usize| {
            let s = &params[pos..pos + len];
            pos += len;
            s
        };
        for b in &self.blocks {
            match b {
                Block::Hyper => {
                    let len = model.hyperparameters().len();
                    model.set_hyperparameters(take(len))?;
                }
                Block::GammaLocations => {
                    let z = &mut model.state.gamma;
                    set_row_major(z, take(z.len()));
                    model.basis.clamp_inside(z);
                }
                Block::BetaLocations => {
                    let z = model.basis.locations_mut().expect("inducing basis");
                    let len = z.len();
                    set_row_major(z, take(len));
                }
                Block::AGamma => {
                    let a = &mut model.state.a_gamma;
                    a.copy_from_slice(take(a.len()));
                }
                Block::ABeta => {
                    let a = &mut model.state.a_beta;
                    a.copy_from_slice(take(a.len()));
                }
                Block::CholS => {
                    let l = &mut model.state.chol_s;
                    let b = l.nrows();
                    let vals = take(b * (b + 1) / 2);
                    let mut k = 0;
                    for i in 0..b {
                        for j in 0..=i {
                            l[(i, j)] = vals[k];
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

fn set_row_major(m: &mut DMatrix<f64>, vals: &[f64]) {
    let c = m.ncols();
    for (k, v) in vals.iter().enumerate() {
        m[(k / c, k % c)] = *v;
    }
}

fn lower_entries(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..=i).map(move |j| m[(i, j)]))
}

/// Names the first parameter block holding a non-finite value, if any.
fn non_finite_block(g: &ElboGrad) -> Option<&'static str> {
    let bad = |v: &[f64]| v.iter().any(|v| !v.is_finite());
    let p = &g.grads;
    if !g.value.is_finite() {
        Some("elbo")
    } else if bad(&p.hyper) {
        Some("hyperparameters")
    } else if bad(p.gamma.as_slice()) {
        Some("gamma_locations")
    } else if p.beta_locations.as_ref().is_some_and(|b| bad(b.as_slice())) {
        Some("beta_locations")
    } else if bad(p.a_gamma.as_slice()) {
        Some("a_gamma")
    } else if bad(p.a_beta.as_slice()) {
        Some("a_beta")
    } else if bad(p.chol_s.as_slice()) {
        Some("covariance")
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Scaled minibatch ELBO before this iteration's update.
    pub batch_elbo: f64,
    pub full_elbo: Option<f64>,
    /// Log-space hyperparameters by name.
    pub hyperparameters: BTreeMap<String, f64>,
    pub elapsed_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    /// One JSON object per record.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final state, or the last state with a finite ELBO after an abort.
    pub model: SparseGp,
    pub trace: TrainTrace,
    /// Set when training stopped early on a numerical failure.
    pub aborted: Option<Error>,
}

fn gather(x: &DMatrix<f64>, y: &DVector<f64>, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let xb = DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)]);
    let yb = DVector::from_fn(idx.len(), |r, _| y[idx[r]]);
    (xb, yb)
}

struct Recorder<'a> {
    cfg: &'a TrainConfig,
    names: Vec<String>,
    last: usize,
    start: Instant,
    trace: TrainTrace,
}

impl Recorder<'_> {
    fn record(&mut self, it: usize, model: &SparseGp, value: f64, x: &DMatrix<f64>, y: &DVector<f64>) {
        if it % self.cfg.eval_every != 0 && it != self.last {
            return;
        }
        let full_elbo = if self.cfg.trace_full_elbo {
            model.elbo(x, y, x.nrows()).ok()
        } else {
            None
        };
        self.trace.records.push(TraceRecord {
            iteration: it,
            batch_elbo: value,
            full_elbo,
            hyperparameters: self.names.iter().cloned().zip(model.hyperparameters()).collect(),
            elapsed_seconds: self.start.elapsed().as_secs_f64(),
        });
    }
}

/// Trains `model` as `method` on standardized data. Configuration and data
/// errors are returned as `Err`; numerical failures during training end the
/// run early and are reported in [`TrainOutcome::aborted`].
pub fn train(
    mut model: SparseGp,
    method: Method,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let n = x.nrows();
    if method.is_analytic() {
        cfg.validate(None)?;
    } else {
        cfg.validate(Some(n))?;
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite training input".into()));
    }
    for &v in y.iter() {
        model.likelihood.check_target(v)?;
    }
    if method.uses_natural_gradient() && model.likelihood.noise_variance().is_none() && cfg.natgrad_step > 1.0 {
        log::warn!("natural-gradient steps above 1 are unstable for non-conjugate likelihoods");
    }
    let iterations = if method.is_analytic() {
        if cfg.optimize_hyperparameters || cfg.optimize_locations {
            cfg.full_batch_iterations
        } else {
            0
        }
    } else {
        cfg.iterations
    };
    let layout = Layout::new(method, &model, cfg);
    let lr = if method.is_analytic() {
        cfg.full_batch_learning_rate
    } else {
        cfg.learning_rate
    };
    let mut params = layout.pack(&model);
    let mut adam = Adam::new(lr, params.len());
    let mut stream = minibatch_stream(n, cfg.batch_size, cfg.seed);
    let mut rec = Recorder {
        cfg,
        names: model.hyperparameter_names(),
        last: iterations,
        start: Instant::now(),
        trace: TrainTrace::default(),
    };
    let mut last_good = model.clone();

    let abort = |model: SparseGp, trace: TrainTrace, err: Error| {
        log::warn!("training aborted: {err}");
        Ok(TrainOutcome {
            model,
            trace,
            aborted: Some(err),
        })
    };

    for it in 1..=iterations {
        let step = if method.is_analytic() {
            model
                .set_analytic_optimum(x, y, cfg.full_batch_cap)
                .and_then(|_| model.elbo_grad(x, y, n))
        } else {
            let idx = stream.next().expect("non-empty data");
            let (xb, yb) = gather(x, y, &idx);
            model.elbo_grad(&xb, &yb, n)
        };
        let g = match step {
            Ok(g) => g,
            Err(e @ Error::TooLarge { .. }) => return Err(e),
            Err(e) => return abort(last_good, rec.trace, e),
        };
        if let Some(block) = non_finite_block(&g) {
            let err = Error::NonFinite {
                iteration: it,
                block: block.into(),
            };
            return abort(last_good, rec.trace, err);
        }
        rec.record(it, &model, g.value, x, y);
        last_good = model.clone();

        if method.uses_natural_gradient() {
            if let Err(e) = model.natural_gradient_step(&g.grads, cfg.natgrad_step_at(it)) {
                return abort(last_good, rec.trace, e);
            }
        }
        if !params.is_empty() && lr > 0.0 {
            adam.step(&mut params, &layout.gradient(&g));
            if let Err(e) = layout.unpack(&mut model, &params) {
                return abort(last_good, rec.trace, e);
            }
            params = layout.pack(&model);
        }
    }
    if method.is_analytic() {
        match model.set_analytic_optimum(x, y, cfg.full_batch_cap) {
            Ok(()) => {}
            Err(e @ Error::TooLarge { .. }) => return Err(e),
            Err(e) => return abort(last_good, rec.trace, e),
        }
    }
    Ok(TrainOutcome {
        model,
        trace: rec.trace,
        aborted: None,
    })
}
