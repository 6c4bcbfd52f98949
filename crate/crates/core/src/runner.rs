//! Executes an experiment: data per replication, one training run per
//! (method, seed), metrics, traces and checkpoints on disk.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, ExperimentConfig, LikelihoodKind, SCHEMA_VERSION};
use crate::data::{load_csv, sample_synthetic, split, standardize, Dataset, Standardization};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate, render_text, write_aggregate_csv, write_records_csv, AggregateTable, Metrics, MetricsRecord};
use crate::model::{configure, ModelSpec, PredictiveDistribution, SparseGp};
use crate::training::train;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "ODVFF_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub crate_version: String,
    pub config: ExperimentConfig,
    pub method: ModelSpec,
    pub seed: u64,
    pub data_provenance: String,
    pub n_train: usize,
    pub standardization: Standardization,
    pub model: SparseGp,
    /// Last traced iteration.
    pub iterations_completed: usize,
    pub aborted: Option<String>,
    pub metrics: Option<Metrics>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cp: Checkpoint = serde_json::from_str(&text)?;
        if cp.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unknown checkpoint schema version {}", cp.schema_version),
            ));
        }
        Ok(cp)
    }

    /// Predicts at inputs given in the original data units; mean and
    /// variances are returned in the original target units.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        let st = &self.standardization;
        if x.ncols() != st.x_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: st.x_mean.len(),
                got: x.ncols(),
            });
        }
        let xs = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - st.x_mean[c]) / st.x_scale[c]);
        let mut pred = self.model.predict(&xs)?;
        let s2 = st.y_scale * st.y_scale;
        pred.mean = st.restore_y(&pred.mean);
        pred.variance *= s2;
        pred.noise_variance *= s2;
        Ok(pred)
    }

    /// Human-readable summary.
    pub fn describe(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let _ = writeln!(s, "experiment   {}", self.config.name);
        let _ = writeln!(s, "method       {} (seed {})", self.method.method.name(), self.seed);
        let _ = writeln!(s, "dimensions   D = {}, |β| = {}, |γ| = {}", m.dim(), m.n_beta(), m.n_gamma());
        let _ = writeln!(s, "structure    {:?}", m.kernel.structure);
        let _ = writeln!(s, "data         {} (N = {})", self.data_provenance, self.n_train);
        let _ = writeln!(s, "training     {} iterations traced", self.iterations_completed);
        if let Some(a) = &self.aborted {
            let _ = writeln!(s, "aborted      {a}");
        }
        if let Some(mt) = &self.metrics {
            let cov = mt.coverage.map(|c| format!("{c:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "test         logL {:.4}, RMSE {:.4}, coverage {cov}", mt.log_lik, mt.rmse);
        }
        let _ = writeln!(s, "hyperparameters");
        for (name, v) in m.hyperparameter_names().iter().zip(m.hyperparameters()) {
            let _ = writeln!(s, "  {:<24} {:.6}", name.trim_start_matches("log_"), v.exp());
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunFailure {
    pub method: String,
    pub n_beta: usize,
    pub n_gamma: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<RunFailure>,
    pub table: Option<AggregateTable>,
}

/// `--out` first, then the config, then `$ODVFF_OUT/<name>`, then
/// `./odvff-runs/<name>`.
pub fn resolve_output_dir(cfg: &ExperimentConfig, cli: Option<&Path>) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    let root = std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("odvff-runs"));
    root.join(&cfg.name)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Replicate {
    seed: u64,
    train: Dataset,
    test: Dataset,
    standardization: Standardization,
}

fn prepare_data(cfg: &ExperimentConfig) -> Result<Vec<Replicate>> {
    let targets = cfg.model.likelihood == LikelihoodKind::Gaussian;
    let loaded = match &cfg.dataset {
        DatasetConfig::Csv(src) => Some(load_csv(&src.path, &src.schema())?),
        DatasetConfig::Synthetic(_) => None,
    };
    (0..cfg.replications)
        .map(|rep| {
            let seed = cfg.base_seed + rep as u64;
            let (train, test) = match (&cfg.dataset, &loaded) {
                (DatasetConfig::Synthetic(spec), _) => {
                    let (train, test) = sample_synthetic(spec, seed)?;
                    (train, test.expect("validated n_test > 0"))
                }
                (DatasetConfig::Csv(src), Some(data)) => split(data, src.test_fraction, seed)?,
                (DatasetConfig::Csv(_), None) => unreachable!(),
            };
            if !targets {
                train.check_binary_labels()?;
                test.check_binary_labels()?;
            }
            let (train, test, standardization) = standardize(&train, &test, targets)?;
            Ok(Replicate {
                seed,
                train,
                test,
                standardization,
            })
        })
        .collect()
}

fn run_dir(out: &Path, spec: &ModelSpec, seed: u64) -> PathBuf {
    out.join("runs").join(format!(
        "{}-b{}-g{}-s{}",
        spec.method.name().to_ascii_lowercase(),
        spec.n_beta,
        spec.n_gamma,
        seed
    ))
}

fn run_one(cfg: &ExperimentConfig, spec: &ModelSpec, rep: &Replicate, out: &Path) -> Result<MetricsRecord> {
    let kernel = cfg.model.kernel(rep.train.dim())?;
    let likelihood = cfg.model.likelihood()?;
    let domain = rep.train.domain()?;
    let model = configure(spec, kernel, likelihood, &rep.train.x, &domain, rep.seed)?;
    let mut tcfg = cfg.training.clone();
    tcfg.seed = rep.seed;
    log::info!("{} |β|={} |γ|={} seed {}: training on N = {}", spec.method.name(), spec.n_beta, spec.n_gamma, rep.seed, rep.train.len());
    let start = Instant::now();
    let outcome = train(model, spec.method, &rep.train.x, &rep.train.y, &tcfg)?;
    let seconds = start.elapsed().as_secs_f64();
    log::info!("{} |β|={} seed {}: done in {seconds:.1}s", spec.method.name(), spec.n_beta, rep.seed);

    let metrics = if outcome.aborted.is_none() {
        let pred = outcome.model.predict(&rep.test.x)?;
        if pred.outside_domain > 0 {
            log::warn!("{} test points lie outside the Fourier intervals", pred.outside_domain);
        }
        Some(evaluate(&pred, &outcome.model.likelihood, &rep.test.y)?)
    } else {
        None
    };

    let dir = run_dir(out, spec, rep.seed);
    let mut trace = Vec::new();
    outcome.trace.write_jsonl(&mut trace)?;
    write_atomic(&dir.join("trace.jsonl"), &trace)?;
    let checkpoint = Checkpoint {
        schema_version: SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        method: *spec,
        seed: rep.seed,
        data_provenance: rep.train.provenance.clone(),
        n_train: rep.train.len(),
        standardization: rep.standardization.clone(),
        iterations_completed: outcome.trace.records.last().map_or(0, |r| r.iteration),
        model: outcome.model,
        aborted: outcome.aborted.as_ref().map(|e| e.to_string()),
        metrics,
    };
    write_atomic(&dir.join("checkpoint.json"), &serde_json::to_vec(&checkpoint)?)?;

    if let Some(e) = outcome.aborted {
        return Err(e);
    }
    let m = checkpoint.metrics.expect("metrics present when not aborted");
    Ok(MetricsRecord {
        method: spec.method.name().into(),
        dataset: cfg.name.clone(),
        n_beta: spec.n_beta,
        n_gamma: spec.n_gamma,
        seed: rep.seed,
        log_lik: m.log_lik,
        rmse: m.rmse,
        coverage: m.coverage,
        seconds,
    })
}

/// Runs every (method, replication) pair on `jobs` threads. Config and data
/// errors are returned as `Err`; individual run failures are collected.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunReport> {
    cfg.validate()?;
    let reps = prepare_data(cfg)?;
    std::fs::create_dir_all(out)?;
    let tasks: Vec<(&ModelSpec, &Replicate)> = cfg.methods.iter().flat_map(|m| reps.iter().map(move |r| (m, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let results: Vec<Result<MetricsRecord>> =
        pool.install(|| tasks.par_iter().map(|(spec, rep)| run_one(cfg, spec, rep, out)).collect());

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((spec, rep), res) in tasks.iter().zip(results) {
        match res {
            Ok(r) => records.push(r),
            Err(e) => {
                log::error!("{} seed {} failed: {e}", spec.method.name(), rep.seed);
                failures.push(RunFailure {
                    method: spec.method.name().into(),
                    n_beta: spec.n_beta,
                    n_gamma: spec.n_gamma,
                    seed: rep.seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let mut csv = Vec::new();
    write_records_csv(&records, &mut csv)?;
    write_atomic(&out.join("metrics.csv"), &csv)?;
    let table = if records.is_empty() {
        None
    } else {
        let t = aggregate(&records)?;
        let mut agg = Vec::new();
        write_aggregate_csv(&t, &mut agg)?;
        write_atomic(&out.join("aggregate.csv"), &agg)?;
        write_atomic(&out.join("summary.txt"), render_text(&t).as_bytes())?;
        Some(t)
    };
    if !failures.is_empty() {
        write_atomic(&out.join("failures.json"), &serde_json::to_vec_pretty(&failures)?)?;
    }
    Ok(RunReport {
        out_dir: out.to_path_buf(),
        records,
        failures,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
schema_version = 1
name = "unit"
[dataset]
kind = "synthetic"
n_train = 120
n_test = 60
noise_variance = 0.3
kernel = { families = ["matern32"], lengthscales = [0.3], variance = 1.0, structure = "one_dim" }
[model]
family = "matern32"
noise_variance = 0.01
[[methods]]
method = "sgpr"
n_beta = 10
n_gamma = 0
[training]
full_batch_iterations = 30
"#;

    #[test]
    fn metrics_use_the_trained_likelihood() {
        let cfg = ExperimentConfig::from_toml(CONFIG).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg, tmp.path(), 1).unwrap();
        let cp = Checkpoint::load(&tmp.path().join("runs/sgpr-b10-g0-s0/checkpoint.json")).unwrap();
        assert!(cp.model.likelihood.noise_variance().unwrap() > 0.02);

        let rep = &prepare_data(&cfg).unwrap()[0];
        let pred = cp.model.predict(&rep.test.x).unwrap();
        let expected = evaluate(&pred, &cp.model.likelihood, &rep.test.y).unwrap();
        let rec = &report.records[0];
        assert_eq!(rec.log_lik, expected.log_lik);
        assert_eq!(rec.coverage, expected.coverage);
    }

    #[test]
    fn checkpoint_predicts_in_original_units() {
        let cfg = ExperimentConfig::from_toml(CONFIG).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        run_experiment(&cfg, tmp.path(), 1).unwrap();
        let cp = Checkpoint::load(&tmp.path().join("runs/sgpr-b10-g0-s0/checkpoint.json")).unwrap();
        let rep = &prepare_data(&cfg).unwrap()[0];
        let st = &cp.standardization;
        let raw = st.restore_x(&rep.test.x);
        let a = cp.predict(&raw).unwrap();
        let b = cp.model.predict(&rep.test.x).unwrap();
        for i in 0..a.len() {
            assert!((a.mean[i] - (b.mean[i] * st.y_scale + st.y_mean)).abs() < 1e-9);
            assert!((a.variance[i] - b.variance[i] * st.y_scale * st.y_scale).abs() < 1e-9);
        }
        assert!(cp.predict(&DMatrix::zeros(2, 3)).is_err());
    }
}
