//! Test metrics, replication aggregation with ranks, and table output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::likelihoods::Likelihood;
use crate::model::PredictiveDistribution;

/// Half-width of the central 95% interval in standard deviations.
pub const Z95: f64 = 1.959963984540054;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean predictive log density.
    pub log_lik: f64,
    pub rmse: f64,
    /// Fraction of targets inside the central 95% observation interval;
    /// absent for classification.
    pub coverage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub dataset: String,
    pub n_beta: usize,
    pub n_gamma: usize,
    pub seed: u64,
    pub log_lik: f64,
    pub rmse: f64,
    pub coverage: Option<f64>,
    pub seconds: f64,
}

/// Scores a predictive distribution against held-out targets. For probit
/// models RMSE is measured on the predictive mean of `y ∈ {-1, 1}`.
pub fn evaluate(pred: &PredictiveDistribution, likelihood: &Likelihood, y: &DVector<f64>) -> Result<Metrics> {
    if pred.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            got: y.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::InvalidInput("no test points".into()));
    }
    let n = y.len() as f64;
    let mut log_lik = 0.0;
    let mut sq = 0.0;
    let mut inside = 0usize;
    let std_normal = Normal::standard();
    for i in 0..y.len() {
        let (m, s) = (pred.mean[i], pred.variance[i]);
        log_lik += likelihood.predictive_log_density(y[i], m, s)?;
        match likelihood {
            Likelihood::Gaussian { noise_variance } => {
                let sd = (s + noise_variance).sqrt();
                sq += (y[i] - m) * (y[i] - m);
                if (y[i] - m).abs() <= Z95 * sd {
                    inside += 1;
                }
            }
            Likelihood::Probit { .. } => {
                let mean_y = 2.0 * std_normal.cdf(m / (1.0 + s).sqrt()) - 1.0;
                sq += (y[i] - mean_y) * (y[i] - mean_y);
            }
        }
    }
    let coverage = match likelihood {
        Likelihood::Gaussian { .. } => Some(inside as f64 / n),
        Likelihood::Probit { .. } => None,
    };
    Ok(Metrics {
        log_lik: log_lik / n,
        rmse: (sq / n).sqrt(),
        coverage,
    })
}

/// Fractional ranks, 1 for the largest value; ties share the mean rank.
pub fn ranks_descending(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = shared;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub n_beta: usize,
    pub method: String,
    pub n_gamma: usize,
    pub runs: usize,
    pub log_lik_mean: f64,
    pub log_lik_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub coverage_mean: Option<f64>,
    /// Mean over seeds of the per-seed rank by log-likelihood.
    pub rank_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub rows: Vec<AggregateRow>,
    /// Mean rank of each method across all dataset and `|β|` columns.
    pub overall_rank: BTreeMap<String, f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Ranks methods within each `(dataset, |β|, seed)` and averages over seeds.
pub fn aggregate(records: &[MetricsRecord]) -> Result<AggregateTable> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to aggregate".into()));
    }
    let mut rank_of = vec![0.0; records.len()];
    let mut by_seed: BTreeMap<(&str, usize, u64), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_seed.entry((&r.dataset, r.n_beta, r.seed)).or_default().push(i);
    }
    for idx in by_seed.values() {
        let vals: Vec<f64> = idx.iter().map(|&i| records[i].log_lik).collect();
        for (&i, r) in idx.iter().zip(ranks_descending(&vals)) {
            rank_of[i] = r;
        }
    }
    let mut groups: BTreeMap<(&str, usize, &str, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry((&r.dataset, r.n_beta, &r.method, r.n_gamma)).or_default().push(i);
    }
    let mut table = AggregateTable::default();
    let mut method_ranks: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((dataset, n_beta, method, n_gamma), idx) in groups {
        let pick = |f: &dyn Fn(&MetricsRecord) -> f64| idx.iter().map(|&i| f(&records[i])).collect::<Vec<f64>>();
        let (ll_mean, ll_std) = mean_std(&pick(&|r| r.log_lik));
        let (rmse_mean, rmse_std) = mean_std(&pick(&|r| r.rmse));
        let coverage: Option<Vec<f64>> = idx.iter().map(|&i| records[i].coverage).collect();
        let rank_mean = mean_std(&idx.iter().map(|&i| rank_of[i]).collect::<Vec<_>>()).0;
        method_ranks.entry(method.to_string()).or_default().push(rank_mean);
        table.rows.push(AggregateRow {
            dataset: dataset.to_string(),
            n_beta,
            method: method.to_string(),
            n_gamma,
            runs: idx.len(),
            log_lik_mean: ll_mean,
            log_lik_std: ll_std,
            rmse_mean,
            rmse_std,
            coverage_mean: coverage.map(|c| mean_std(&c).0),
            rank_mean,
        });
    }
    table.overall_rank = method_ranks.into_iter().map(|(m, r)| (m, mean_std(&r).0)).collect();
    Ok(table)
}

fn opt(v: Option<f64>) -> String {
    v.map(|c| format!("{c}")).unwrap_or_default()
}

pub fn write_records_csv<W: Write>(records: &[MetricsRecord], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["method", "dataset", "n_beta", "n_gamma", "seed", "log_lik", "rmse", "coverage", "seconds"])?;
    for r in records {
        w.write_record([
            r.method.clone(),
            r.dataset.clone(),
            r.n_beta.to_string(),
            r.n_gamma.to_string(),
            r.seed.to_string(),
            r.log_lik.to_string(),
            r.rmse.to_string(),
            opt(r.coverage),
            r.seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_reader(r);
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_aggregate_csv<W: Write>(table: &AggregateTable, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned text: one block per dataset, methods as rows and `|β|` as
/// columns, cells `logL (rank)`.
pub fn render_text(table: &AggregateTable) -> String {
    let mut out = String::new();
    let mut datasets: Vec<&str> = table.rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.dedup();
    for dataset in datasets {
        let rows: Vec<&AggregateRow> = table.rows.iter().filter(|r| r.dataset == dataset).collect();
        let mut betas: Vec<usize> = rows.iter().map(|r| r.n_beta).collect();
        betas.sort_unstable();
        betas.dedup();
        let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
        methods.sort_unstable();
        methods.dedup();
        let header: Vec<String> = betas.iter().map(|b| format!("|β|={b}")).collect();
        let body: Vec<Vec<String>> = methods
            .iter()
            .map(|m| {
                betas
                    .iter()
                    .map(|b| {
                        rows.iter()
                            .find(|r| r.method == *m && r.n_beta == *b)
                            .map(|r| format!("{:.3} ({:.2})", r.log_lik_mean, r.rank_mean))
                            .unwrap_or_else(|| "-".into())
                    })
                    .collect()
            })
            .collect();
        let name_w = methods.iter().map(|m| m.len()).max().unwrap_or(0).max(6);
        let col_w: Vec<usize> = (0..betas.len())
            .map(|c| body.iter().map(|r| r[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0))
            .collect();
        let _ = writeln!(out, "{dataset}: mean test log-likelihood (mean rank)");
        let _ = write!(out, "{:name_w$}", "method");
        for (h, w) in header.iter().zip(&col_w) {
            let _ = write!(out, "  {h:>w$}");
        }
        out.push('\n');
        for (m, cells) in methods.iter().zip(&body) {
            let _ = write!(out, "{m:name_w$}");
            for (c, w) in cells.iter().zip(&col_w) {
                let _ = write!(out, "  {c:>w$}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    if !table.overall_rank.is_empty() {
        out.push_str("overall mean rank:");
        for (m, r) in &table.overall_rank {
            let _ = write!(out, " {m} {r:.2};");
        }
        out.pop();
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn pred(mean: Vec<f64>, variance: Vec<f64>, noise: f64) -> PredictiveDistribution {
        PredictiveDistribution {
            mean: DVector::from_vec(mean),
            variance: DVector::from_vec(variance),
            noise_variance: noise,
            clamped: 0,
            outside_domain: 0,
        }
    }

    fn record(method: &str, seed: u64, log_lik: f64) -> MetricsRecord {
        MetricsRecord {
            method: method.into(),
            dataset: "d".into(),
            n_beta: 10,
            n_gamma: 5,
            seed,
            log_lik,
            rmse: 1.0,
            coverage: Some(0.9),
            seconds: 0.0,
        }
    }

    #[test]
    fn perfect_prediction() {
        let lik = Likelihood::gaussian(0.25).unwrap();
        let y = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let m = evaluate(&pred(y.as_slice().to_vec(), vec![0.75; 3], 0.25), &lik, &y).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.coverage, Some(1.0));
        assert!((m.log_lik + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn calibrated_coverage() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 100_000;
        let mean: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let var: Vec<f64> = (0..n).map(|_| 0.1 + rng.random::<f64>()).collect();
        let y = DVector::from_fn(n, |i, _| mean[i] + (var[i] + 0.2).sqrt() * rng.sample::<f64, _>(StandardNormal));
        let m = evaluate(&pred(mean, var, 0.2), &Likelihood::gaussian(0.2).unwrap(), &y).unwrap();
        assert!((m.coverage.unwrap() - 0.95).abs() <= 0.003, "{:?}", m.coverage);
    }

    #[test]
    fn zero_predictor_on_standardized_targets() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let n = 20_000;
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = evaluate(&pred(vec![0.0; n], vec![0.0; n], 1.0), &Likelihood::gaussian(1.0).unwrap(), &y).unwrap();
        assert!((m.rmse - 1.0).abs() < 0.02);
    }

    #[test]
    fn inflated_variance_lowers_log_lik() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let n = 2000;
        let y = DVector::from_fn(n, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        let lik = Likelihood::gaussian(0.05).unwrap();
        let good = evaluate(&pred(vec![0.0; n], vec![0.2; n], 0.05), &lik, &y).unwrap();
        let wide = evaluate(&pred(vec![0.0; n], vec![20.0; n], 0.05), &lik, &y).unwrap();
        assert!(wide.log_lik < good.log_lik);
    }

    #[test]
    fn probit_metrics_have_no_coverage() {
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let m = evaluate(&pred(vec![3.0, -3.0], vec![0.0, 0.0], 0.0), &Likelihood::probit(), &y).unwrap();
        assert_eq!(m.coverage, None);
        assert!(m.rmse < 0.01 && m.log_lik > -0.01);
    }

    #[test]
    fn length_mismatch() {
        let y = DVector::from_vec(vec![1.0]);
        assert!(evaluate(&pred(vec![0.0, 0.0], vec![1.0, 1.0], 0.1), &Likelihood::gaussian(0.1).unwrap(), &y).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(ranks_descending(&[-1.0]), vec![1.0]);
        assert_eq!(ranks_descending(&[-1.0, -2.0]), vec![1.0, 2.0]);
        assert_eq!(ranks_descending(&[-1.0, -1.0]), vec![1.5, 1.5]);
        assert_eq!(ranks_descending(&[0.0, 2.0, 0.0, 1.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn aggregation_averages_ranks_over_seeds() {
        let records = vec![
            record("A", 0, -1.0),
            record("B", 0, -2.0),
            record("A", 1, -3.0),
            record("B", 1, -2.0),
            record("A", 2, -1.0),
            record("B", 2, -1.0),
        ];
        let t = aggregate(&records).unwrap();
        let a = t.rows.iter().find(|r| r.method == "A").unwrap();
        assert_eq!(a.runs, 3);
        assert!((a.rank_mean - 4.5 / 3.0).abs() < 1e-12);
        assert!((a.log_lik_mean + 5.0 / 3.0).abs() < 1e-12);
        assert!((t.overall_rank["B"] - 4.5 / 3.0).abs() < 1e-12);
        let text = render_text(&t);
        assert!(text.contains("|β|=10") && text.contains("overall mean rank"));
        assert!(aggregate(&[]).is_err());
        assert_eq!(aggregate(&[record("A", 0, -1.0)]).unwrap().rows[0].rank_mean, 1.0);
    }

    #[test]
    fn records_csv_round_trip() {
        let mut records = vec![record("A", 0, -1.25), record("B", 3, 0.5)];
        records[1].coverage = None;
        let mut buf = Vec::new();
        write_records_csv(&records, &mut buf).unwrap();
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), records);
    }

    proptest! {
        #[test]
        fn rank_sum_is_preserved(values in proptest::collection::vec(-3i32..3, 1..12)) {
            let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
            let r = ranks_descending(&v);
            let n = v.len() as f64;
            prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] { prop_assert!(r[i] < r[j]); }
                }
            }
        }

        #[test]
        fn metrics_ignore_ordering(seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let n = 50;
            let mean: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let var: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0).collect();
            let lik = Likelihood::gaussian(0.1).unwrap();
            let a = evaluate(&pred(mean.clone(), var.clone(), 0.1), &lik, &DVector::from_vec(y.clone())).unwrap();
            let rev = |v: &Vec<f64>| v.iter().rev().copied().collect::<Vec<_>>();
            let b = evaluate(&pred(rev(&mean), rev(&var), 0.1), &lik, &DVector::from_vec(rev(&y))).unwrap();
            prop_assert!((a.log_lik - b.log_lik).abs() < 1e-12);
            prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
            prop_assert_eq!(a.coverage, b.coverage);
        }
    }
}
