//! Datasets: synthetic GP draws, CSV input and output, standardization and
//! seeded splits.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{InputDomain, KernelSpec, Part, Structure};
use crate::linalg::chol_psd;

/// Fractional expansion of the data range used for Fourier intervals.
pub const DOMAIN_EXPANSION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Origin of the data: a synthetic seed and sampler, or a file path.
    pub provenance: String,
    /// Rows dropped for missing values when loading.
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, provenance: impl Into<String>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        let feature_names = (0..x.ncols()).map(|d| format!("x{d}")).collect();
        Ok(Dataset {
            x,
            y,
            feature_names,
            target_name: "y".into(),
            provenance: provenance.into(),
            dropped_rows: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Errors unless every target is `±1`.
    pub fn check_binary_labels(&self) -> Result<()> {
        match self.y.iter().find(|&&v| v != 1.0 && v != -1.0) {
            Some(&v) => Err(Error::InvalidLabel(v)),
            None => Ok(()),
        }
    }

    /// Fourier intervals from the input range, expanded by 10% per side.
    pub fn domain(&self) -> Result<InputDomain> {
        let domain = InputDomain::from_data(&self.x, DOMAIN_EXPANSION)?;
        debug_assert_eq!(domain.count_outside(&self.x), 0);
        Ok(domain)
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: DMatrix::from_fn(rows.len(), self.dim(), |r, c| self.x[(rows[r], c)]),
            y: DVector::from_fn(rows.len(), |r, _| self.y[rows[r]]),
            ..self.clone()
        }
    }
}

/// Per-column affine maps fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

fn mean_scale<'a>(values: impl Iterator<Item = &'a f64> + Clone, n: usize, what: &str) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var > 0.0 {
        (mean, var.sqrt())
    } else {
        log::warn!("{what} has zero variance; using scale 1");
        (mean, 1.0)
    }
}

impl Standardization {
    /// Fits means and population standard deviations. Targets are left alone
    /// when `targets` is false (classification labels).
    pub fn fit(data: &Dataset, targets: bool) -> Self {
        let n = data.len();
        let (x_mean, x_scale) = (0..data.dim())
            .map(|d| mean_scale(data.x.column(d).iter(), n, &format!("column {}", data.feature_names[d])))
            .unzip();
        let (y_mean, y_scale) = if targets {
            mean_scale(data.y.iter(), n, "target")
        } else {
            (0.0, 1.0)
        };
        Standardization {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Standardization {
            x_mean: vec![0.0; dim],
            x_scale: vec![1.0; dim],
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim() != self.x_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.x_mean.len(),
                got: data.dim(),
            });
        }
        let mut out = data.clone();
        for d in 0..data.dim() {
            out.x.column_mut(d).apply(|v| *v = (*v - self.x_mean[d]) / self.x_scale[d]);
        }
        out.y.apply(|v| *v = (*v - self.y_mean) / self.y_scale);
        Ok(out)
    }

    pub fn restore_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[(r, c)] * self.x_scale[c] + self.x_mean[c])
    }

    pub fn restore_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.y_scale + self.y_mean)
    }
}

/// Standardizes both sets with training statistics.
pub fn standardize(train: &Dataset, test: &Dataset, targets: bool) -> Result<(Dataset, Dataset, Standardization)> {
    let record = Standardization::fit(train, targets);
    Ok((record.apply(train)?, record.apply(test)?, record))
}

/// Seeded disjoint split with `round(test_fraction · N)` test rows.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidInput(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let n = data.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::Data(format!("split of {n} rows leaves an empty side")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let perm = rand::seq::index::sample(&mut rng, n, n).into_vec();
    Ok((data.select(&perm[n_test..]), data.select(&perm[..n_test])))
}

/// Synthetic regression data drawn from a zero-mean GP plus Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    #[serde(default)]
    pub n_test: usize,
    pub kernel: KernelSpec,
    pub noise_variance: f64,
    /// Interval of the first input dimension left without training data.
    #[serde(default)]
    pub gap: Option<[f64; 2]>,
    /// Largest total size drawn with a dense Cholesky factor.
    #[serde(default = "default_exact_cap")]
    pub exact_cap: usize,
    /// Random features per dimension for the approximate sampler.
    #[serde(default = "default_rff_features")]
    pub rff_features: usize,
}

fn default_exact_cap() -> usize {
    20_000
}

fn default_rff_features() -> usize {
    500
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.n_train == 0 {
            return Err(Error::config("n_train", "must be at least 1"));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::config("noise_variance", "must be finite and non-negative"));
        }
        if let Some([a, b]) = self.gap {
            if !(0.0 <= a && a < b && b <= 1.0) || b - a >= 1.0 {
                return Err(Error::config("gap", format!("[{a}, {b}] is not a proper sub-interval of [0, 1]")));
            }
        }
        if self.n_train + self.n_test > self.exact_cap && self.kernel.periodic.is_some() {
            return Err(Error::config("exact_cap", "the approximate sampler does not support periodic kernels"));
        }
        Ok(())
    }
}

/// Draws training and (optional) test sets from one GP sample path. Inputs
/// are uniform on `[0,1]^D`; training inputs avoid the gap.
pub fn sample_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    spec.validate()?;
    let d = spec.kernel.dim();
    let n = spec.n_train + spec.n_test;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
    if let Some([a, b]) = spec.gap {
        for i in 0..spec.n_train {
            let u = x[(i, 0)] * (1.0 - (b - a));
            x[(i, 0)] = if u < a { u } else { u + (b - a) };
        }
    }
    let (f, sampler) = if n <= spec.exact_cap {
        (sample_exact(&spec.kernel, &x, &mut rng)?, "exact".to_string())
    } else {
        (
            sample_rff(&spec.kernel, &x, spec.rff_features, &mut rng)?,
            format!("random-features(F={})", spec.rff_features),
        )
    };
    let sd = spec.noise_variance.sqrt();
    let y = DVector::from_fn(n, |i, _| f[i] + sd * rng.sample::<f64, _>(StandardNormal));
    let provenance = format!("synthetic(seed={seed}, sampler={sampler})");
    let train = Dataset::new(x.rows(0, spec.n_train).into_owned(), y.rows(0, spec.n_train).into_owned(), &provenance)?;
    let test = if spec.n_test > 0 {
        Some(Dataset::new(
            x.rows(spec.n_train, spec.n_test).into_owned(),
            y.rows(spec.n_train, spec.n_test).into_owned(),
            &provenance,
        )?)
    } else {
        None
    };
    Ok((train, test))
}

/// Exact latent draw at `x`; duplicated rows share one value.
pub fn sample_exact<R: Rng>(kernel: &KernelSpec, x: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let mut unique: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rows = Vec::new();
    let slot: Vec<usize> = (0..x.nrows())
        .map(|i| {
            let key: Vec<u64> = x.row(i).iter().map(|v| v.to_bits()).collect();
            *unique.entry(key).or_insert_with(|| {
                rows.push(i);
                rows.len() - 1
            })
        })
        .collect();
    let xu = DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)]);
    let l = chol_psd(&kernel.gram(&xu, Part::Full)?)?.l();
    let z = DVector::from_fn(rows.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let fu = l * z;
    Ok(DVector::from_fn(x.nrows(), |i, _| fu[slot[i]]))
}

/// Random-feature latent draw with fresh frequencies. Matérn spectral
/// densities are Student-t with `2ν` degrees of freedom.
pub fn sample_rff<R: Rng>(kernel: &KernelSpec, x: &DMatrix<f64>, features: usize, rng: &mut R) -> Result<DVector<f64>> {
    if kernel.periodic.is_some() {
        return Err(Error::InvalidKernel("random-feature sampling of periodic kernels".into()));
    }
    let d = kernel.dim();
    let mut f = DVector::zeros(x.nrows());
    // each component: (dims it acts on, frequency draws, variance)
    let mut components: Vec<(Vec<usize>, DMatrix<f64>, f64)> = Vec::new();
    let student = |nu: f64, scale: f64, rng: &mut R| -> Result<f64> {
        let chi = ChiSquared::new(2.0 * nu).map_err(|e| Error::InvalidKernel(e.to_string()))?;
        let u: f64 = chi.sample(rng);
        let g: f64 = rng.sample(StandardNormal);
        Ok(g / (scale * (u / (2.0 * nu)).sqrt()))
    };
    match kernel.structure {
        Structure::OneDim | Structure::Additive | Structure::HybridAdditive => {
            for dim in 0..d {
                let (fam, ell, var) = kernel.dim_component(dim);
                let mut w = DMatrix::zeros(features, 1);
                for j in 0..features {
                    w[(j, 0)] = student(fam.nu(), ell, rng)?;
                }
                components.push((vec![dim], w, var));
            }
        }
        Structure::Separable => {
            let count = features * d;
            let mut w = DMatrix::zeros(count, d);
            for j in 0..count {
                for dim in 0..d {
                    w[(j, dim)] = student(kernel.families[dim].nu(), kernel.lengthscales[dim], rng)?;
                }
            }
            components.push(((0..d).collect(), w, kernel.variance));
        }
        Structure::Ard => {
            let nu = kernel.families[0].nu();
            let chi = ChiSquared::new(2.0 * nu).map_err(|e| Error::InvalidKernel(e.to_string()))?;
            let count = features * d;
            let mut w = DMatrix::zeros(count, d);
            for j in 0..count {
                let u: f64 = chi.sample(rng);
                let s = (u / (2.0 * nu)).sqrt();
                for dim in 0..d {
                    let g: f64 = rng.sample(StandardNormal);
                    w[(j, dim)] = g / (kernel.lengthscales[dim] * s);
                }
            }
            components.push(((0..d).collect(), w, kernel.variance));
        }
    }
    for (dims, w, var) in components {
        let count = w.nrows();
        let amp = (var / count as f64).sqrt();
        for j in 0..count {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            for i in 0..x.nrows() {
                let phase: f64 = dims.iter().enumerate().map(|(k, &dim)| w[(j, k)] * x[(i, dim)]).sum();
                f[i] += amp * (a * phase.cos() + b * phase.sin());
            }
        }
    }
    Ok(f)
}

/// Column selection for [`load_csv`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub target: String,
    /// Feature columns; all non-target columns when absent.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl CsvSchema {
    pub fn new(target: impl Into<String>) -> Self {
        CsvSchema {
            target: target.into(),
            features: None,
            delimiter: ',',
        }
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim().to_ascii_lowercase().as_str(), "" | "na" | "nan" | "?" | "null")
}

/// Reads a headed CSV, dropping rows with missing values.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    if !schema.delimiter.is_ascii() {
        return Err(Error::config("delimiter", "must be a single ASCII character"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", path.display())))
    };
    let target = find(&schema.target)?;
    let features: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..header.len()).filter(|&i| i != target).collect(),
    };
    if features.is_empty() {
        return Err(Error::Data(format!("{}: no feature columns", path.display())));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut dropped = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let cols: Vec<usize> = features.iter().copied().chain([target]).collect();
        let cells: Vec<&str> = cols.iter().map(|&c| record.get(c).unwrap_or("")).collect();
        if cells.iter().any(|c| is_missing(c)) {
            dropped += 1;
            continue;
        }
        let parsed: Vec<f64> = cells
            .iter()
            .zip(&cols)
            .map(|(cell, &c)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Data(format!("{}: row {}, column `{}`: non-numeric `{cell}`", path.display(), line + 2, header[c])))
            })
            .collect::<Result<_>>()?;
        ys.push(parsed[features.len()]);
        xs.extend_from_slice(&parsed[..features.len()]);
    }
    if ys.is_empty() {
        return Err(Error::Data(format!("{}: no complete rows", path.display())));
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rows with missing values", path.display());
    }
    let x = DMatrix::from_row_slice(ys.len(), features.len(), &xs);
    let mut data = Dataset::new(x, DVector::from_vec(ys), path.display().to_string())?;
    data.feature_names = features.iter().map(|&i| header[i].clone()).collect();
    data.target_name = header[target].clone();
    data.dropped_rows = dropped;
    Ok(data)
}

/// Writes features then target with round-trip float formatting.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(data.feature_names.iter().chain([&data.target_name]))?;
    for i in 0..data.len() {
        let row: Vec<String> = data.x.row(i).iter().chain([&data.y[i]]).map(|v| format!("{v:e}")).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
