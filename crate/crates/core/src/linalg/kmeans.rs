use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 100;
const REL_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centers: DMatrix<f64>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

/// Lloyd's algorithm from `k` distinct random rows of `x`.
pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64) -> Result<KMeans> {
    let (n, d) = (x.nrows(), x.ncols());
    if n == 0 {
        return Err(Error::InvalidInput("k-means on an empty set".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k-means needs 1 <= k <= N, got k = {k}, N = {n}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let init = rand::seq::index::sample(&mut rng, n, k);
    let mut centers = DMatrix::from_fn(k, d, |c, j| x[(init.index(c), j)]);
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut trace = Vec::new();

    for _ in 0..MAX_ITERATIONS {
        let inertia = assign_points(x, &centers, &mut assign, &mut dist);
        let prev = trace.last().copied();
        trace.push(inertia);
        if let Some(p) = prev {
            if (p - inertia).abs() <= REL_TOL * p.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        if inertia == 0.0 {
            break;
        }
        let mut sums = DMatrix::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for j in 0..d {
                sums[(assign[i], j)] += x[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed at the point farthest from its own center
                let far = (0..n).max_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap_or(0);
                for j in 0..d {
                    centers[(c, j)] = x[(far, j)];
                }
                dist[far] = 0.0;
            } else {
                for j in 0..d {
                    centers[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
    }
    Ok(KMeans { centers, inertia: trace })
}

fn assign_points(x: &DMatrix<f64>, centers: &DMatrix<f64>, assign: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..x.nrows() {
        let mut best = (0, f64::INFINITY);
        for c in 0..centers.nrows() {
            let mut s = 0.0;
            for j in 0..x.ncols() {
                let t = x[(i, j)] - centers[(c, j)];
                s += t * t;
                if s >= best.1 {
                    break;
                }
            }
            if s < best.1 {
                best = (c, s);
            }
        }
        assign[i] = best.0;
        dist[i] = best.1;
        total += best.1;
    }
    total
}
