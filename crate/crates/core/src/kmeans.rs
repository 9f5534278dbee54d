//! Lloyd's K-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{FlimError, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Relative objective change below which iteration stops.
    pub tol: f64,
    /// Independent seedings; the lowest final objective wins.
    pub n_init: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            seed,
            max_iter: 300,
            tol: 1e-6,
            n_init: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// `k * dim` row-major centroids.
    pub centroids: Vec<f64>,
    pub dim: usize,
    /// Sum of squared distances to the assigned centroids.
    pub objective: f64,
    /// Objective after every assignment step of the winning run.
    pub history: Vec<f64>,
}

impl KMeansResult {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim.max(1)
    }
}

#[inline]
fn dist2(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(&x, &y)| {
            let d = f64::from(x) - y;
            d * d
        })
        .sum()
}

fn nearest(point: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = dist2(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Sum of squared distances of `points` to the given centroids under `assignments`.
pub fn objective(points: &[f32], dim: usize, centroids: &[f64], assignments: &[usize]) -> f64 {
    points
        .chunks_exact(dim)
        .zip(assignments)
        .map(|(p, &a)| dist2(p, &centroids[a * dim..(a + 1) * dim]))
        .sum()
}

fn plus_plus_init(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut chosen = Vec::with_capacity(k);
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    chosen.push(first);
    centroids.extend(points[first * dim..(first + 1) * dim].iter().map(|&v| f64::from(v)));
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| dist2(p, &centroids[..dim]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // rounding can run past the end; fall back to the last candidate
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            // every point coincides with a chosen center
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        let start = centroids.len();
        centroids.extend(points[next * dim..(next + 1) * dim].iter().map(|&v| f64::from(v)));
        let c = &centroids[start..];
        for (p, d) in points.chunks_exact(dim).zip(d2.iter_mut()) {
            *d = d.min(dist2(p, c));
        }
    }
    centroids
}

fn assign(points: &[f32], dim: usize, centroids: &[f64]) -> Vec<(usize, f64)> {
    points
        .par_chunks_exact(dim)
        .map(|p| nearest(p, centroids, dim))
        .collect()
}

fn lloyd(points: &[f32], dim: usize, params: &KMeansParams, seed: u64) -> KMeansResult {
    let n = points.len() / dim;
    let k = params.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, dim, k, &mut rng);
    let mut assigned = assign(points, dim, &centroids);
    let mut obj: f64 = assigned.iter().map(|a| a.1).sum();
    let mut history = vec![obj];

    for _ in 0..params.max_iter {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &(a, _)) in points.chunks_exact(dim).zip(&assigned) {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += f64::from(v);
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in centroids[j * dim..(j + 1) * dim]
                    .iter_mut()
                    .zip(&sums[j * dim..(j + 1) * dim])
                {
                    *c = s * inv;
                }
            } else {
                // reseed an empty cluster at the worst-served point
                let far = assigned
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken[far] = true;
                for (c, &v) in centroids[j * dim..(j + 1) * dim]
                    .iter_mut()
                    .zip(&points[far * dim..(far + 1) * dim])
                {
                    *c = f64::from(v);
                }
            }
        }
        let next = assign(points, dim, &centroids);
        let changed = next.iter().zip(&assigned).any(|(a, b)| a.0 != b.0);
        let next_obj: f64 = next.iter().map(|a| a.1).sum();
        assigned = next;
        let prev = obj;
        obj = next_obj;
        history.push(obj);
        if !changed || (prev - obj).abs() <= params.tol * prev.abs() {
            break;
        }
    }
    KMeansResult {
        assignments: assigned.into_iter().map(|a| a.0).collect(),
        centroids,
        dim,
        objective: obj,
        history,
    }
}

/// Clusters `points` (row-major, `dim` columns) into `params.k` groups.
pub fn kmeans(points: &[f32], dim: usize, params: &KMeansParams) -> Result<KMeansResult> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(FlimError::DimMismatch(format!(
            "{} values do not form rows of {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if params.k == 0 || params.k > n {
        return Err(FlimError::BadK(format!(
            "K = {} with {n} point(s); need 1 <= K <= N",
            params.k
        )));
    }
    let mut best: Option<KMeansResult> = None;
    for run in 0..params.n_init.max(1) {
        let result = lloyd(points, dim, params, derive_seed(params.seed, run as u64));
        if best.as_ref().is_none_or(|b| result.objective < b.objective) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one run"))
}
