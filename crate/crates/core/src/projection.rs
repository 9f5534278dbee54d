//! Exact t-SNE for 2-D views of images and layer features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub exaggeration: f64,
    /// Iterations run with exaggerated P and the initial momentum.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            seed: 0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
        }
    }
}

impl TsneParams {
    /// Lowers the perplexity, if needed, to the largest valid value for `n` points.
    pub fn fit_to(mut self, n: usize) -> Self {
        let limit = (n as f64 - 1.0) / 3.0;
        if self.perplexity >= n as f64 / 3.0 {
            self.perplexity = limit.max(1.0);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub points: Vec<[f64; 2]>,
    pub ids: Vec<String>,
    /// KL(P || Q) after every iteration, measured with the unexaggerated P.
    pub kl_history: Vec<f64>,
}

/// One scatter point of the exported embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u16>,
}

impl Embedding2D {
    /// Points in `[{id, x, y, label}]` form; `label` looks up a class per id.
    pub fn export(&self, label: impl Fn(&str) -> Option<u16>) -> Vec<EmbeddingPoint> {
        self.ids
            .iter()
            .zip(&self.points)
            .map(|(id, p)| EmbeddingPoint {
                id: id.clone(),
                x: p[0],
                y: p[1],
                label: label(id),
            })
            .collect()
    }
}

pub fn squared_distances(vectors: &[Vec<f32>]) -> Vec<f64> {
    let n = vectors.len();
    let mut d = vec![0.0f64; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                *v = vectors[i]
                    .iter()
                    .zip(&vectors[j])
                    .map(|(&a, &b)| {
                        let t = f64::from(a) - f64::from(b);
                        t * t
                    })
                    .sum();
            }
        }
    });
    d
}

const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 50;

/// Row-stochastic conditional probabilities `p(j | i)` whose per-row
/// perplexity matches `perplexity`.
pub fn conditional_probabilities(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0f64; n * n];
    p.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let dist = &d2[i * n..(i + 1) * n];
        let min = (0..n)
            .filter(|&j| j != i)
            .map(|j| dist[j])
            .fold(f64::INFINITY, f64::min);
        let mean = (0..n).filter(|&j| j != i).map(|j| dist[j] - min).sum::<f64>()
            / (n - 1) as f64;
        // start near the data scale so the bisection budget covers any input
        let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        for _ in 0..MAX_BISECTIONS {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    row[j] = 0.0;
                    continue;
                }
                let shifted = dist[j] - min;
                let v = (-beta * shifted).exp();
                row[j] = v;
                sum += v;
                weighted += v * shifted;
            }
            let entropy = sum.ln() + beta * weighted / sum;
            let diff = entropy - target;
            if diff.abs() < ENTROPY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_infinite() { beta * 2.0 } else { (beta + hi) / 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    });
    p
}

/// Symmetrized joint probabilities `(p(j|i) + p(i|j)) / 2N`.
pub fn joint_probabilities(cond: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    p
}

fn student_t(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

/// Low-dimensional affinities `q_ij`.
pub fn low_dim_affinities(y: &[[f64; 2]]) -> Vec<f64> {
    let (num, sum) = student_t(y);
    num.iter().map(|v| v / sum).collect()
}

pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let q = low_dim_affinities(y);
    p.iter()
        .zip(&q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Gradient of `KL(P || Q)` with respect to the embedding.
pub fn kl_gradient(p: &[f64], y: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = y.len();
    let (num, sum) = student_t(y);
    (0..n)
        .map(|i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coef = 4.0 * (p[i * n + j] - w / sum) * w;
                g[0] += coef * (y[i][0] - y[j][0]);
                g[1] += coef * (y[i][1] - y[j][1]);
            }
            g
        })
        .collect()
}

/// Embeds `vectors` in 2-D. `ids` label the rows in the result.
pub fn tsne(vectors: &[Vec<f32>], ids: &[String], params: &TsneParams) -> Result<Embedding2D> {
    let n = vectors.len();
    if n < 4 {
        return Err(FlimError::TooFewPoints { needed: 4, got: n });
    }
    if ids.len() != n {
        return Err(FlimError::LengthMismatch {
            left: ids.len(),
            right: n,
        });
    }
    if !(params.perplexity > 0.0) || params.perplexity * 3.0 >= n as f64 {
        return Err(FlimError::BadPerplexity {
            perplexity: params.perplexity,
            points: n,
        });
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(FlimError::DimMismatch("ragged input vectors".into()));
    }

    let d2 = squared_distances(vectors);
    let p = joint_probabilities(&conditional_probabilities(&d2, n, params.perplexity), n);
    let p_exag: Vec<f64> = p.iter().map(|v| v * params.exaggeration).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_history = Vec::with_capacity(params.iterations);

    for it in 0..params.iterations {
        let early = it < params.exaggeration_iters;
        let grad = kl_gradient(if early { &p_exag } else { &p }, &y);
        let momentum = if early {
            params.initial_momentum
        } else {
            params.final_momentum
        };
        for i in 0..n {
            for d in 0..2 {
                let g = grad[i][d];
                gains[i][d] = if (g > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                update[i][d] = momentum * update[i][d] - params.learning_rate * gains[i][d] * g;
                y[i][d] += update[i][d];
            }
        }
        let mean = y
            .iter()
            .fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        for v in &mut y {
            v[0] -= mean[0] / n as f64;
            v[1] -= mean[1] / n as f64;
        }
        kl_history.push(kl_divergence(&p, &y));
    }
    if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(FlimError::Config("t-SNE produced non-finite coordinates".into()));
    }
    Ok(Embedding2D {
        points: y,
        ids: ids.to_vec(),
        kl_history,
    })
}
