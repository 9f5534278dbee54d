//! Linear SVM on the L2-regularized hinge loss with an unregularized bias.
//!
//! Solves the dual `min ½ aᵀQa − Σa` s.t. `yᵀa = 0`, `0 ≤ a ≤ C` by sequential
//! minimal optimization with second-order working-set selection, then
//! recovers `w = Σ a_i y_i x_i` and the bias from the KKT conditions.

use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c: f64,
    /// Stopping threshold on the maximal KKT violation.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 0.01,
            tol: 1e-4,
            max_iter: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvmModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub c: f64,
}

impl LinearSvmModel {
    pub fn decision(&self, x: &[f32]) -> f64 {
        self.w
            .iter()
            .zip(x)
            .map(|(w, &v)| w * f64::from(v))
            .sum::<f64>()
            + self.b
    }

    pub fn predict(&self, x: &[f32]) -> i8 {
        if self.decision(x) >= 0.0 {
            1
        } else {
            -1
        }
    }

    /// `½‖w‖² + C Σ max(0, 1 − y(w·x + b))`.
    pub fn primal_objective(&self, features: &[Vec<f32>], labels: &[i8]) -> f64 {
        let reg = 0.5 * self.w.iter().map(|v| v * v).sum::<f64>();
        let hinge: f64 = features
            .iter()
            .zip(labels)
            .map(|(x, &y)| (1.0 - f64::from(y) * self.decision(x)).max(0.0))
            .sum();
        reg + self.c * hinge
    }
}

/// Convergence trace of one SVM fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmTrace {
    /// Dual objective after every `n` working-set updates (one epoch).
    pub dual_objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Gram matrix, precomputed for small problems and computed row by row otherwise.
enum Gram<'a> {
    Dense { n: usize, values: Vec<f64> },
    Lazy { x: &'a [Vec<f32>] },
}

const DENSE_GRAM_LIMIT: usize = 4096;

impl<'a> Gram<'a> {
    fn new(x: &'a [Vec<f32>]) -> Self {
        use rayon::prelude::*;
        let n = x.len();
        if n > DENSE_GRAM_LIMIT {
            return Gram::Lazy { x };
        }
        let values: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                if j < i {
                    0.0
                } else {
                    dot(&x[i], &x[j])
                }
            })
            .collect();
        let mut values = values;
        for i in 0..n {
            for j in 0..i {
                values[i * n + j] = values[j * n + i];
            }
        }
        Gram::Dense { n, values }
    }

    fn row(&self, i: usize) -> std::borrow::Cow<'_, [f64]> {
        match self {
            Gram::Dense { n, values } => std::borrow::Cow::Borrowed(&values[i * n..(i + 1) * n]),
            Gram::Lazy { x } => std::borrow::Cow::Owned(x.iter().map(|v| dot(&x[i], v)).collect()),
        }
    }

    fn diag(&self, i: usize) -> f64 {
        match self {
            Gram::Dense { n, values } => values[i * n + i],
            Gram::Lazy { x } => dot(&x[i], &x[i]),
        }
    }
}

fn check_inputs(features: &[Vec<f32>], labels: &[i8]) -> Result<usize> {
    if features.len() != labels.len() {
        return Err(FlimError::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    let dim = features.first().map(Vec::len).unwrap_or(0);
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(FlimError::DimMismatch(format!(
            "feature vectors of length {dim} and {}",
            bad.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 1 && y != -1) {
        return Err(FlimError::Config(format!("SVM labels must be +1/-1, got {bad}")));
    }
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(FlimError::SingleClass);
    }
    Ok(dim)
}

pub fn train_svm(features: &[Vec<f32>], labels: &[i8], config: &SvmConfig) -> Result<LinearSvmModel> {
    train_svm_traced(features, labels, config).map(|(m, _)| m)
}

pub fn train_svm_traced(
    features: &[Vec<f32>],
    labels: &[i8],
    config: &SvmConfig,
) -> Result<(LinearSvmModel, SvmTrace)> {
    let dim = check_inputs(features, labels)?;
    if !(config.c > 0.0) {
        return Err(FlimError::Config(format!("C must be positive, got {}", config.c)));
    }
    let n = features.len();
    let c = config.c;
    let y: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    let gram = Gram::new(features);
    let qd: Vec<f64> = (0..n).map(|i| gram.diag(i)).collect();
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let tau = 1e-12;
    let dual = |alpha: &[f64], grad: &[f64]| -> f64 {
        0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>()
    };
    let mut trace = SvmTrace {
        dual_objective: vec![0.0],
        iterations: 0,
        converged: false,
    };
    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    while trace.iterations < config.max_iter {
        // working-set selection (second order)
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            if in_up(alpha[t], y[t]) && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i_sel = t;
            }
        }
        if i_sel == usize::MAX {
            trace.converged = true;
            break;
        }
        let row_i = gram.row(i_sel);
        let mut gmin = f64::INFINITY;
        let mut j_sel = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !in_low(alpha[t], y[t]) {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            let b = gmax - v;
            if b > 0.0 {
                let mut a = qd[i_sel] + qd[t] - 2.0 * row_i[t];
                if a <= 0.0 {
                    a = tau;
                }
                let score = -(b * b) / a;
                if score < best {
                    best = score;
                    j_sel = t;
                }
            }
        }
        if gmax - gmin < config.tol || j_sel == usize::MAX {
            trace.converged = true;
            break;
        }
        let (i, j) = (i_sel, j_sel);
        let row_j = gram.row(j);
        let q_ij = y[i] * y[j] * row_i[j];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let mut quad = qd[i] + qd[j] + 2.0 * q_ij;
            if quad <= 0.0 {
                quad = tau;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = qd[i] + qd[j] - 2.0 * q_ij;
            if quad <= 0.0 {
                quad = tau;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * row_i[t] * di + y[j] * row_j[t] * dj);
        }
        trace.iterations += 1;
        if trace.iterations.is_multiple_of(n) {
            trace.dual_objective.push(dual(&alpha, &grad));
        }
    }
    trace.dual_objective.push(dual(&alpha, &grad));

    // bias from the KKT conditions
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0f64);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 {
        sum_free / free as f64
    } else {
        (ub + lb) / 2.0
    };
    let mut w = vec![0.0f64; dim];
    for (t, x) in features.iter().enumerate() {
        let coef = alpha[t] * y[t];
        if coef != 0.0 {
            for (wk, &v) in w.iter_mut().zip(x) {
                *wk += coef * f64::from(v);
            }
        }
    }
    Ok((LinearSvmModel { w, b: -rho, c }, trace))
}

/// One-vs-rest wrapper over [`LinearSvmModel`]. Two classes use a single
/// model whose positive side is `classes[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmClassifier {
    pub classes: Vec<u16>,
    pub models: Vec<LinearSvmModel>,
}

impl SvmClassifier {
    pub fn train(features: &[Vec<f32>], labels: &[u16], config: &SvmConfig) -> Result<Self> {
        let mut classes: Vec<u16> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(FlimError::SingleClass);
        }
        let positives: Vec<u16> = if classes.len() == 2 {
            vec![classes[0]]
        } else {
            classes.clone()
        };
        let models = positives
            .iter()
            .map(|&p| {
                let y: Vec<i8> = labels.iter().map(|&l| if l == p { 1 } else { -1 }).collect();
                train_svm(features, &y, config)
            })
            .collect::<Result<_>>()?;
        Ok(SvmClassifier { classes, models })
    }

    pub fn predict(&self, x: &[f32]) -> u16 {
        if self.models.len() == 1 {
            if self.models[0].decision(x) >= 0.0 {
                self.classes[0]
            } else {
                self.classes[1]
            }
        } else {
            let best = self
                .models
                .iter()
                .map(|m| m.decision(x))
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            self.classes[best]
        }
    }

    pub fn dim(&self) -> usize {
        self.models.first().map(|m| m.w.len()).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_pair() {
        let x = vec![vec![-1.0f32], vec![1.0]];
        let y = [-1i8, 1];
        let m = train_svm(&x, &y, &SvmConfig { c: 100.0, ..Default::default() }).unwrap();
        assert_eq!(m.predict(&x[0]), -1);
        assert_eq!(m.predict(&x[1]), 1);
        // hard-margin solution w = 1, b = 0
        assert!((m.w[0] - 1.0).abs() < 1e-6 && m.b.abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let x = vec![vec![1.0f32], vec![2.0]];
        assert!(matches!(
            train_svm(&x, &[1, 1], &SvmConfig::default()),
            Err(FlimError::SingleClass)
        ));
        let ragged = vec![vec![1.0f32], vec![2.0, 3.0]];
        assert!(matches!(
            train_svm(&ragged, &[1, -1], &SvmConfig::default()),
            Err(FlimError::DimMismatch(_))
        ));
    }

    #[test]
    fn dual_objective_never_increases() {
        let x: Vec<Vec<f32>> = (0..40)
            .map(|i| vec![((i * 7) % 13) as f32 / 3.0 - 2.0, ((i * 5) % 11) as f32 / 4.0 - 1.0])
            .collect();
        let y: Vec<i8> = (0..40).map(|i| if (i * 7) % 13 > 6 { 1 } else { -1 }).collect();
        let (_, trace) = train_svm_traced(&x, &y, &SvmConfig { c: 1.0, ..Default::default() })
            .unwrap();
        for w in trace.dual_objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(trace.converged);
    }

    #[test]
    fn multiclass_one_vs_rest() {
        let x = vec![
            vec![0.0f32, 0.0],
            vec![0.1, 0.0],
            vec![5.0, 0.0],
            vec![5.1, 0.1],
            vec![0.0, 5.0],
            vec![0.1, 5.1],
        ];
        let labels = [1u16, 1, 2, 2, 3, 3];
        let clf = SvmClassifier::train(&x, &labels, &SvmConfig { c: 10.0, ..Default::default() })
            .unwrap();
        assert_eq!(clf.models.len(), 3);
        for (xi, &l) in x.iter().zip(&labels) {
            assert_eq!(clf.predict(xi), l);
        }
    }
}
