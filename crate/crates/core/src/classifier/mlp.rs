//! Fully connected ReLU network trained by mini-batch SGD on softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2 penalty added to every parameter's gradient.
    pub weight_decay: f64,
    /// Multiplier applied at each decay step.
    pub lr_decay: f64,
    /// Epoch after which decay steps start.
    pub decay_start: usize,
    /// Epochs between decay steps.
    pub decay_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            lr_decay: 0.1,
            decay_start: 30,
            decay_every: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate used during 1-based epoch `epoch`: decays by `lr_decay`
    /// at epochs `decay_start + decay_every`, `decay_start + 2 * decay_every`, ...
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = if epoch > self.decay_start && self.decay_every > 0 {
            (epoch - self.decay_start) / self.decay_every
        } else {
            0
        };
        self.learning_rate * self.lr_decay.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.decay_every == 0
            || !(self.learning_rate >= 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
        {
            return Err(FlimError::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// Hidden sizes of the default classifier head.
pub const DEFAULT_HIDDEN: [usize; 2] = [4096, 4096];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// Input, hidden and output widths.
    pub sizes: Vec<usize>,
    /// Per layer, `out x in` row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Class label of each output unit.
    pub classes: Vec<u16>,
}

/// Gradients with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }
}

impl MlpModel {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn new(sizes: Vec<usize>, classes: Vec<u16>, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(FlimError::Config(format!("invalid layer sizes {sizes:?}")));
        }
        if *sizes.last().unwrap() != classes.len() {
            return Err(FlimError::Config(format!(
                "output width {} does not match {} classes",
                sizes.last().unwrap(),
                classes.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let bound = (6.0 / w[0] as f64).sqrt();
            weights.push((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect());
            biases.push(vec![0.0; w[1]]);
        }
        Ok(MlpModel {
            sizes,
            weights,
            biases,
            classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    /// Activations of every layer; the first entry is the input, the last the logits.
    pub fn activations(&self, x: &[f32]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>());
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = acts.last().unwrap();
            let n_in = input.len();
            let out: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, &bias)| {
                    let z = bias
                        + w[o * n_in..(o + 1) * n_in]
                            .iter()
                            .zip(input)
                            .map(|(a, c)| a * c)
                            .sum::<f64>();
                    if l < last {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        self.activations(x).pop().unwrap()
    }

    /// Output of the last hidden layer (the input itself for a net without hidden layers).
    pub fn last_hidden(&self, x: &[f32]) -> Vec<f64> {
        let mut acts = self.activations(x);
        acts.pop();
        acts.pop().unwrap()
    }

    pub fn predict(&self, x: &[f32]) -> u16 {
        let logits = self.logits(x);
        let best = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.classes[best]
    }

    /// Mean cross-entropy over the batch and its gradient (no weight decay).
    pub fn loss_and_grad(&self, xs: &[&[f32]], targets: &[usize]) -> (f64, Gradients) {
        let mut grads = Gradients {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        let mut loss = 0.0;
        let scale = 1.0 / xs.len() as f64;
        for (x, &target) in xs.iter().zip(targets) {
            let acts = self.activations(x);
            let logits = acts.last().unwrap();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let log_sum = max + sum.ln();
            loss += log_sum - logits[target];
            let mut delta: Vec<f64> = logits.iter().map(|z| (z - log_sum).exp()).collect();
            delta[target] -= 1.0;
            for l in (0..self.weights.len()).rev() {
                let input = &acts[l];
                let n_in = input.len();
                for (o, &d) in delta.iter().enumerate() {
                    let g = d * scale;
                    grads.biases[l][o] += g;
                    for (gw, &a) in grads.weights[l][o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                        *gw += g * a;
                    }
                }
                if l > 0 {
                    let w = &self.weights[l];
                    let mut prev = vec![0.0; n_in];
                    for (o, &d) in delta.iter().enumerate() {
                        for (p, &wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *p += d * wv;
                        }
                    }
                    for (p, &a) in prev.iter_mut().zip(input) {
                        if a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        (loss * scale, grads)
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, params: &[f64]) {
        let mut it = params.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = it.next().expect("parameter vector too short");
            }
        }
    }

    fn sgd_step(&mut self, grads: &Gradients, lr: f64, weight_decay: f64) {
        for (params, g) in self
            .weights
            .iter_mut()
            .zip(&grads.weights)
            .chain(self.biases.iter_mut().zip(&grads.biases))
        {
            for (p, &gv) in params.iter_mut().zip(g) {
                *p -= lr * (gv + weight_decay * *p);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|v| v.is_finite())
    }
}

/// Trains an MLP with the given hidden widths. Returns the model and the mean
/// training loss of every epoch.
pub fn train_mlp(
    features: &[Vec<f32>],
    labels: &[u16],
    hidden: &[usize],
    config: &TrainConfig,
) -> Result<(MlpModel, Vec<f64>)> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(FlimError::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    let dim = features.first().map(Vec::len).unwrap_or(0);
    if features.iter().any(|f| f.len() != dim) {
        return Err(FlimError::DimMismatch("ragged feature vectors".into()));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(FlimError::SingleClass);
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    let mut sizes = vec![dim];
    sizes.extend_from_slice(hidden);
    sizes.push(classes.len());
    let mut model = MlpModel::new(sizes, classes, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_5EED);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<&[f32]> = batch.iter().map(|&i| features[i].as_slice()).collect();
            let ts: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = model.loss_and_grad(&xs, &ts);
            if !loss.is_finite() {
                return Err(FlimError::Divergence { epoch });
            }
            total += loss * batch.len() as f64;
            model.sgd_step(&grads, lr, config.weight_decay);
        }
        if !model.is_finite() {
            return Err(FlimError::Divergence { epoch });
        }
        history.push(total / features.len() as f64);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.epochs, c.batch_size, c.learning_rate, c.weight_decay, c.lr_decay, c.decay_start, c.decay_every),
            (40, 64, 1e-4, 1e-3, 0.1, 30, 5)
        );
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1), 1e-4);
        assert_eq!(c.lr_at(34), 1e-4);
        assert!((c.lr_at(35) - 1e-5).abs() < 1e-18);
        assert!((c.lr_at(40) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn zero_learning_rate_is_a_null_step() {
        let x = vec![vec![0.0f32, 1.0], vec![1.0, 0.0]];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..Default::default()
        };
        let (model, _) = train_mlp(&x, &[1, 2], &[3], &cfg).unwrap();
        let fresh = MlpModel::new(vec![2, 3, 2], vec![1, 2], cfg.seed).unwrap();
        assert_eq!(model, fresh);
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![0.0f32], vec![1.0]];
        assert!(matches!(
            train_mlp(&x, &[2, 2], &[2], &TrainConfig::default()),
            Err(FlimError::SingleClass)
        ));
    }

    #[test]
    fn divergence_detected() {
        let x = vec![vec![1e30f32, -1e30], vec![-1e30, 1e30]];
        let cfg = TrainConfig {
            learning_rate: 1e10,
            epochs: 5,
            ..Default::default()
        };
        assert!(matches!(
            train_mlp(&x, &[1, 2], &[4], &cfg),
            Err(FlimError::Divergence { .. })
        ));
    }
}
