use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::mlp::{softmax_columns, MlpNetwork};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Mini-batch SGD with step decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied every `decay_interval` epochs.
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Seeds the mini-batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            decay_factor: 0.1,
            decay_interval: 20,
            epochs: 50,
            batch_size: 64,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.decay_factor.is_finite()
            && self.decay_factor > 0.0
            && self.decay_interval > 0
            && self.batch_size > 0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid training configuration {self:?}"
            )))
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub network: MlpNetwork,
    /// Mean cross-entropy over each epoch (before the weight-decay term).
    pub epoch_losses: Vec<f64>,
}

/// Mean cross-entropy of `logits` against `labels` and its gradient w.r.t.
/// the logits (already divided by the batch size).
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> (f64, DenseMatrix) {
    let n = labels.len() as f64;
    let mut grad = softmax_columns(logits, 1.0);
    let mut loss = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let col = logits.column(j);
        let max = col.max();
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - col[y];
        grad[(y, j)] -= 1.0;
    }
    grad /= n;
    (loss / n, grad)
}

pub fn train(mut network: MlpNetwork, data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.input_dim() != network.input_dim() || data.classes() != network.num_classes() {
        return Err(Error::dim(format!(
            "dataset ({} inputs, {} classes) does not fit network {:?}",
            data.input_dim(),
            data.classes(),
            network.dims()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let inputs = data.inputs().select_columns(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let pass = network.forward(&inputs)?;
            let (loss, d_logits) = cross_entropy(pass.logits(), &labels);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            let grads = network.backward(&pass, &d_logits);
            for (w, dw) in network.weights_mut().iter_mut().zip(&grads.weights) {
                *w *= 1.0 - lr * config.weight_decay;
                w.zip_apply(dw, |v, d| *v -= lr * d);
            }
            for (b, db) in network.biases_mut().iter_mut().zip(&grads.biases) {
                b.axpy(-lr, db, 1.0);
            }
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite()
            || network
                .weights()
                .iter()
                .any(|w| w.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        network,
        epoch_losses,
    })
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy(network: &MlpNetwork, data: &Dataset) -> Result<f64> {
    let pass = network.forward(data.inputs())?;
    let logits = pass.logits();
    let correct = data
        .labels()
        .iter()
        .enumerate()
        .filter(|(j, &y)| logits.column(*j).argmax().0 == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
