use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::derive_seed;
use super::loss::sum_vars;
use crate::blocknet::BlockNet;
use crate::error::{Error, Result};
use crate::synthdata::Dataset;
use crate::tensor::{cosine_lr, Sgd, Tape};

/// Plain supervised training, used to build source networks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Joint L2 limit on the gradients of one step; 0 disables clipping.
    pub grad_clip: f64,
    /// Decay the learning rate along a cosine to zero over the run.
    pub anneal: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            grad_clip: 1.0,
            anneal: true,
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip must be non-negative, got {}", self.grad_clip)));
        }
        Ok(())
    }
}

/// Minimizes the summed cross-entropy of every head on its labels.
/// Returns the mean loss of each epoch.
pub fn train_supervised(net: &mut BlockNet, data: &Dataset, config: &TrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    net.check_input(data.images.shape())?;
    let labels = net
        .spec()
        .heads
        .iter()
        .map(|h| {
            data.labels_for(&h.task_id)
                .ok_or_else(|| Error::Coverage(format!("training data has no labels for task {:?}", h.task_id)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut opt = Sgd::new(config.lr, config.momentum)?;
    if config.grad_clip > 0.0 {
        opt = opt.with_clip(config.grad_clip)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "supervised"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let total_steps = config.epochs * data.len().div_ceil(config.batch_size);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0);
        for rows in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let vars = net.bind(&tape, true);
            let out = net.forward_vars(&vars, tape.constant(&data.batch(rows)?))?;
            let terms = out
                .logits
                .iter()
                .zip(&labels)
                .map(|(logits, y)| {
                    let y: Vec<usize> = rows.iter().map(|&r| y[r]).collect();
                    logits.cross_entropy(&y)
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = sum_vars(terms)?.ok_or_else(|| Error::Spec("network has no heads".into()))?;
            total += loss.item();
            steps += 1;
            let grads = tape.backward(loss)?;
            net.params_mut().absorb(&grads, &vars);
            if config.anneal {
                opt.set_lr(cosine_lr(config.lr, step, total_steps))?;
            }
            step += 1;
            opt.step(&mut net.params_mut().tensors_mut().collect::<Vec<_>>())?;
        }
        epoch_losses.push(total / steps.max(1) as f64);
    }
    Ok(epoch_losses)
}
