//! SGD training for the built-in network: momentum, weight decay, and a
//! step learning-rate schedule. Training is bit-reproducible from
//! `TrainConfig::seed`: shuffling and initialization draw from fixed
//! substreams, and per-sample gradients are summed in sample order even
//! when computed in parallel.

use crate::classifier::smallnet::{loss_and_dlogits, ParamGrads, SmallNet};
use crate::classifier::{argmax, Classifier, LossSpec};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, SeededStream};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    /// Epochs (1-indexed) at whose start the learning rate is multiplied
    /// by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // the backbone recipe scaled down to desk size: momentum 0.9,
        // weight decay 1e-6, rate decayed by 0.1 at 50% and 75% of training
        TrainConfig {
            epochs: 30,
            momentum: 0.9,
            weight_decay: 1e-6,
            learning_rate: 0.05,
            lr_decay_epochs: vec![15, 22],
            lr_decay_factor: 0.1,
            batch_size: 32,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Trains `net` in place and returns the per-epoch trace.
pub fn fit(
    net: &mut SmallNet,
    images: &[ImageTensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let k = net.num_classes();
    let shape = net.input_shape();
    for (i, (x, &y)) in images.iter().zip(labels).enumerate() {
        if x.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: x.shape(),
            });
        }
        if y >= k {
            return Err(Error::InvalidInput(format!(
                "label {y} at index {i} out of range for {k} classes"
            )));
        }
    }

    let mut velocity = ParamGrads::zeros_like(net);
    let mut lr = cfg.learning_rate;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();

    for epoch in 1..=cfg.epochs {
        if cfg.lr_decay_epochs.contains(&epoch) {
            lr *= cfg.lr_decay_factor;
        }
        let mut rng = SeededStream::new(cfg.seed, 1_000_000 + epoch as u64).rng();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // per-sample gradients in parallel, merged in sample order
            let results: Vec<(ParamGrads, f64, bool)> = chunk
                .par_iter()
                .map(|&idx| {
                    let y = labels[idx];
                    let cache = net.forward_cached(&images[idx]).expect("validated shapes");
                    let (loss, dlogits) =
                        loss_and_dlogits(&cache.logits, &LossSpec::CrossEntropy { label: y })
                            .expect("validated label");
                    let (grads, _) = net.backward(&cache, &dlogits, true, false);
                    let hit = argmax(&cache.logits) == y;
                    (grads.expect("parameter gradients requested"), loss, hit)
                })
                .collect();

            let mut batch_grads = ParamGrads::zeros_like(net);
            for (g, loss, hit) in &results {
                batch_grads.add_assign(g);
                loss_sum += loss;
                correct += usize::from(*hit);
            }
            batch_grads.scale(1.0 / chunk.len() as f64);

            // v <- mu v + (g + wd w); w <- w - lr v
            let grad_groups = batch_grads.groups();
            for ((params, vel), grads) in net
                .param_groups_mut()
                .into_iter()
                .zip(velocity.groups_mut())
                .zip(grad_groups)
            {
                for ((p, v), g) in params.iter_mut().zip(vel.iter_mut()).zip(grads) {
                    *v = cfg.momentum * *v + (g + cfg.weight_decay * *p);
                    *p -= lr * *v;
                }
            }
        }

        trace.push(EpochStats {
            epoch,
            lr,
            mean_loss: loss_sum / images.len() as f64,
            accuracy: correct as f64 / images.len() as f64,
        });
    }
    Ok(trace)
}
