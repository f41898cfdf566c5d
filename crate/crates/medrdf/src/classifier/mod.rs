//! The pluggable base classifier abstraction and the built-in trainable
//! network used for desk-scale experiments.
//!
//! Anything that can map image batches to class probabilities can sit
//! behind [`Classifier`]; white-box attacks additionally need
//! [`Classifier::input_gradient`], which probability-only models may
//! decline by returning a capability error (black-box attacks still work).

mod checkpoint;
mod smallnet;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use smallnet::SmallNet;
pub use train::{fit, EpochStats, TrainConfig};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// The loss a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// Cross-entropy of the softmax output at the true label.
    CrossEntropy { label: usize },
    /// Margin loss `max(z_y - max_{k != y} z_k, -kappa)`; ties among the
    /// competing logits resolve to the lowest class index.
    Margin { label: usize, kappa: f64 },
}

impl LossSpec {
    pub fn label(&self) -> usize {
        match self {
            LossSpec::CrossEntropy { label } => *label,
            LossSpec::Margin { label, .. } => *label,
        }
    }
}

/// A batched probabilistic classifier over image tensors.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// The exact input shape every sample must have.
    fn input_shape(&self) -> (usize, usize, usize);

    /// Largest batch accepted by one `predict_proba` call.
    fn max_batch(&self) -> usize {
        4096
    }

    /// Class probabilities, one row per sample. Rows are valid probability
    /// vectors (non-negative, summing to 1 within 1e-6) and each row is
    /// independent of the rest of the batch.
    fn predict_proba(&self, batch: &[ImageTensor]) -> Result<Vec<Vec<f64>>>;

    /// Whether [`Classifier::input_gradient`] is available.
    fn supports_input_gradient(&self) -> bool {
        false
    }

    /// Exact gradient of the loss with respect to the input pixels.
    fn input_gradient(&self, _x: &ImageTensor, _loss: &LossSpec) -> Result<ImageTensor> {
        Err(Error::Unsupported(
            "input gradients are not available on this model".into(),
        ))
    }
}

/// Index of the largest element; ties break to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted label for a single sample.
pub fn predict_label(model: &dyn Classifier, x: &ImageTensor) -> Result<usize> {
    let rows = model.predict_proba(std::slice::from_ref(x))?;
    Ok(argmax(&rows[0]))
}

/// Validates a batch against the model's contract.
pub(crate) fn check_batch(model: &dyn Classifier, batch: &[ImageTensor]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if batch.len() > model.max_batch() {
        return Err(Error::InvalidInput(format!(
            "batch of {} exceeds max_batch {}",
            batch.len(),
            model.max_batch()
        )));
    }
    let expected = model.input_shape();
    for x in batch {
        if x.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: x.shape(),
            });
        }
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
