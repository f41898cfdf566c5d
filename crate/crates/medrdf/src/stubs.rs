//! Minimal classifiers for wiring, calibration checks, and tests.

use crate::classifier::{check_batch, softmax, Classifier, LossSpec};
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Always returns the same class with probability one.
pub struct ConstantClassifier {
    shape: (usize, usize, usize),
    num_classes: usize,
    class: usize,
}

impl ConstantClassifier {
    pub fn new(shape: (usize, usize, usize), num_classes: usize, class: usize) -> Self {
        assert!(class < num_classes);
        ConstantClassifier {
            shape,
            num_classes,
            class,
        }
    }
}

impl Classifier for ConstantClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn predict_proba(&self, batch: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        check_batch(self, batch)?;
        let mut row = vec![0.0; self.num_classes];
        row[self.class] = 1.0;
        Ok(vec![row; batch.len()])
    }
}

/// Softmax-linear model `z = W x + b` with exact analytic gradients.
pub struct LinearClassifier {
    shape: (usize, usize, usize),
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn new(
        shape: (usize, usize, usize),
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let d = shape.0 * shape.1 * shape.2;
        if weights.len() < 2 || weights.len() != bias.len() {
            return Err(Error::InvalidInput(
                "need one weight row and bias per class, at least two classes".into(),
            ));
        }
        if weights.iter().any(|w| w.len() != d) {
            return Err(Error::InvalidInput(format!(
                "every weight row must have {d} entries"
            )));
        }
        Ok(LinearClassifier {
            shape,
            weights,
            bias,
        })
    }

    fn logits(&self, x: &ImageTensor) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x.as_slice()).map(|(wv, xv)| wv * xv).sum::<f64>())
            .collect()
    }
}

impl Classifier for LinearClassifier {
    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn predict_proba(&self, batch: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        check_batch(self, batch)?;
        Ok(batch.iter().map(|x| softmax(&self.logits(x))).collect())
    }

    fn supports_input_gradient(&self) -> bool {
        true
    }

    fn input_gradient(&self, x: &ImageTensor, loss: &LossSpec) -> Result<ImageTensor> {
        let (c, h, w) = self.shape;
        let d = c * h * w;
        let logits = self.logits(x);
        let mut grad = vec![0.0; d];
        match loss {
            LossSpec::CrossEntropy { label } => {
                let probs = softmax(&logits);
                for (k, wk) in self.weights.iter().enumerate() {
                    let coeff = probs[k] - if k == *label { 1.0 } else { 0.0 };
                    for (g, wv) in grad.iter_mut().zip(wk) {
                        *g += coeff * wv;
                    }
                }
            }
            LossSpec::Margin { label, kappa } => {
                let mut comp = usize::MAX;
                for (i, &z) in logits.iter().enumerate() {
                    if i != *label && (comp == usize::MAX || z > logits[comp]) {
                        comp = i;
                    }
                }
                if logits[*label] - logits[comp] >= -kappa {
                    for ((g, wy), wc) in grad
                        .iter_mut()
                        .zip(&self.weights[*label])
                        .zip(&self.weights[comp])
                    {
                        *g = wy - wc;
                    }
                }
            }
        }
        ImageTensor::from_vec(c, h, w, grad)
    }
}

/// Deterministic pseudo-random labeler: hashes the input pixels together
/// with a seed into a uniform variate, then picks a label by inverting the
/// configured label distribution. Distinct inputs behave like independent
/// draws, which makes this a stand-in for a base classifier with a known
/// per-copy label distribution.
pub struct HashLabelClassifier {
    shape: (usize, usize, usize),
    probs: Vec<f64>,
    seed: u64,
}

impl HashLabelClassifier {
    pub fn new(shape: (usize, usize, usize), probs: Vec<f64>, seed: u64) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidInput("need at least two classes".into()));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(
                "label distribution must be non-negative and sum to 1".into(),
            ));
        }
        Ok(HashLabelClassifier { shape, probs, seed })
    }

    fn unit_hash(&self, x: &ImageTensor) -> f64 {
        // FNV-1a over the pixel bit patterns, mixed with the seed
        let mut h: u64 = 0xcbf29ce484222325 ^ self.seed.wrapping_mul(0x100000001b3);
        for v in x.as_slice() {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        // final avalanche, then map the top 53 bits into [0, 1)
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51afd7ed558ccd);
        h ^= h >> 33;
        (h >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl Classifier for HashLabelClassifier {
    fn num_classes(&self) -> usize {
        self.probs.len()
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn predict_proba(&self, batch: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        check_batch(self, batch)?;
        Ok(batch
            .iter()
            .map(|x| {
                let u = self.unit_hash(x);
                let mut acc = 0.0;
                let mut label = self.probs.len() - 1;
                for (k, &p) in self.probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        label = k;
                        break;
                    }
                }
                let mut row = vec![0.0; self.probs.len()];
                row[label] = 1.0;
                row
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::predict_label;
    use crate::tensor::SeededStream;
    use rand::Rng;

    #[test]
    fn hash_labeler_matches_distribution() {
        let model = HashLabelClassifier::new((1, 2, 2), vec![0.7, 0.2, 0.1], 5).unwrap();
        let mut counts = [0usize; 3];
        let mut rng = SeededStream::new(1, 0).rng();
        let n = 20_000;
        for _ in 0..n {
            let data: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let x = ImageTensor::from_vec(1, 2, 2, data).unwrap();
            counts[predict_label(&model, &x).unwrap()] += 1;
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        assert!((freq[0] - 0.7).abs() < 0.02, "{freq:?}");
        assert!((freq[1] - 0.2).abs() < 0.02, "{freq:?}");
        assert!((freq[2] - 0.1).abs() < 0.02, "{freq:?}");
    }

    #[test]
    fn hash_labeler_is_deterministic_per_input() {
        let model = HashLabelClassifier::new((1, 2, 2), vec![0.5, 0.5], 9).unwrap();
        let x = ImageTensor::from_vec(1, 2, 2, vec![0.1, 0.9, 0.4, 0.2]).unwrap();
        let a = predict_label(&model, &x).unwrap();
        let b = predict_label(&model, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let model = LinearClassifier::new(
            (1, 1, 3),
            vec![vec![0.3, -0.5, 0.2], vec![-0.1, 0.4, 0.6]],
            vec![0.1, -0.2],
        )
        .unwrap();
        let x = ImageTensor::from_vec(1, 1, 3, vec![0.2, 0.6, 0.4]).unwrap();
        for loss in [
            LossSpec::CrossEntropy { label: 0 },
            LossSpec::Margin { label: 0, kappa: 0.0 },
        ] {
            let g = model.input_gradient(&x, &loss).unwrap();
            for i in 0..3 {
                let h = 1e-6;
                let eval = |v: f64| {
                    let mut p = x.clone();
                    p.as_mut_slice()[i] = v;
                    let logits = model.logits(&p);
                    match loss {
                        LossSpec::CrossEntropy { label } => {
                            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
                                - logits[label]
                        }
                        LossSpec::Margin { label, kappa } => {
                            let other = 1 - label;
                            (logits[label] - logits[other]).max(-kappa)
                        }
                    }
                };
                let fd = (eval(x.as_slice()[i] + h) - eval(x.as_slice()[i] - h)) / (2.0 * h);
                assert!((fd - g.as_slice()[i]).abs() < 1e-6);
            }
        }
    }
}
