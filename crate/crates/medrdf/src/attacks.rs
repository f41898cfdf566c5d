//! Adversarial example generation under a max-norm pixel budget.
//!
//! White-box attacks (FGSM, iterated FGSM, PGD, and a margin-loss attack
//! run as projected descent) consume exact input gradients from the model.
//! The black-box SPSA attack needs only class probabilities: it estimates
//! the margin-loss gradient from antithetic random-sign probes.
//!
//! Every attack returns an adversarial image inside both the epsilon ball
//! around the clean input and the `[0, 1]` pixel box, together with a
//! success flag (did the model's label move off the true label) and the
//! number of model evaluations spent.

use crate::classifier::{argmax, Classifier, LossSpec};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, SeededStream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Ifgsm,
    Pgd,
    Cw,
    Spsa,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Ifgsm => "ifgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
            AttackKind::Spsa => "spsa",
        }
    }
}

/// Parameters of one attack. `step_size = None` selects the default
/// `2.5 * epsilon / steps` so the iterates can traverse the ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Max-norm budget.
    pub epsilon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
    /// Margin clamp for the margin-loss attack.
    #[serde(default)]
    pub kappa: f64,
    /// Antithetic probe pairs per SPSA iteration.
    #[serde(default = "default_spsa_batch")]
    pub spsa_batch: usize,
    #[serde(default = "default_spsa_lr")]
    pub spsa_lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Stop at the first misclassified iterate. Disable for fixed-step
    /// benchmarking.
    #[serde(default = "default_true")]
    pub early_stop: bool,
}

fn default_steps() -> usize {
    1
}

fn default_spsa_batch() -> usize {
    128
}

fn default_spsa_lr() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

/// Probe offset for SPSA finite differences, in pixel units.
const SPSA_DELTA: f64 = 1e-2;

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: None,
            random_start: false,
            kappa: 0.0,
            spsa_batch: default_spsa_batch(),
            spsa_lr: default_spsa_lr(),
            seed: 0,
            early_stop: true,
        }
    }

    pub fn ifgsm(epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            kind: AttackKind::Ifgsm,
            steps,
            ..AttackSpec::fgsm(epsilon)
        }
    }

    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            kind: AttackKind::Pgd,
            steps,
            random_start: true,
            ..AttackSpec::fgsm(epsilon)
        }
    }

    pub fn cw(epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            kind: AttackKind::Cw,
            steps,
            ..AttackSpec::fgsm(epsilon)
        }
    }

    /// SPSA with the standard settings: 128 probe pairs, learning rate
    /// 0.01, 100 iterations, early stop on misclassification.
    pub fn spsa(epsilon: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Spsa,
            steps: 100,
            ..AttackSpec::fgsm(epsilon)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if self.steps < 1 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "step size must be positive, got {s}"
                )));
            }
        }
        if self.kind == AttackKind::Spsa {
            if self.spsa_batch == 0 {
                return Err(Error::InvalidConfig("spsa_batch must be >= 1".into()));
            }
            if !(self.spsa_lr > 0.0) {
                return Err(Error::InvalidConfig("spsa_lr must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn effective_step_size(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.epsilon / self.steps as f64)
    }

    /// Short name like `pgd-20` used in report rows.
    pub fn name(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => "fgsm".into(),
            AttackKind::Cw => "cw".into(),
            AttackKind::Spsa => "spsa".into(),
            k => format!("{}-{}", k.as_str(), self.steps),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: ImageTensor,
    /// Whether the model's label on the adversarial image differs from
    /// the true label.
    pub success: bool,
    /// Model evaluations consumed (probability rows plus gradient calls).
    pub queries: usize,
}

/// Sign with the zero case mapped to zero, so a zero gradient moves nothing.
#[inline]
fn step_sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects onto the intersection of the epsilon ball around `clean` and
/// the `[0, 1]` box. Both constraints are axis-aligned intervals, so a
/// per-coordinate clamp to their overlap is the exact joint projection.
fn project(x: &ImageTensor, clean: &ImageTensor, epsilon: f64) -> ImageTensor {
    x.zip_map(clean, |v, c| {
        v.clamp((c - epsilon).max(0.0), (c + epsilon).min(1.0))
    })
    .expect("same shape by construction")
}

fn label_of(model: &dyn Classifier, x: &ImageTensor, queries: &mut usize) -> Result<usize> {
    *queries += 1;
    let rows = model.predict_proba(std::slice::from_ref(x))?;
    Ok(argmax(&rows[0]))
}

/// Dispatches on `spec.kind`.
pub fn run_attack(
    model: &dyn Classifier,
    x: &ImageTensor,
    y: usize,
    spec: &AttackSpec,
) -> Result<AttackResult> {
    spec.validate()?;
    if y >= model.num_classes() {
        return Err(Error::InvalidInput(format!(
            "true label {y} out of range for {} classes",
            model.num_classes()
        )));
    }
    match spec.kind {
        AttackKind::Fgsm => fgsm(model, x, y, spec),
        AttackKind::Ifgsm => ifgsm(model, x, y, spec),
        AttackKind::Pgd => pgd(model, x, y, spec),
        AttackKind::Cw => cw_margin(model, x, y, spec),
        AttackKind::Spsa => spsa(model, x, y, spec),
    }
}

/// Single signed-gradient step of size epsilon on the cross-entropy loss.
pub fn fgsm(model: &dyn Classifier, x: &ImageTensor, y: usize, spec: &AttackSpec) -> Result<AttackResult> {
    let one_step = AttackSpec {
        steps: 1,
        step_size: Some(spec.epsilon.max(f64::MIN_POSITIVE)),
        ..spec.clone()
    };
    gradient_attack(model, x, y, &one_step, Ascend::CrossEntropy, false, None)
}

/// Iterated FGSM: fixed signed steps projected back into the ball.
pub fn ifgsm(model: &dyn Classifier, x: &ImageTensor, y: usize, spec: &AttackSpec) -> Result<AttackResult> {
    let init = if spec.random_start {
        Some(random_start(x, spec))
    } else {
        None
    };
    gradient_attack(model, x, y, spec, Ascend::CrossEntropy, false, init)
}

/// Projected gradient descent: iterated FGSM from a random point in the ball.
pub fn pgd(model: &dyn Classifier, x: &ImageTensor, y: usize, spec: &AttackSpec) -> Result<AttackResult> {
    gradient_attack(
        model,
        x,
        y,
        spec,
        Ascend::CrossEntropy,
        false,
        Some(random_start(x, spec)),
    )
}

/// Margin-loss attack: minimizes `max(z_y - max_{k!=y} z_k, -kappa)` over
/// the ball with projected signed steps, returning the first iterate that
/// misclassifies (the clean input counts as iterate zero).
pub fn cw_margin(model: &dyn Classifier, x: &ImageTensor, y: usize, spec: &AttackSpec) -> Result<AttackResult> {
    gradient_attack(model, x, y, spec, Ascend::NegMargin, true, None)
}

enum Ascend {
    /// Maximize cross-entropy at the true label.
    CrossEntropy,
    /// Minimize the margin loss (descend on it).
    NegMargin,
}

fn random_start(x: &ImageTensor, spec: &AttackSpec) -> ImageTensor {
    let mut rng = SeededStream::new(spec.seed, 0).rng();
    let jittered = x.map(|v| v + rng.random_range(-spec.epsilon..=spec.epsilon));
    project(&jittered, x, spec.epsilon)
}

fn gradient_attack(
    model: &dyn Classifier,
    x: &ImageTensor,
    y: usize,
    spec: &AttackSpec,
    direction: Ascend,
    check_initial: bool,
    init: Option<ImageTensor>,
) -> Result<AttackResult> {
    if !model.supports_input_gradient() {
        return Err(Error::Unsupported(
            "white-box attack on a model without input gradients".into(),
        ));
    }
    let mut queries = 0usize;
    let mut adv = init.unwrap_or_else(|| x.clone());
    if check_initial && label_of(model, &adv, &mut queries)? != y {
        return Ok(AttackResult {
            adversarial: adv,
            success: true,
            queries,
        });
    }

    let step = spec.effective_step_size();
    let (loss, sign) = match direction {
        Ascend::CrossEntropy => (LossSpec::CrossEntropy { label: y }, 1.0),
        Ascend::NegMargin => (
            LossSpec::Margin {
                label: y,
                kappa: spec.kappa,
            },
            -1.0,
        ),
    };

    for _ in 0..spec.steps {
        let grad = model.input_gradient(&adv, &loss)?;
        queries += 1;
        let moved = adv
            .zip_map(&grad, |v, g| v + sign * step * step_sign(g))
            .expect("same shape");
        adv = project(&moved, x, spec.epsilon);
        if spec.early_stop && label_of(model, &adv, &mut queries)? != y {
            return Ok(AttackResult {
                adversarial: adv,
                success: true,
                queries,
            });
        }
    }

    let success = if spec.early_stop {
        false // every early-stop check saw the true label
    } else {
        label_of(model, &adv, &mut queries)? != y
    };
    Ok(AttackResult {
        adversarial: adv,
        success,
        queries,
    })
}

/// Margin loss computed from class probabilities. Softmax is a monotone
/// shift of the logits, so `ln p_y - ln p_k` equals the logit margin.
pub fn margin_loss_from_probs(probs: &[f64], y: usize) -> f64 {
    let mut comp = usize::MAX;
    for (i, &p) in probs.iter().enumerate() {
        if i == y {
            continue;
        }
        if comp == usize::MAX || p > probs[comp] {
            comp = i;
        }
    }
    let floor = 1e-300f64;
    probs[y].max(floor).ln() - probs[comp].max(floor).ln()
}

/// Antithetic SPSA gradient estimate of a scalar loss at `x`.
///
/// Draws `pairs` random sign vectors, probes the loss at `x +- delta *
/// sign`, and averages the resulting one-sample estimates. The probe
/// evaluator receives all probes at once (paired consecutively) so callers
/// can batch them.
pub fn spsa_gradient_estimate<F>(
    x: &ImageTensor,
    delta: f64,
    pairs: usize,
    rng: &mut ChaCha8Rng,
    mut batch_loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[ImageTensor]) -> Result<Vec<f64>>,
{
    let d = x.len();
    let (c, h, w) = x.shape();
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(pairs);
    let mut probes: Vec<ImageTensor> = Vec::with_capacity(pairs * 2);
    for _ in 0..pairs {
        let dir: Vec<f64> = (0..d)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let plus: Vec<f64> = x
            .as_slice()
            .iter()
            .zip(&dir)
            .map(|(&v, &s)| v + delta * s)
            .collect();
        let minus: Vec<f64> = x
            .as_slice()
            .iter()
            .zip(&dir)
            .map(|(&v, &s)| v - delta * s)
            .collect();
        probes.push(ImageTensor::from_vec(c, h, w, plus)?);
        probes.push(ImageTensor::from_vec(c, h, w, minus)?);
        directions.push(dir);
    }
    let losses = batch_loss(&probes)?;
    if losses.len() != probes.len() {
        return Err(Error::InvalidInput(format!(
            "probe evaluator returned {} losses for {} probes",
            losses.len(),
            probes.len()
        )));
    }
    let mut grad = vec![0.0; d];
    for (j, dir) in directions.iter().enumerate() {
        let diff = (losses[2 * j] - losses[2 * j + 1]) / (2.0 * delta);
        for (g, &s) in grad.iter_mut().zip(dir) {
            *g += diff * s;
        }
    }
    for g in &mut grad {
        *g /= pairs as f64;
    }
    Ok(grad)
}

/// Gradient-free attack: per iteration, estimates the margin-loss gradient
/// from `spsa_batch` antithetic probe pairs and takes a projected signed
/// descent step of `spsa_lr`, stopping early on misclassification.
pub fn spsa(model: &dyn Classifier, x: &ImageTensor, y: usize, spec: &AttackSpec) -> Result<AttackResult> {
    let mut queries = 0usize;
    let mut adv = x.clone();
    if label_of(model, &adv, &mut queries)? != y {
        return Ok(AttackResult {
            adversarial: adv,
            success: true,
            queries,
        });
    }

    for iter in 0..spec.steps {
        let mut rng = SeededStream::new(spec.seed, iter as u64).rng();
        let grad = spsa_gradient_estimate(&adv, SPSA_DELTA, spec.spsa_batch, &mut rng, |probes| {
            let mut losses = Vec::with_capacity(probes.len());
            for chunk in probes.chunks(model.max_batch()) {
                let rows = model.predict_proba(chunk)?;
                queries += chunk.len();
                losses.extend(rows.iter().map(|r| margin_loss_from_probs(r, y)));
            }
            Ok(losses)
        })?;
        let moved: Vec<f64> = adv
            .as_slice()
            .iter()
            .zip(&grad)
            .map(|(&v, &g)| v - spec.spsa_lr * step_sign(g))
            .collect();
        let (c, h, w) = adv.shape();
        adv = project(&ImageTensor::from_vec(c, h, w, moved)?, x, spec.epsilon);
        if spec.early_stop && label_of(model, &adv, &mut queries)? != y {
            return Ok(AttackResult {
                adversarial: adv,
                success: true,
                queries,
            });
        }
    }

    let success = if spec.early_stop {
        false
    } else {
        label_of(model, &adv, &mut queries)? != y
    };
    Ok(AttackResult {
        adversarial: adv,
        success,
        queries,
    })
}
