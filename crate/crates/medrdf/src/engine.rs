//! The smoothing engine: noisy-copy generation, denoising, batched
//! classification, majority vote with a calibrated abstention rule, and
//! the Robust Metric confidence score.
//!
//! For a query image the engine draws `copies` independent noisy versions
//! (copy `i` always uses substream `i` of the master seed, so results do
//! not depend on evaluation order), denoises each, and tallies the base
//! classifier's labels. Let `top_count` and `runner_up_count` be the two
//! largest tallies. The engine answers with the top label only when the
//! two-sided binomial test that `top_count` heads out of `top_count +
//! runner_up_count` fair-coin flips is significant at level `alpha`;
//! otherwise it abstains. This bounds the probability of returning any
//! label other than the majority class of the underlying label
//! distribution by `alpha`.
//!
//! The Robust Metric `K * (top_count - runner_up_count) / copies` scores
//! the vote margin on a `[0, K]` scale; [`min_top_probability`] converts
//! it into a lower bound on the top class's vote probability, which is how
//! downstream consumers decide whether to adopt or re-examine a result.

use crate::classifier::{argmax, Classifier};
use crate::error::{Error, Result};
use crate::noise::{denoise, perturb, Denoiser, NoiseModel};
use crate::tensor::{ImageTensor, SeededStream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Sentinel label for an abstained diagnosis.
pub const ABSTAIN: i64 = -1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MedRdfConfig {
    /// Number of noisy copies per query.
    #[serde(default = "default_copies")]
    pub copies: usize,
    /// Abstention level for the two-sided binomial test.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub noise: NoiseModel,
    pub denoiser: Denoiser,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_copies() -> usize {
    10_000
}

fn default_alpha() -> f64 {
    0.001
}

fn default_batch() -> usize {
    256
}

impl Default for MedRdfConfig {
    /// The headline operating point: 10^4 copies at level 0.001 with
    /// salt-and-pepper noise 0.1 and a 3x3 median filter.
    fn default() -> Self {
        MedRdfConfig {
            copies: default_copies(),
            alpha: default_alpha(),
            noise: NoiseModel::salt_and_pepper(0.1),
            denoiser: Denoiser::median_filter(3),
            batch_size: default_batch(),
            master_seed: 0,
        }
    }
}

impl MedRdfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.copies == 0 {
            return Err(Error::InvalidConfig("copies must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        self.noise.validate()?;
        self.denoiser.validate()?;
        Ok(())
    }
}

/// The engine's answer for one query image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    /// Accepted class label, or [`ABSTAIN`].
    pub result: i64,
    /// Vote tally per class; sums to the configured copy count.
    pub counts: Vec<u64>,
    pub top_label: usize,
    pub runner_up_label: usize,
    pub top_count: u64,
    pub runner_up_count: u64,
    pub p_value: f64,
    pub robust_metric: f64,
    /// Wall time of the prediction in seconds. Not part of equality
    /// comparisons in tests; everything else is schedule-invariant.
    pub elapsed_secs: f64,
}

impl Diagnosis {
    pub fn is_abstain(&self) -> bool {
        self.result == ABSTAIN
    }

    /// Fields that must be identical across batch sizes and schedules.
    pub fn deterministic_view(&self) -> (i64, &[u64], usize, usize, u64, u64, u64, u64) {
        (
            self.result,
            &self.counts,
            self.top_label,
            self.runner_up_label,
            self.top_count,
            self.runner_up_count,
            self.p_value.to_bits(),
            self.robust_metric.to_bits(),
        )
    }
}

/// Runs the full prediction pipeline on one image.
pub fn predict(model: &dyn Classifier, x: &ImageTensor, cfg: &MedRdfConfig) -> Result<Diagnosis> {
    cfg.validate()?;
    let k = model.num_classes();
    if k < 2 {
        return Err(Error::InvalidInput("classifier must have >= 2 classes".into()));
    }
    if cfg.batch_size > model.max_batch() {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds the classifier's max batch {}",
            cfg.batch_size,
            model.max_batch()
        )));
    }
    let start = Instant::now();

    // Copy i draws its noise from substream i; tallies are summed in chunk
    // order, so the outcome is identical for any batch size or schedule.
    let chunk_starts: Vec<usize> = (0..cfg.copies).step_by(cfg.batch_size).collect();
    let per_chunk: Result<Vec<Vec<u64>>> = chunk_starts
        .par_iter()
        .map(|&start_idx| {
            let end = (start_idx + cfg.batch_size).min(cfg.copies);
            let copies: Vec<ImageTensor> = (start_idx..end)
                .map(|i| {
                    let noisy = perturb(x, &cfg.noise, SeededStream::new(cfg.master_seed, i as u64));
                    denoise(&noisy, &cfg.denoiser)
                })
                .collect();
            let rows = model.predict_proba(&copies)?;
            let mut counts = vec![0u64; k];
            for row in &rows {
                counts[argmax(row)] += 1;
            }
            Ok(counts)
        })
        .collect();

    let mut counts = vec![0u64; k];
    for chunk in per_chunk? {
        for (total, c) in counts.iter_mut().zip(chunk) {
            *total += c;
        }
    }

    let (top_label, runner_up_label) = top_two(&counts);
    let top_count = counts[top_label];
    let runner_up_count = counts[runner_up_label];
    let p_value = binomial_two_sided_pvalue(top_count, runner_up_count)?;
    let result = if p_value <= cfg.alpha {
        top_label as i64
    } else {
        ABSTAIN
    };
    let rm = robust_metric(top_count, runner_up_count, k, cfg.copies as u64)?;

    Ok(Diagnosis {
        result,
        counts,
        top_label,
        runner_up_label,
        top_count,
        runner_up_count,
        p_value,
        robust_metric: rm,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Indices of the two largest counts; ties break to the lowest index.
fn top_two(counts: &[u64]) -> (usize, usize) {
    debug_assert!(counts.len() >= 2);
    let mut first = 0usize;
    for (i, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[first] {
            first = i;
        }
    }
    let mut second = usize::MAX;
    for (i, &c) in counts.iter().enumerate() {
        if i == first {
            continue;
        }
        if second == usize::MAX || c > counts[second] {
            second = i;
        }
    }
    (first, second)
}

/// Exact two-sided binomial test p-value: `min(1, 2 P[X <= runner_up])`
/// for `X ~ Binom(top + runner_up, 1/2)`.
///
/// Computed in log space with term-by-term summation of the lower tail,
/// so it stays exact down to counts where the doubled tail underflows.
/// At a fixed total the value is non-increasing in the count difference.
pub fn binomial_two_sided_pvalue(top_count: u64, runner_up_count: u64) -> Result<f64> {
    if top_count < runner_up_count {
        return Err(Error::InvalidInput(format!(
            "counts must be ordered: top {top_count} < runner-up {runner_up_count}"
        )));
    }
    let m = top_count + runner_up_count;
    if m == 0 {
        return Err(Error::InvalidInput("need at least one effective vote".into()));
    }

    // log C(m, i) built incrementally; terms grow toward i = runner_up_count,
    // so the last term anchors the log-sum-exp.
    let m_f = m as f64;
    let log_half_m = -m_f * std::f64::consts::LN_2;
    let mut log_terms = Vec::with_capacity(runner_up_count as usize + 1);
    let mut log_c = 0.0f64; // ln C(m, 0)
    for i in 0..=runner_up_count {
        log_terms.push(log_c + log_half_m);
        log_c += ((m - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    let max_log = *log_terms.last().expect("non-empty");
    if max_log == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let tail: f64 = log_terms.iter().map(|l| (l - max_log).exp()).sum();
    let log_p_lower = max_log + tail.ln();
    Ok((2.0 * log_p_lower.exp()).min(1.0))
}

/// Vote-margin confidence on a `[0, K]` scale:
/// `K * (top_count - runner_up_count) / total_copies`.
pub fn robust_metric(
    top_count: u64,
    runner_up_count: u64,
    num_classes: usize,
    total_copies: u64,
) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if runner_up_count > top_count || top_count > total_copies {
        return Err(Error::InvalidInput(format!(
            "counts must satisfy 0 <= runner-up ({runner_up_count}) <= top ({top_count}) <= total ({total_copies})"
        )));
    }
    Ok(num_classes as f64 * (top_count - runner_up_count) as f64 / total_copies as f64)
}

/// Lower bound on the top class's vote probability implied by the Robust
/// Metric: `1/K + (K-1)/K^2 * rm`.
pub fn min_top_probability(num_classes: usize, rm: f64) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let k = num_classes as f64;
    if !rm.is_finite() || rm < 0.0 || rm > k {
        return Err(Error::InvalidInput(format!(
            "robust metric must lie in [0, {k}], got {rm}"
        )));
    }
    Ok(1.0 / k + (k - 1.0) / (k * k) * rm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{Denoiser, NoiseModel};
    use crate::stubs::{ConstantClassifier, HashLabelClassifier};
    use crate::tensor::ImageTensor;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn cheap_cfg(copies: usize, seed: u64) -> MedRdfConfig {
        MedRdfConfig {
            copies,
            noise: NoiseModel::gaussian(0.3),
            denoiser: Denoiser::none(),
            batch_size: 64,
            master_seed: seed,
            ..MedRdfConfig::default()
        }
    }

    #[test]
    fn unanimous_vote_accepts_with_max_margin() {
        let model = ConstantClassifier::new((1, 4, 4), 3, 2);
        let x = ImageTensor::constant(1, 4, 4, 0.5);
        let cfg = cheap_cfg(10_000, 1);
        let d = predict(&model, &x, &cfg).unwrap();
        assert_eq!(d.counts, vec![0, 0, 10_000]);
        assert_eq!(d.result, 2);
        assert_eq!(d.robust_metric, 3.0);
        assert!(d.p_value <= 1e-300); // 2 * 0.5^10000 underflows
        assert_eq!(d.top_label, 2);
        assert_eq!(d.top_count, 10_000);
    }

    #[test]
    fn perfectly_split_vote_abstains_with_p_one() {
        // exactly equal counts force p = 1 and an abstention
        struct HalfAndHalf(AtomicUsize);
        impl Classifier for HalfAndHalf {
            fn num_classes(&self) -> usize {
                2
            }
            fn input_shape(&self) -> (usize, usize, usize) {
                (1, 4, 4)
            }
            fn predict_proba(&self, batch: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
                Ok(batch
                    .iter()
                    .map(|_| {
                        let i = self.0.fetch_add(1, Ordering::Relaxed);
                        if i % 2 == 0 {
                            vec![1.0, 0.0]
                        } else {
                            vec![0.0, 1.0]
                        }
                    })
                    .collect())
            }
        }
        let model = HalfAndHalf(AtomicUsize::new(0));
        let x = ImageTensor::constant(1, 4, 4, 0.5);
        // one chunk so call order is the copy order
        let cfg = MedRdfConfig {
            batch_size: 10,
            ..cheap_cfg(10, 3)
        };
        let d = predict(&model, &x, &cfg).unwrap();
        assert_eq!(d.top_count, 5);
        assert_eq!(d.runner_up_count, 5);
        assert_eq!(d.p_value, 1.0);
        assert!(d.is_abstain());
        assert_eq!(d.result, ABSTAIN);
    }

    #[test]
    fn stochastic_majority_is_recovered() {
        // per-copy label distribution (0.7, 0.2, 0.1): the majority class
        // wins essentially always at n = 10^4
        let mut wins = 0u64;
        let trials = 200u64;
        for trial in 0..trials {
            let model = HashLabelClassifier::new((1, 4, 4), vec![0.7, 0.2, 0.1], 17).unwrap();
            let x = ImageTensor::constant(1, 4, 4, 0.5);
            let cfg = MedRdfConfig {
                batch_size: 512,
                ..cheap_cfg(10_000, 50_000 + trial)
            };
            let d = predict(&model, &x, &cfg).unwrap();
            if d.result == 0 {
                wins += 1;
            }
        }
        assert!(
            wins as f64 >= 0.999 * trials as f64,
            "majority recovered in {wins}/{trials} trials"
        );
    }

    #[test]
    fn pvalue_closed_forms() {
        // unanimity over 11 effective votes is just significant at 0.001
        let p11 = binomial_two_sided_pvalue(11, 0).unwrap();
        assert!((p11 - 2.0 * 0.5f64.powi(11)).abs() < 1e-18);
        assert!(p11 <= 0.001);
        // ... but unanimity over 10 is not
        let p10 = binomial_two_sided_pvalue(10, 0).unwrap();
        assert!((p10 - 2.0 * 0.5f64.powi(10)).abs() < 1e-18);
        assert!(p10 > 0.001);
        // an even split caps at 1
        assert_eq!(binomial_two_sided_pvalue(5, 5).unwrap(), 1.0);
        // a single effective vote can never be significant
        assert_eq!(binomial_two_sided_pvalue(1, 0).unwrap(), 1.0);
    }

    #[test]
    fn pvalue_monotone_in_margin() {
        for total in [10u64, 31, 100] {
            let mut last = f64::INFINITY;
            for nb in (0..=total / 2).rev() {
                let p = binomial_two_sided_pvalue(total - nb, nb).unwrap();
                assert!(p <= last + 1e-15, "total {total} nb {nb}");
                last = p;
            }
        }
    }

    #[test]
    fn pvalue_rejects_bad_order() {
        assert!(binomial_two_sided_pvalue(2, 5).is_err());
        assert!(binomial_two_sided_pvalue(0, 0).is_err());
    }

    #[test]
    fn robust_metric_examples() {
        assert_eq!(robust_metric(5000, 5000, 3, 10_000).unwrap(), 0.0);
        assert_eq!(robust_metric(10_000, 0, 3, 10_000).unwrap(), 3.0);
        assert_eq!(robust_metric(7000, 2000, 3, 10_000).unwrap(), 1.5);
        assert!(robust_metric(5, 7, 3, 100).is_err());
        assert!(robust_metric(101, 0, 3, 100).is_err());
    }

    #[test]
    fn min_top_probability_reference_points() {
        assert!((min_top_probability(3, 1.0).unwrap() - 5.0 / 9.0).abs() < 1e-12);
        assert!((min_top_probability(7, 3.0).unwrap() - 25.0 / 49.0).abs() < 1e-12);
        assert_eq!(min_top_probability(4, 0.0).unwrap(), 0.25);
        assert!(min_top_probability(3, 3.5).is_err());
        assert!(min_top_probability(1, 0.5).is_err());
    }

    #[test]
    fn schedule_invariance_across_batch_sizes() {
        let model = HashLabelClassifier::new((1, 4, 4), vec![0.55, 0.45], 3).unwrap();
        let x = ImageTensor::constant(1, 4, 4, 0.5);
        let base = MedRdfConfig {
            batch_size: 1,
            ..cheap_cfg(500, 77)
        };
        let reference = predict(&model, &x, &base).unwrap();
        for bs in [37usize, 1024] {
            let cfg = MedRdfConfig {
                batch_size: bs,
                ..base.clone()
            };
            let d = predict(&model, &x, &cfg).unwrap();
            assert_eq!(d.deterministic_view(), reference.deterministic_view());
        }
    }

    #[test]
    fn config_validation() {
        let model = ConstantClassifier::new((1, 4, 4), 2, 0);
        let x = ImageTensor::constant(1, 4, 4, 0.5);
        for bad in [
            MedRdfConfig { copies: 0, ..MedRdfConfig::default() },
            MedRdfConfig { alpha: 0.0, ..MedRdfConfig::default() },
            MedRdfConfig { alpha: 1.0, ..MedRdfConfig::default() },
            MedRdfConfig { batch_size: 0, ..MedRdfConfig::default() },
        ] {
            assert!(matches!(predict(&model, &x, &bad), Err(Error::InvalidConfig(_))));
        }
        let oversize = MedRdfConfig {
            batch_size: model.max_batch() + 1,
            ..MedRdfConfig::default()
        };
        assert!(predict(&model, &x, &oversize).is_err());
    }

    proptest! {
        /// Arithmetic consistency of the vote-margin bound: when only two
        /// classes received votes, the top fraction is at least the bound
        /// implied by the Robust Metric, and the margin fraction is never
        /// above the top fraction.
        #[test]
        fn rm_bound_consistency(na in 1u64..5000, nb_raw in 0u64..5000, k in 2usize..10) {
            let nb = nb_raw.min(na);
            let n = na + nb;
            let rm = robust_metric(na, nb, k, n).unwrap();
            let bound = min_top_probability(k, rm).unwrap();
            let top_frac = na as f64 / n as f64;
            prop_assert!(top_frac >= bound - 1e-12);
            prop_assert!(top_frac >= (na - nb) as f64 / n as f64);
        }
    }
}
