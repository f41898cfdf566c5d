//! medrdf wraps any pretrained image classifier with an inference-time
//! defense: many noisy copies of each query are denoised, classified, and
//! majority-voted, with a calibrated abstention rule and a confidence
//! score attached to every answer. The crate also ships the attack suite
//! and the evaluation harness needed to measure the defense.
//!
//! Module map:
//!
//! * [`tensor`] — image containers and seeded random streams;
//! * [`noise`] — isotropic noise models and the fixed denoisers;
//! * [`classifier`] — the pluggable model interface and the built-in
//!   trainable network with exact gradients;
//! * [`attacks`] — FGSM, iterated FGSM, PGD, margin-loss, and SPSA
//!   adversaries under a max-norm budget;
//! * [`engine`] — noisy-copy voting, the binomial abstention test, and
//!   the Robust Metric;
//! * [`harness`] — datasets, experiment orchestration, report emission,
//!   and the configuration file schema behind the CLI;
//! * [`stubs`] — trivial classifiers for wiring and calibration checks.

pub mod attacks;
pub mod classifier;
pub mod engine;
pub mod error;
pub mod harness;
pub mod noise;
pub mod stubs;
pub mod tensor;

pub use error::{Error, Result};
