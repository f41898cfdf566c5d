//! Experiment orchestration: train (or load) the base model, craft
//! adversarial test sets, run the defense, and assemble report tables
//! mirroring the structure of standard defense-accuracy studies.
//!
//! Determinism: per-image attack and engine seeds are derived from the
//! eval master seed plus stable indices, tallies and accuracies are
//! integer sums in image order, and all parallel loops collect in index
//! order, so identical configurations reproduce identical reports.

use crate::attacks::{run_attack, AttackSpec};
use crate::classifier::{fit, load_checkpoint, predict_label, Classifier, EpochStats, SmallNet};
use crate::engine::{predict, Diagnosis, MedRdfConfig};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{load_dataset, Dataset, Split};
use crate::harness::report::ReportTable;
use crate::noise::{DenoiseKind, Denoiser, NoiseKind, NoiseModel};
use crate::tensor::{ImageTensor, SeededStream};
use rayon::prelude::*;

/// A prepared experiment: trained model plus the test split.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub model: SmallNet,
    pub train_trace: Vec<EpochStats>,
    pub test: Dataset,
}

impl Experiment {
    /// Loads the dataset and produces the base model, either from the
    /// configured checkpoint or by training from scratch.
    pub fn prepare(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut test = load_dataset(&cfg.dataset.source_for(Split::Test)?, Split::Test)?;
        if let Some(limit) = cfg.eval.limit_test {
            if limit == 0 {
                return Err(Error::InvalidConfig("limit_test must be >= 1".into()));
            }
            test.images.truncate(limit);
            test.labels.truncate(limit);
        }

        let (model, train_trace) = match &cfg.checkpoint {
            Some(path) if path.exists() => (load_checkpoint(path)?, Vec::new()),
            _ => {
                let train = load_dataset(&cfg.dataset.source_for(Split::Train)?, Split::Train)?;
                if train.num_classes != test.num_classes {
                    return Err(Error::InvalidInput(
                        "train/test class count mismatch".into(),
                    ));
                }
                let shape = train.images[0].shape();
                let mut model = SmallNet::new(shape, train.num_classes, cfg.train.seed)?;
                let trace = fit(&mut model, &train.images, &train.labels, &cfg.train)?;
                (model, trace)
            }
        };
        if model.input_shape() != test.images[0].shape() {
            return Err(Error::ShapeMismatch {
                expected: model.input_shape(),
                got: test.images[0].shape(),
            });
        }
        if model.num_classes() != test.num_classes {
            return Err(Error::InvalidInput(format!(
                "model has {} classes but the dataset has {}",
                model.num_classes(),
                test.num_classes
            )));
        }
        Ok(Experiment {
            cfg,
            model,
            train_trace,
            test,
        })
    }

    fn master_seed(&self) -> u64 {
        self.cfg.eval.master_seed
    }

    /// Per-image attack spec with a derived seed.
    fn attack_for_image(&self, spec: &AttackSpec, attack_idx: usize, image_idx: usize) -> AttackSpec {
        let base = SeededStream::new(
            self.master_seed() ^ spec.seed,
            0x41 + attack_idx as u64,
        )
        .derive_seed();
        let mut per_image = spec.clone();
        per_image.seed = SeededStream::new(base, image_idx as u64).derive_seed();
        per_image
    }

    /// Per-image engine config with a derived noise seed.
    fn engine_for_image(&self, cfg: &MedRdfConfig, cell_idx: usize, image_idx: usize) -> MedRdfConfig {
        let base = SeededStream::new(
            self.master_seed() ^ cfg.master_seed,
            0xE0 + cell_idx as u64,
        )
        .derive_seed();
        let mut per_image = cfg.clone();
        per_image.master_seed = SeededStream::new(base, image_idx as u64).derive_seed();
        per_image
    }

    /// Crafts one adversarial image per test sample against the base model.
    pub fn craft_adversarial_set(&self, spec: &AttackSpec, attack_idx: usize) -> Result<Vec<ImageTensor>> {
        let results: Result<Vec<ImageTensor>> = self
            .test
            .images
            .par_iter()
            .zip(&self.test.labels)
            .enumerate()
            .map(|(i, (x, &y))| {
                let per_image = self.attack_for_image(spec, attack_idx, i);
                Ok(run_attack(&self.model, x, y, &per_image)?.adversarial)
            })
            .collect();
        results
    }

    /// Plain accuracy of the base model on a set of images, in percent.
    pub fn base_accuracy(&self, images: &[ImageTensor]) -> Result<f64> {
        let correct: Result<Vec<bool>> = images
            .par_iter()
            .zip(&self.test.labels)
            .map(|(x, &y)| Ok(predict_label(&self.model, x)? == y))
            .collect();
        Ok(percent(correct?.iter().filter(|&&c| c).count(), images.len()))
    }

    /// Runs the engine on every image; returns the diagnoses in order.
    pub fn diagnose_set(
        &self,
        images: &[ImageTensor],
        engine: &MedRdfConfig,
        cell_idx: usize,
    ) -> Result<Vec<Diagnosis>> {
        images
            .par_iter()
            .enumerate()
            .map(|(i, x)| predict(&self.model, x, &self.engine_for_image(engine, cell_idx, i)))
            .collect()
    }

    /// Defense accuracy in percent; abstentions count as incorrect.
    fn defense_accuracy(&self, diagnoses: &[Diagnosis]) -> f64 {
        let correct = diagnoses
            .iter()
            .zip(&self.test.labels)
            .filter(|(d, &y)| d.result == y as i64)
            .count();
        percent(correct, diagnoses.len())
    }

    /// The defense-accuracy matrix: undefended and each engine
    /// configuration (rows) against natural inputs and each attack
    /// (columns), plus per-image prediction wall time.
    pub fn defense_eval(&self) -> Result<ReportTable> {
        let mut table = ReportTable::new("defense_eval");
        let adversarial_sets = self.all_adversarial_sets()?;

        table.push(
            "undefended",
            "none",
            "natural",
            "accuracy",
            self.base_accuracy(&self.test.images)?,
        );
        for (spec, set) in &adversarial_sets {
            table.push(
                "undefended",
                "none",
                spec.name(),
                "accuracy",
                self.base_accuracy(set)?,
            );
        }

        for (cell_idx, engine) in self.cfg.medrdf.iter().enumerate() {
            let defense = defense_label(&engine.noise);
            let den = denoiser_label(&engine.denoiser);
            let natural = self.diagnose_set(&self.test.images, engine, cell_idx)?;
            table.push(
                defense.clone(),
                den.clone(),
                "natural",
                "accuracy",
                self.defense_accuracy(&natural),
            );
            let mean_elapsed =
                natural.iter().map(|d| d.elapsed_secs).sum::<f64>() / natural.len() as f64;
            table.push(defense.clone(), den.clone(), "natural", "time_s", mean_elapsed);
            for (attack_idx, (spec, set)) in adversarial_sets.iter().enumerate() {
                let diagnoses = self.diagnose_set(set, engine, cell_idx * 100 + attack_idx + 1)?;
                table.push(
                    defense.clone(),
                    den.clone(),
                    spec.name(),
                    "accuracy",
                    self.defense_accuracy(&diagnoses),
                );
            }
        }
        Ok(table)
    }

    fn all_adversarial_sets(&self) -> Result<Vec<(AttackSpec, Vec<ImageTensor>)>> {
        self.cfg
            .attack
            .iter()
            .enumerate()
            .map(|(i, spec)| Ok((spec.clone(), self.craft_adversarial_set(spec, i)?)))
            .collect()
    }

    /// Attack-side report: base-model success rate, mean queries, and the
    /// worst-case budget actually used, per attack.
    pub fn attack_report(&self) -> Result<ReportTable> {
        let mut table = ReportTable::new("attack_eval");
        for (attack_idx, spec) in self.cfg.attack.iter().enumerate() {
            let per_image: Result<Vec<(bool, usize, f64)>> = self
                .test
                .images
                .par_iter()
                .zip(&self.test.labels)
                .enumerate()
                .map(|(i, (x, &y))| {
                    let res = run_attack(&self.model, x, y, &self.attack_for_image(spec, attack_idx, i))?;
                    let dist = crate::tensor::linf_distance(x, &res.adversarial)?;
                    Ok((res.success, res.queries, dist))
                })
                .collect();
            let per_image = per_image?;
            let n = per_image.len();
            let successes = per_image.iter().filter(|(s, _, _)| *s).count();
            let queries: usize = per_image.iter().map(|(_, q, _)| q).sum();
            let max_linf = per_image.iter().map(|(_, _, d)| *d).fold(0.0, f64::max);
            table.push("undefended", "none", spec.name(), "success_rate", percent(successes, n));
            table.push(
                "undefended",
                "none",
                spec.name(),
                "mean_queries",
                queries as f64 / n as f64,
            );
            table.push("undefended", "none", spec.name(), "max_linf", max_linf);
        }
        Ok(table)
    }

    /// Accuracy matrix over attack budget (rows) and noise scale
    /// (columns), using the first engine configuration as the template.
    pub fn sweep_sigma_eps(&self) -> Result<ReportTable> {
        let mut table = ReportTable::new("sweep_sigma_eps");
        let template = &self.cfg.medrdf[0];
        let steps = self.cfg.eval.sweep_attack_steps;
        for (eps_idx, &eps) in self.cfg.eval.sweep_epsilons.iter().enumerate() {
            let images: Vec<ImageTensor> = if eps == 0.0 {
                self.test.images.clone()
            } else {
                let spec = AttackSpec::pgd(eps, steps);
                self.craft_adversarial_set(&spec, 1000 + eps_idx)?
            };
            for (sig_idx, &sigma) in self.cfg.eval.sweep_sigmas.iter().enumerate() {
                let engine = MedRdfConfig {
                    copies: self.cfg.eval.sweep_prediction_copies,
                    noise: NoiseModel {
                        sigma,
                        ..template.noise
                    },
                    ..template.clone()
                };
                let diagnoses =
                    self.diagnose_set(&images, &engine, 2000 + eps_idx * 100 + sig_idx)?;
                table.push(
                    "medrdf",
                    denoiser_label(&template.denoiser),
                    eps_label(eps),
                    format!("sigma={sigma}"),
                    self.defense_accuracy(&diagnoses),
                );
            }
        }
        Ok(table)
    }

    /// Accuracy and per-image prediction time across copy counts.
    pub fn sweep_copies(&self) -> Result<ReportTable> {
        let mut table = ReportTable::new("sweep_copies");
        let template = &self.cfg.medrdf[0];
        let adversarial_sets = self.all_adversarial_sets()?;
        for (n_idx, &n) in self.cfg.eval.sweep_copies.iter().enumerate() {
            let engine = MedRdfConfig {
                copies: n,
                ..template.clone()
            };
            let natural = self.diagnose_set(&self.test.images, &engine, 3000 + n_idx * 100)?;
            table.push(
                "medrdf",
                denoiser_label(&template.denoiser),
                "natural",
                format!("accuracy@n={n}"),
                self.defense_accuracy(&natural),
            );
            let mean_elapsed =
                natural.iter().map(|d| d.elapsed_secs).sum::<f64>() / natural.len() as f64;
            table.push(
                "medrdf",
                denoiser_label(&template.denoiser),
                "natural",
                format!("time_s@n={n}"),
                mean_elapsed,
            );
            for (attack_idx, (spec, set)) in adversarial_sets.iter().enumerate() {
                let diagnoses =
                    self.diagnose_set(set, &engine, 3000 + n_idx * 100 + attack_idx + 1)?;
                table.push(
                    "medrdf",
                    denoiser_label(&template.denoiser),
                    spec.name(),
                    format!("accuracy@n={n}"),
                    self.defense_accuracy(&diagnoses),
                );
            }
        }
        Ok(table)
    }

    /// Four-way breakdown per evaluated set: correct/incorrect crossed
    /// with whether the Robust Metric clears the acceptance threshold.
    pub fn rm_breakdown(&self) -> Result<ReportTable> {
        let mut table = ReportTable::new("rm_breakdown");
        let engine = &self.cfg.medrdf[0];
        let threshold = self.cfg.eval.rm_threshold_for(self.test.num_classes);
        let mut sets: Vec<(String, Vec<ImageTensor>)> =
            vec![("natural".into(), self.test.images.clone())];
        for (spec, set) in self.all_adversarial_sets()? {
            sets.push((spec.name(), set));
        }
        for (set_idx, (name, images)) in sets.iter().enumerate() {
            let diagnoses = self.diagnose_set(images, engine, 4000 + set_idx)?;
            let mut cells = [0usize; 4]; // C&R, C&!R, !C&!R, !C&R
            for (d, &y) in diagnoses.iter().zip(&self.test.labels) {
                let correct = d.result == y as i64;
                let robust = d.robust_metric >= threshold;
                let idx = match (correct, robust) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, false) => 2,
                    (false, true) => 3,
                };
                cells[idx] += 1;
            }
            let n = diagnoses.len();
            let defense = defense_label(&engine.noise);
            let den = denoiser_label(&engine.denoiser);
            for (metric, count) in ["cr", "c_nr", "nc_nr", "nc_r"].iter().zip(cells) {
                table.push(defense.clone(), den.clone(), name.clone(), *metric, percent(count, n));
            }
        }
        Ok(table)
    }
}

fn percent(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

pub fn defense_label(noise: &NoiseModel) -> String {
    let kind = match noise.kind {
        NoiseKind::Gaussian => "gaussian",
        NoiseKind::SaltAndPepper => "s.p.",
        NoiseKind::Poisson => "poisson",
    };
    format!("medrdf {kind} {}", noise.sigma)
}

pub fn denoiser_label(d: &Denoiser) -> String {
    match d.kind {
        DenoiseKind::None => "none".into(),
        DenoiseKind::GaussianSmoothing => format!("gs{}", d.window),
        DenoiseKind::MedianFilter => format!("mf{}", d.window),
    }
}

/// Budgets that are integer multiples of 1/255 print as fractions.
pub fn eps_label(eps: f64) -> String {
    if eps == 0.0 {
        return "eps=0".into();
    }
    let k = eps * 255.0;
    if (k - k.round()).abs() < 1e-9 {
        format!("eps={}/255", k.round() as i64)
    } else {
        format!("eps={eps}")
    }
}

/// Convenience wrappers matching the CLI subcommands.
pub fn run_defense_eval(cfg: ExperimentConfig) -> Result<ReportTable> {
    Experiment::prepare(cfg)?.defense_eval()
}

pub fn run_sweep_sigma_eps(cfg: ExperimentConfig) -> Result<ReportTable> {
    Experiment::prepare(cfg)?.sweep_sigma_eps()
}

pub fn run_sweep_copies(cfg: ExperimentConfig) -> Result<ReportTable> {
    Experiment::prepare(cfg)?.sweep_copies()
}

pub fn run_rm_breakdown(cfg: ExperimentConfig) -> Result<ReportTable> {
    Experiment::prepare(cfg)?.rm_breakdown()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::DatasetConfig;
    use crate::harness::dataset::SyntheticSpec;

    fn tiny_config() -> ExperimentConfig {
        let toml_text = r#"
[dataset]
kind = "synthetic"
classes = 3
train = 36
val = 6
test = 9
seed = 7

[train]
epochs = 4
learning_rate = 0.05
lr_decay_epochs = [3]
batch_size = 12
seed = 1

[[attack]]
kind = "fgsm"
epsilon = "8/255"

[[medrdf]]
noise = { kind = "salt_and_pepper", sigma = 0.1 }
denoiser = { kind = "median_filter", window = 3 }
copies = 50
alpha = 0.001
batch_size = 64

[eval]
sweep_sigmas = [0.05, 0.1]
sweep_epsilons = [0.0, "8/255"]
sweep_attack_steps = 3
sweep_copies = [10, 20]
sweep_prediction_copies = 30
"#;
        toml::from_str(toml_text).unwrap()
    }

    #[test]
    fn defense_eval_produces_expected_cells() {
        let exp = Experiment::prepare(tiny_config()).unwrap();
        let table = exp.defense_eval().unwrap();
        assert!(table.get("undefended", "none", "natural", "accuracy").is_some());
        assert!(table.get("undefended", "none", "fgsm", "accuracy").is_some());
        assert!(table
            .get("medrdf s.p. 0.1", "mf3", "natural", "accuracy")
            .is_some());
        assert!(table.get("medrdf s.p. 0.1", "mf3", "fgsm", "accuracy").is_some());
        assert!(table.get("medrdf s.p. 0.1", "mf3", "natural", "time_s").is_some());
    }

    #[test]
    fn defense_eval_is_deterministic() {
        let a = Experiment::prepare(tiny_config()).unwrap().defense_eval().unwrap();
        let b = Experiment::prepare(tiny_config()).unwrap().defense_eval().unwrap();
        let cells_a: Vec<_> = a.deterministic_cells().collect();
        let cells_b: Vec<_> = b.deterministic_cells().collect();
        assert_eq!(cells_a, cells_b);
    }

    #[test]
    fn empty_attack_list_leaves_only_natural_columns() {
        let mut cfg = tiny_config();
        cfg.attack.clear();
        let exp = Experiment::prepare(cfg).unwrap();
        let table = exp.defense_eval().unwrap();
        assert!(table
            .deterministic_cells()
            .all(|c| c.attack == "natural"));
    }

    #[test]
    fn rm_breakdown_cells_partition_the_set() {
        let exp = Experiment::prepare(tiny_config()).unwrap();
        let table = exp.rm_breakdown().unwrap();
        for set in ["natural", "fgsm"] {
            let total: f64 = ["cr", "c_nr", "nc_nr", "nc_r"]
                .iter()
                .map(|m| table.get("medrdf s.p. 0.1", "mf3", set, m).unwrap())
                .sum();
            assert!((total - 100.0).abs() < 0.1, "{set}: {total}");
        }
    }

    #[test]
    fn rm_threshold_zero_marks_everything_robust() {
        let mut cfg = tiny_config();
        cfg.eval.rm_threshold = Some(0.0);
        cfg.attack.clear();
        let exp = Experiment::prepare(cfg).unwrap();
        let table = exp.rm_breakdown().unwrap();
        assert_eq!(table.get("medrdf s.p. 0.1", "mf3", "natural", "c_nr"), Some(0.0));
        assert_eq!(table.get("medrdf s.p. 0.1", "mf3", "natural", "nc_nr"), Some(0.0));
    }

    #[test]
    fn sweeps_produce_full_matrices() {
        let exp = Experiment::prepare(tiny_config()).unwrap();
        let sweep = exp.sweep_sigma_eps().unwrap();
        assert_eq!(sweep.cells.len(), 2 * 2);
        assert!(sweep.get("medrdf", "mf3", "eps=0", "sigma=0.05").is_some());
        assert!(sweep.get("medrdf", "mf3", "eps=8/255", "sigma=0.1").is_some());

        let copies = exp.sweep_copies().unwrap();
        // per n: natural accuracy + timing + one attack accuracy
        assert_eq!(copies.cells.len(), 2 * 3);
        assert!(copies.get("medrdf", "mf3", "natural", "accuracy@n=10").is_some());
        assert!(copies.get("medrdf", "mf3", "natural", "time_s@n=20").is_some());
    }

    #[test]
    fn limit_test_truncates() {
        let mut cfg = tiny_config();
        cfg.eval.limit_test = Some(4);
        let exp = Experiment::prepare(cfg).unwrap();
        assert_eq!(exp.test.len(), 4);
    }

    #[test]
    fn synthetic_class_count_flows_into_model() {
        let mut cfg = tiny_config();
        cfg.dataset = DatasetConfig::Synthetic {
            spec: SyntheticSpec {
                classes: 4,
                train: 16,
                val: 4,
                test: 8,
                ..SyntheticSpec::default()
            },
        };
        let exp = Experiment::prepare(cfg).unwrap();
        assert_eq!(exp.model.num_classes(), 4);
    }
}
