//! Run configuration: a TOML file whose keys mirror the task, base-training
//! and adaptation settings, plus sweep grids and output location. Every run
//! embeds the config hash and seed in its outputs so results are
//! self-describing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gfss_core::adapt::{AdaptationConfig, Arm};
use gfss_core::metrics::AggregateConfig;
use gfss_core::synth::{fitted_long_tail, SimilaritySpec, TaskSpec};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; episode generation and adaptation derive from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Arms executed by `adapt`.
    pub arms: Vec<Arm>,
    pub task: TaskConfig,
    pub base_training: BaseTrainingConfig,
    pub adaptation: AdaptationConfig,
    pub sweep: SweepConfig,
    pub aggregate: AggregateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/out"),
            arms: vec![Arm::Transition],
            task: TaskConfig::default(),
            base_training: BaseTrainingConfig::default(),
            adaptation: AdaptationConfig::default(),
            sweep: SweepConfig::default(),
            aggregate: AggregateConfig::default(),
        }
    }
}

/// Task settings; `pixels_per_class` may be omitted in favour of a fitted
/// geometric long-tail profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub feature_dim: usize,
    pub n_base: usize,
    pub n_novel: usize,
    pub similarity: Vec<SimilaritySpec>,
    pub noise_std: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub pixels_per_class: Option<Vec<usize>>,
    /// Geometric decay used when `pixels_per_class` is absent.
    pub long_tail_ratio: f64,
    pub n_support_images: usize,
    pub n_query_images: usize,
    pub n_base_images: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let d = TaskSpec::default();
        TaskConfig {
            feature_dim: d.feature_dim,
            n_base: d.n_base,
            n_novel: d.n_novel,
            similarity: Vec::new(),
            noise_std: d.noise_std,
            image_height: d.image_height,
            image_width: d.image_width,
            pixels_per_class: None,
            long_tail_ratio: 0.6,
            n_support_images: d.n_support_images,
            n_query_images: d.n_query_images,
            n_base_images: d.n_base_images,
        }
    }
}

impl TaskConfig {
    pub fn to_spec(&self, seed: u64) -> TaskSpec {
        let classes = 1 + self.n_base + self.n_novel;
        let budgets = self.pixels_per_class.clone().unwrap_or_else(|| {
            fitted_long_tail(
                self.image_height * self.image_width,
                self.long_tail_ratio,
                classes,
            )
        });
        TaskSpec {
            feature_dim: self.feature_dim,
            n_base: self.n_base,
            n_novel: self.n_novel,
            similarity: self.similarity.clone(),
            noise_std: self.noise_std,
            image_height: self.image_height,
            image_width: self.image_width,
            pixels_per_class: budgets,
            n_support_images: self.n_support_images,
            n_query_images: self.n_query_images,
            n_base_images: self.n_base_images,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainingConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for BaseTrainingConfig {
    fn default() -> Self {
        BaseTrainingConfig {
            epochs: 80,
            lr: 0.5,
        }
    }
}

/// Runs one adaptation per lambda value when non-empty.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda: Vec<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(RunConfig, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok((cfg, config_hash(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.arms.is_empty() {
            return Err(CliError::Config("arms list is empty".into()));
        }
        self.task
            .to_spec(self.seed)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.adaptation
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.base_training.epochs == 0 || self.base_training.lr <= 0.0 {
            return Err(CliError::Config(
                "base training needs epochs >= 1 and lr > 0".into(),
            ));
        }
        Ok(())
    }

    /// Hash of the serialized form, for configs built in code.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        config_hash(text.as_bytes())
    }
}

/// FNV-1a over the raw config bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let text = r#"
            seed = 7
            output_dir = "runs/demo"
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.adaptation.epochs, 800);
        assert_eq!(cfg.task.feature_dim, 32);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let text = "seed = 1\nnot_a_key = 2\n";
        let err = toml::from_str::<RunConfig>(text).unwrap_err();
        assert!(err.to_string().contains("not_a_key"));
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
            seed = 3
            arms = ["transition", "classifier-only"]

            [task]
            feature_dim = 16
            n_base = 2
            n_novel = 2
            image_height = 8
            image_width = 8
            long_tail_ratio = 0.5

            [[task.similarity]]
            novel_class = 3
            anchor_class = 1
            cosine = 0.9

            [adaptation]
            epochs = 100
            lr = 0.05
            t_pi = 10

            [adaptation.merge]
            mode = "raw-sum"
            gamma = 0.5

            [sweep]
            lambda = [0.0, 1.0, 4.0]
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.arms.len(), 2);
        assert_eq!(cfg.task.similarity[0].cosine, 0.9);
        assert_eq!(cfg.sweep.lambda, vec![0.0, 1.0, 4.0]);
        let spec = cfg.task.to_spec(cfg.seed);
        assert_eq!(spec.pixels_per_class.iter().sum::<usize>(), 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = config_hash(b"seed = 1");
        let b = config_hash(b"seed = 1");
        let c = config_hash(b"seed = 2");
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
