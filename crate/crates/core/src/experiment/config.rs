//! Experiment configuration: JSON with a versioned schema, unknown keys
//! rejected. Presets carry the default hyperparameters of each benchmark.

use crate::data::StreamKind;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ScoreMode};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MethodConfig {
    /// Adaptive factor selection through the stick-breaking posterior.
    #[default]
    IbpWf,
    /// Fixed growth schedule: task t activates factors
    /// [0, initial_factors + t * growth_per_task).
    ConstWf { initial_factors: usize, growth_per_task: usize },
    /// Sequentially fine-tuned plain MLP with one shared global head.
    NaiveFinetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    /// Factor truncation K, shared by every layer.
    pub truncation: usize,
    /// IBP concentration.
    pub alpha: f64,
}

fn default_entropy_samples() -> usize {
    500
}
fn default_entropy_ensemble() -> usize {
    100
}
fn default_eval_batch() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Test examples sampled per split for entropy summaries; 0 disables.
    #[serde(default = "default_entropy_samples")]
    pub entropy_samples_per_split: usize,
    /// Ensemble size M for predictive entropy.
    #[serde(default = "default_entropy_ensemble")]
    pub entropy_ensemble: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Score determination for reported accuracies and oracle features.
    #[serde(default)]
    pub score_mode: ScoreMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            entropy_samples_per_split: default_entropy_samples(),
            entropy_ensemble: default_entropy_ensemble(),
            eval_batch: default_eval_batch(),
            score_mode: ScoreMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub benchmark: StreamKind,
    pub tasks: usize,
    pub seed: u64,
    #[serde(default)]
    pub method: MethodConfig,
    pub architecture: ArchConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    /// Optional data directory; the --data flag and IBPWF_DATA_DIR override
    /// and fall back respectively.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn classes_per_task(&self) -> usize {
        match self.benchmark {
            StreamKind::SplitMnist => 2,
            StreamKind::PermutedMnist => 10,
        }
    }

    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            hidden: self.architecture.hidden.clone(),
            classes_per_task: self.classes_per_task(),
            truncation: self.architecture.truncation,
            alpha: self.architecture.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.tasks == 0 {
            return Err(Error::Config("tasks must be at least 1".into()));
        }
        if self.benchmark == StreamKind::SplitMnist && self.tasks > 5 {
            return Err(Error::Config("split_mnist supports at most 5 tasks".into()));
        }
        if self.architecture.hidden.is_empty() || self.architecture.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be nonempty and positive".into()));
        }
        if self.architecture.truncation == 0 {
            return Err(Error::Config("truncation must be positive".into()));
        }
        if !(self.architecture.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        self.train.validate()?;
        if let MethodConfig::ConstWf { initial_factors, growth_per_task } = self.method {
            if initial_factors == 0 {
                return Err(Error::Config("initial_factors must be positive".into()));
            }
            let needed = initial_factors + (self.tasks - 1) * growth_per_task;
            if needed > self.architecture.truncation {
                return Err(Error::Config(format!(
                    "const_wf needs {needed} factors by the last task, truncation is {}",
                    self.architecture.truncation
                )));
            }
        }
        if self.evaluation.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        if self.evaluation.entropy_ensemble == 0 {
            return Err(Error::Config("entropy_ensemble must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::DataIo { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Five binary digit-pair tasks, one hidden layer of 400.
    pub fn split_mnist() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            benchmark: StreamKind::SplitMnist,
            tasks: 5,
            seed: 1,
            method: MethodConfig::IbpWf,
            architecture: ArchConfig { hidden: vec![400], truncation: 400, alpha: 100.0 },
            train: TrainConfig {
                epochs_expand: 10,
                epochs_finetune: 5,
                batch_size: 32,
                learning_rate: 1e-3,
                kappa: 0.5,
                temperature: 2.0 / 3.0,
                mc_samples: 1,
                grad_clip: 10.0,
                kl_scale: Default::default(),
                kl_series_terms: 10,
            },
            evaluation: EvalConfig::default(),
            data_dir: None,
        }
    }

    /// Five permuted 10-way tasks at desk scale.
    pub fn permuted_mnist_reduced() -> ExperimentConfig {
        ExperimentConfig {
            benchmark: StreamKind::PermutedMnist,
            tasks: 5,
            architecture: ArchConfig { hidden: vec![400, 400], truncation: 500, alpha: 300.0 },
            train: TrainConfig {
                epochs_expand: 15,
                epochs_finetune: 5,
                batch_size: 64,
                learning_rate: 1e-3,
                kappa: 0.5,
                temperature: 2.0 / 3.0,
                mc_samples: 1,
                grad_clip: 10.0,
                kl_scale: Default::default(),
                kl_series_terms: 10,
            },
            ..Self::split_mnist()
        }
    }

    /// The full ten-task benchmark at width 1000.
    pub fn permuted_mnist_full() -> ExperimentConfig {
        ExperimentConfig {
            tasks: 10,
            architecture: ArchConfig { hidden: vec![1000, 1000], truncation: 1000, alpha: 700.0 },
            ..Self::permuted_mnist_reduced()
        }
    }
}
