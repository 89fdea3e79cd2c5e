//! TOML run configuration. Every section is optional; command-line flags
//! override task, factors, seed and counts.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use scenegen::augment::AugmentConfig;
use scenegen::policy::TrainConfig;
use scenegen::randomize::RandomizationConfig;
use scenegen::sim::{TaskKind, TaskSpec};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    /// Scripted seed demonstrations recorded before augmentation.
    pub seed_demos: usize,
    pub seed_demo_seed: u64,
    /// Attempt budget as a multiple of the requested episode count.
    pub max_attempts_per_episode: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self { seed_demos: 10, seed_demo_seed: 1000, max_attempts_per_episode: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub rollouts: usize,
    pub max_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { rollouts: 50, max_steps: 400 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Task definition file; overrides `--task` when set. Relative paths
    /// resolve against the config file's directory.
    pub task_file: Option<PathBuf>,
    pub generation: GenerationSection,
    pub randomization: RandomizationConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(f), Some(dir)) = (&cfg.task_file, path.parent()) {
            if f.is_relative() {
                cfg.task_file = Some(dir.join(f));
            }
        }
        cfg.randomization.validate().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn task(&self, name: &str) -> Result<Arc<TaskSpec>, CliError> {
        if let Some(path) = &self.task_file {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let spec = TaskSpec::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            return Ok(Arc::new(spec));
        }
        let kind: TaskKind = name.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
        Ok(Arc::new(TaskSpec::builtin(kind)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(AppConfig::from_toml("").unwrap(), AppConfig::default());
    }

    #[test]
    fn partial_sections() {
        let cfg = AppConfig::from_toml(
            "[train]\nepochs = 3\nhidden = [16]\n[randomization]\nheight_range = [-0.02, 0.02]\n[eval]\nrollouts = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.hidden, vec![16]);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.randomization.height_range, [-0.02, 0.02]);
        assert_eq!(cfg.eval.rollouts, 7);
        assert_eq!(cfg.eval.max_steps, 400);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        assert!(matches!(AppConfig::from_toml("[generation]\nseeds = 3\n"), Err(CliError::Usage(_))));
        assert!(matches!(AppConfig::from_toml("[train]\noptimizer = \"lbfgs\"\n"), Err(CliError::Usage(_))));
    }

    #[test]
    fn unknown_task_is_usage_error() {
        assert!(matches!(AppConfig::default().task("juggle"), Err(CliError::Usage(_))));
        assert_eq!(AppConfig::default().task("stack").unwrap().kind, TaskKind::Stack);
    }
}
