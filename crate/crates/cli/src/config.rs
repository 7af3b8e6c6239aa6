//! TOML experiment configuration.
//!
//! ```toml
//! splits = [0.5, 0.25, 0.25]
//! output_dir = "runs/demo"
//!
//! [task]
//! num_instances = 2000
//! k = 20
//! d = 50
//! seed = 7
//! reward_noise = 0.1
//! logger_quality = 0.6
//! logging = "deterministic"
//!
//! [train]
//! kind = "cdc"
//! learning_rate = 0.1
//! epochs = 50
//! batch_size = 100
//! early_stop_patience = 5
//! init = "logger"
//! ```

use std::path::{Path, PathBuf};

use cfl_core::{TaskSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

fn default_splits() -> [f64; 3] {
    [0.5, 0.25, 0.25]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    /// Train / validation / test fractions.
    #[serde(default = "default_splits")]
    pub splits: [f64; 3],
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = crate::read_text(path)?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.task.validate()?;
        self.train.validate()?;
        let s = self.splits;
        if s.iter().any(|f| !(*f >= 0.0 && f.is_finite()))
            || s[0] <= 0.0
            || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(CliError::Config(format!(
                "splits must be non-negative, sum to 1 and give train a positive share, got {s:?}"
            )));
        }
        Ok(())
    }

    /// `--out` if given, else `output_dir`.
    pub fn output_dir(&self, flag: Option<&Path>) -> Result<PathBuf, CliError> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .ok_or_else(|| {
                CliError::Usage("no output directory: pass --out or set output_dir".into())
            })
    }
}
