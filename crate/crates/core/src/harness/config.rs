use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::TaskSpec;
use crate::tuners::TuneConfig;

/// Where a run gets its task data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSource {
    /// Generated on the fly from a `TaskSpec`.
    Spec(TaskSpec),
    /// A directory written by `gen-task`.
    Dataset(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv, ReportFormat::Json]
}

fn default_horizon() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub judge: PathBuf,
    pub task: TaskSource,
    pub tune: TuneConfig,
    pub output_dir: PathBuf,
    #[serde(default = "default_formats")]
    pub report_formats: Vec<ReportFormat>,
    /// Output positions compared by Δ_Output.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn wants(&self, format: ReportFormat) -> bool {
        self.report_formats.contains(&format)
    }

    /// Checks everything that can be checked before any file is read.
    pub fn validate(&self) -> Result<()> {
        self.tune.validate()?;
        for (what, path) in [("model", &self.model), ("judge", &self.judge)] {
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "{what} checkpoint {} not found",
                    path.display()
                )));
            }
        }
        if let TaskSource::Dataset(dir) = &self.task {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "dataset directory {} not found",
                    dir.display()
                )));
            }
        }
        if !(1..=2).contains(&self.horizon) {
            return Err(Error::Config(format!(
                "horizon {} outside 1..=2",
                self.horizon
            )));
        }
        Ok(())
    }
}
