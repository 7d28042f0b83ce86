//! Experiment configuration files.
//!
//! A config is a TOML document. Unknown keys are rejected at every level.
//!
//! ```toml
//! out_dir = "runs/default"      # every output lands below this directory
//! seeds = [0, 1, 2, 3, 4]       # one run per seed; the summary averages them
//! case = "F"                    # stage-wise ablation case A-F, F is the full cycle
//! n_iterations = 1              # stage-3/stage-4 rounds, used by case F only
//! source_video_fraction = 0.0   # share of labeled source videos added to the source domain
//!
//! # exactly one data source:
//! dataset = "data/bench.bin"    # a file written by `cycda generate`
//! # or
//! [benchmark]                   # generated per seed; omitted keys take defaults
//! classes = 12
//!
//! [stages]                      # omitted keys take defaults
//! stage3_strategy = "source_ce_contrastive"
//! aggregation = "thresh_then_avg"
//! [stages.epochs]
//! stage1 = 30
//! ```
//!
//! With `[benchmark]`, each seed generates its own dataset from that seed,
//! so the seeds play the role of independent splits. With `dataset`, every
//! seed trains on the same file.

use std::path::{Path, PathBuf};

use cycda::pipeline::{AblationCase, StageConfig};
use cycda::synthdata::BenchmarkSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_case")]
    pub case: AblationCase,
    #[serde(default = "default_iterations")]
    pub n_iterations: usize,
    #[serde(default)]
    pub source_video_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSpec>,
    #[serde(default)]
    pub stages: StageConfig,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_case() -> AblationCase {
    AblationCase::F
}

fn default_iterations() -> usize {
    1
}

impl ExperimentConfig {
    /// Default benchmark and stages, writing to `out_dir`.
    pub fn with_benchmark(out_dir: impl Into<PathBuf>, benchmark: BenchmarkSpec) -> Self {
        Self {
            out_dir: out_dir.into(),
            seeds: default_seeds(),
            case: default_case(),
            n_iterations: default_iterations(),
            source_video_fraction: 0.0,
            dataset: None,
            benchmark: Some(benchmark),
            stages: StageConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.message())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks every field that can be checked without running anything,
    /// including that a referenced dataset file exists.
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |msg: String| Err(CliError::Validation(msg));
        match (&self.dataset, &self.benchmark) {
            (Some(_), Some(_)) => return invalid("config: set either `dataset` or `[benchmark]`, not both".into()),
            (None, None) => return invalid("config: one of `dataset` or `[benchmark]` is required".into()),
            (Some(path), None) if !path.is_file() => {
                return invalid(format!("config: dataset {} does not exist", path.display()))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return invalid("config: `seeds` must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return invalid("config: `seeds` contains duplicates".into());
        }
        if self.n_iterations == 0 {
            return invalid("config: `n_iterations` must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.source_video_fraction) {
            return invalid(format!(
                "config: `source_video_fraction` must be in [0, 1], got {}",
                self.source_video_fraction
            ));
        }
        self.stages
            .validate()
            .map_err(|e| CliError::Validation(format!("config: stages: {e}")))?;
        if let Some(spec) = &self.benchmark {
            spec.validate()
                .map_err(|e| CliError::Validation(format!("config: benchmark: {e}")))?;
            check_dims(&self.stages, spec)?;
        }
        Ok(())
    }
}

/// The model must read the benchmark's frames and predict its classes.
pub fn check_dims(stages: &StageConfig, spec: &BenchmarkSpec) -> Result<(), CliError> {
    let m = &stages.model;
    for (field, model, data) in [
        ("input_dim", m.input_dim, spec.input_dim),
        ("classes", m.classes, spec.classes),
        ("frames", m.frames, spec.frames),
    ] {
        if model != data {
            return Err(CliError::Validation(format!(
                "config: stages.model.{field} is {model} but the benchmark has {data}"
            )));
        }
    }
    Ok(())
}
