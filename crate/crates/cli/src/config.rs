//! Run configuration: a JSON file whose every field can be overridden by a
//! command-line flag.

use std::path::{Path, PathBuf};

use facestress::dataset::DatasetOptions;
use facestress::stats::{SmoothingOperator, DEFAULT_THRESHOLDS};
use facestress::traineval::ExperimentConfig;
use facestress::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsOptions {
    pub smoothing: SmoothingOperator,
    pub thresholds: Vec<f64>,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions { smoothing: SmoothingOperator::Spline { lambda: None }, thresholds: DEFAULT_THRESHOLDS.to_vec() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub preset: Option<String>,
    pub n_subjects: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub features: DatasetOptions,
    pub stats: StatsOptions,
    pub experiment: ExperimentConfig,
    pub synth: SynthOptions,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", p.display())))
            }
            None => Ok(RunConfig::default()),
        }
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data_dir.as_deref().ok_or_else(|| Error::Config("no input directory (use --in or data_dir)".into()))
    }

    /// Explicit output directory, else `$FACESTRESS_OUT/<default_name>`,
    /// else `runs/<default_name>`.
    pub fn out_dir(&self, default_name: &str) -> PathBuf {
        match &self.out_dir {
            Some(p) => p.clone(),
            None => std::env::var_os("FACESTRESS_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from).join(default_name),
        }
    }

    /// Seed recorded with every run.
    pub fn master_seed(&self) -> u64 {
        self.synth.seed.unwrap_or(self.experiment.seed)
    }
}

/// Resolved configuration written into each run directory.
#[derive(Serialize)]
pub struct ResolvedRun<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub config: &'a RunConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"experiment": {"seed": 9, "n_folds": 3}}"#).unwrap();
        assert_eq!(c.experiment.seed, 9);
        assert_eq!(c.experiment.n_folds, 3);
        assert_eq!(c.experiment.train.batch_size, 32);
        assert_eq!(c.features, DatasetOptions::default());
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
