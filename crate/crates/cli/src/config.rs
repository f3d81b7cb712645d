use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tagnet::audio::MelConfig;
use tagnet::bench::TimingConfig;
use tagnet::dataset::{SynthConfig, DEFAULT_FRACTIONS};
use tagnet::train::TrainingConfig;
use tagnet::{Error, Result};

/// Contents of a `--config` JSON file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub tolerance: Option<f64>,
    pub split: Option<[f64; 3]>,
    pub training: Option<TrainingConfig>,
    pub mel: Option<MelConfig>,
    pub synth: Option<SynthConfig>,
    pub timing: Option<TimingConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings: flags over config file over defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub threads: usize,
    pub tolerance: f64,
    pub split: [f64; 3],
    pub training: TrainingConfig,
    pub mel: MelConfig,
    pub synth: SynthConfig,
    pub timing: TimingConfig,
}

impl RunConfig {
    pub fn resolve(file: FileConfig, out: PathBuf, seed: Option<u64>, threads: Option<usize>) -> Result<Self> {
        let seed = seed.or(file.seed).unwrap_or(0);
        let threads = threads.or(file.threads).unwrap_or(1);
        if threads == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        let mut training = file.training.unwrap_or_default();
        training.seed = seed;
        let mut synth = file.synth.unwrap_or_default();
        synth.seed = seed;
        let mut timing = file.timing.unwrap_or_default();
        timing.threads = threads;
        let cfg = RunConfig {
            out,
            seed,
            threads,
            tolerance: file.tolerance.unwrap_or(tagnet::arch::DEFAULT_TOLERANCE),
            split: file.split.unwrap_or(DEFAULT_FRACTIONS),
            training,
            mel: file.mel.unwrap_or_default(),
            synth,
            timing,
        };
        cfg.mel.validate()?;
        Ok(cfg)
    }
}
