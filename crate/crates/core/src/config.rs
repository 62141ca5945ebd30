//! Run configuration: one TOML file with `[features]`, `[model]`, `[loss]`,
//! `[train]` and `[eval]` sections. Unknown keys are rejected; missing keys
//! take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::features::{PrepOptions, DEFAULT_FRAME_RATE, DEFAULT_N_MELS, DEFAULT_SAMPLE_RATE};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Environment variable consulted for the seed when neither the command line
/// nor the config file sets one.
pub const SEED_ENV: &str = "SPKSTYLE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub frame_rate: u32,
    /// Directory of impulse-response WAV files; relative to the manifest.
    pub rir_dir: Option<PathBuf>,
    pub rirs_per_utt: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: DEFAULT_SAMPLE_RATE,
            n_mels: DEFAULT_N_MELS,
            frame_rate: DEFAULT_FRAME_RATE,
            rir_dir: None,
            rirs_per_utt: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        ProbeSection { hidden: p.hidden, layers: p.layers, epochs: p.epochs, batch_size: p.batch_size, lr: p.lr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_target: usize,
    pub n_nontarget: usize,
    pub probe: ProbeSection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_target: 10_000, n_nontarget: 10_000, probe: ProbeSection::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The resolved configuration as TOML, with the effective seed filled in.
    pub fn echo(&self, seed: u64) -> String {
        let mut c = self.clone();
        c.seed = Some(seed);
        toml::to_string(&c).expect("config serializes")
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        model.n_speakers = model.n_speakers.max(2);
        model.validate()?;
        if self.model.n_mels != self.features.n_mels {
            return Err(Error::Config(format!(
                "model.n_mels {} differs from features.n_mels {}",
                self.model.n_mels, self.features.n_mels
            )));
        }
        self.train.validate(&model, &self.loss)?;
        if self.eval.probe.layers == 0 || self.eval.probe.hidden == 0 || self.eval.probe.batch_size == 0 {
            return Err(Error::Config("eval.probe sizes must be positive".into()));
        }
        Ok(())
    }

    /// Command line first, then the config file, then the environment, then 0.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64> {
        if let Some(s) = cli.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn probe(&self, seed: u64) -> ProbeConfig {
        let p = &self.eval.probe;
        ProbeConfig { hidden: p.hidden, layers: p.layers, epochs: p.epochs, batch_size: p.batch_size, lr: p.lr, seed }
    }

    pub fn prep_options(&self, seed: u64, base_dir: &Path) -> PrepOptions {
        PrepOptions {
            n_mels: self.features.n_mels,
            frame_rate: self.features.frame_rate,
            sample_rate: self.features.sample_rate,
            rir_dir: self.features.rir_dir.as_ref().map(|d| if d.is_absolute() { d.clone() } else { base_dir.join(d) }),
            rirs_per_utt: self.features.rirs_per_utt,
            seed,
            exec: self.train.exec,
        }
    }
}
