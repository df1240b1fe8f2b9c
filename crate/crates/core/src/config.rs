//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::SearchOptim;
use crate::bitops::{AmplitudeGranularity, BinarizeConfig};
use crate::data::DataFormat;
use crate::error::{Error, Location, Result};
use crate::search::ReductionConfig;
use crate::supernet::SupernetConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub path: PathBuf,
    pub format: DataFormat,
    /// Keep only the first `n` training images (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { path: PathBuf::from("data/mnist5k"), format: DataFormat::MnistIdx, train_limit: 0, test_limit: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceSection {
    /// Intermediate nodes per cell (M).
    pub nodes: usize,
    /// Initial operations per edge (K).
    pub operations: usize,
}

impl Default for SpaceSection {
    fn default() -> Self {
        SpaceSection { nodes: 4, operations: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinarizeChoice {
    None,
    Xnor,
    PcnnAmp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinarizeSection {
    pub mode: BinarizeChoice,
    /// Amplitude-loss weight; defaults by mode.
    pub theta: Option<f64>,
    pub granularity: AmplitudeGranularity,
}

impl Default for BinarizeSection {
    fn default() -> Self {
        BinarizeSection { mode: BinarizeChoice::PcnnAmp, theta: None, granularity: AmplitudeGranularity::PerLayer }
    }
}

impl BinarizeSection {
    pub fn resolve(&self) -> Option<BinarizeConfig> {
        let base = match self.mode {
            BinarizeChoice::None => return None,
            BinarizeChoice::Xnor => BinarizeConfig::xnor(),
            BinarizeChoice::PcnnAmp => BinarizeConfig::pcnn_amp(),
        };
        Some(BinarizeConfig { theta: self.theta.unwrap_or(base.theta), granularity: self.granularity, ..base })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Kernel worker threads; unset uses every CPU.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub data: DataSection,
    pub space: SpaceSection,
    pub supernet: SupernetConfig,
    pub search: ReductionConfig,
    pub optimizer: SearchOptim,
    pub binarize: BinarizeSection,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            threads: None,
            data: DataSection::default(),
            space: SpaceSection::default(),
            supernet: SupernetConfig::default(),
            search: ReductionConfig::default(),
            optimizer: SearchOptim::default(),
            binarize: BinarizeSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse { location: Location::Line(line), message: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.space.operations) {
            return Err(Error::config(format!("operations per edge must lie in 2..=8, got {}", self.space.operations)));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be at least 1"));
        }
        if self.space.nodes == 0 {
            return Err(Error::config("cells need at least one intermediate node"));
        }
        self.supernet.validate()?;
        self.search.validate()?;
        self.optimizer.validate()?;
        self.train.validate()?;
        if let Some(b) = self.binarize.resolve() {
            b.validate()?;
        }
        Ok(())
    }

    pub fn binarize_config(&self) -> Option<BinarizeConfig> {
        self.binarize.resolve()
    }

    /// Canonical text of everything that shapes a search run; a resumed
    /// search must present the same fingerprint.
    pub fn search_fingerprint(&self) -> String {
        let key = (
            self.seed,
            &self.data,
            &self.space,
            &self.supernet,
            &self.search,
            &self.optimizer,
            &self.binarize,
        );
        serde_json::to_string(&key).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Mode names accepted on the command line.
pub fn parse_binarize(name: &str) -> Result<BinarizeChoice> {
    match name {
        "none" | "fp" => Ok(BinarizeChoice::None),
        "xnor" => Ok(BinarizeChoice::Xnor),
        "pcnn-amp" | "pcnn" => Ok(BinarizeChoice::PcnnAmp),
        other => Err(Error::usage(format!("unknown binarization mode {other:?}"))),
    }
}
