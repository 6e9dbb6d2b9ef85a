use std::path::{Path, PathBuf};

use esgvol::market::{Frequency, SplitConfig};
use esgvol::model::{ModelConfig, SamplerConfig};
use esgvol::simgen::SimConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Input files. Relative paths resolve against the workdir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub news: PathBuf,
    pub prices: PathBuf,
    pub vocabulary: PathBuf,
    pub lexicon: PathBuf,
    pub tickers: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            news: "input/news.jsonl".into(),
            prices: "input/prices.csv".into(),
            vocabulary: "input/esg_vocabulary.csv".into(),
            lexicon: "input/sentiment_lexicon.csv".into(),
            tickers: "input/tickers.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingChoice {
    Hashed { dim: usize, seed: u64 },
    External { path: PathBuf },
}

impl Default for EmbeddingChoice {
    fn default() -> Self {
        Self::Hashed { dim: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds the sampler and the simulator.
    pub seed: u64,
    pub workdir: Option<PathBuf>,
    /// Label written to the metrics table.
    pub market: String,
    pub frequency: Frequency,
    /// News window length in periods.
    pub window: usize,
    pub horizons: Vec<usize>,
    pub min_samples: usize,
    pub split: SplitConfig,
    pub paths: Paths,
    pub embedding: EmbeddingChoice,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub sim: SimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            workdir: None,
            market: "SIM".into(),
            frequency: Frequency::Weekly,
            window: 1,
            horizons: vec![1, 2],
            min_samples: esgvol::market::DEFAULT_MIN_SAMPLES,
            split: SplitConfig { train_end: 90, val_end: 110 },
            paths: Paths::default(),
            embedding: EmbeddingChoice::default(),
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.window == 0 {
            return bad("window must be >= 1".into());
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return bad("horizons must be a non-empty list of values >= 1".into());
        }
        let mut sorted = self.horizons.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.horizons.len() {
            return bad("horizons must be distinct".into());
        }
        if self.split.val_end <= self.split.train_end {
            return bad(format!("split.val_end ({}) must exceed split.train_end ({})", self.split.val_end, self.split.train_end));
        }
        if let EmbeddingChoice::Hashed { dim: 0, .. } = self.embedding {
            return bad("embedding.dim must be >= 1".into());
        }
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.sampler.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    /// The sampler settings with the run seed applied.
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { seed: self.seed, ..self.sampler.clone() }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig { seed: self.seed, ..self.sim.clone() }
    }

    /// SHA-256 of the canonical JSON form; the workdir is excluded so moving a run keeps its hash.
    pub fn hash(&self) -> String {
        let canonical = PipelineConfig { workdir: None, ..self.clone() };
        esgvol::manifest::sha256_hex(serde_json::to_string(&canonical).unwrap().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<PipelineConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg: PipelineConfig = toml::from_str("seed = 3\n[sampler]\nburn_in = 10\n[embedding]\nkind = \"hashed\"\ndim = 32\nseed = 1\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.sampler.burn_in, 10);
        assert_eq!(cfg.sampler.thinning, SamplerConfig::default().thinning);
        assert_eq!(cfg.embedding, EmbeddingChoice::Hashed { dim: 32, seed: 1 });
        assert_eq!(cfg.sampler().seed, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        assert!(toml::from_str::<PipelineConfig>("sed = 3").is_err());
        let cfg = PipelineConfig { horizons: vec![0], ..PipelineConfig::default() };
        assert!(matches!(cfg.validate(), Err(CliError::Usage(_))));
    }

    #[test]
    fn hash_ignores_workdir() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { workdir: Some("/elsewhere".into()), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), PipelineConfig { seed: 8, ..a.clone() }.hash());
    }
}
