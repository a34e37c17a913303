//! TOML run configuration shared by every subcommand.
//!
//! ```toml
//! seed = 7
//!
//! [synth]
//! scenes = 150
//! [synth.template]
//! width = 1024
//! height = 768
//!
//! [dataset]
//! min_instances = 10
//! augment_per_patch = 10
//!
//! [train]
//! epochs = 100
//! batch_size = 32
//! learning_rate = 0.001
//!
//! [segment]
//! threshold = 0.85
//!
//! [rank]
//! k = 10
//!
//! [serve]
//! addr = "127.0.0.1:8080"
//! workers = 1
//! [serve.tokens]
//! "token-a" = "annotator-a"
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use annoprop::classifier::TrainingMeta;
use annoprop::dataprep::DatasetConfig;
use annoprop::segmenter::DEFAULT_THRESHOLD;
use annoprop::synthgen::SceneSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub dataset: DatasetConfig,
    pub train: TrainSection,
    pub segment: SegmentSection,
    pub rank: RankSection,
    pub serve: ServeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub scenes: usize,
    pub template: SceneSpec,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            scenes: 150,
            template: SceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let m = TrainingMeta::default();
        TrainSection {
            epochs: m.epochs,
            batch_size: m.batch_size,
            learning_rate: m.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSection {
    pub threshold: f64,
}

impl Default for SegmentSection {
    fn default() -> Self {
        SegmentSection {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSection {
    pub k: usize,
}

impl Default for RankSection {
    fn default() -> Self {
        RankSection { k: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    pub workers: usize,
    /// Bearer token to annotator id.
    pub tokens: BTreeMap<String, String>,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            addr: "127.0.0.1:8080".into(),
            workers: 1,
            tokens: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("invalid config {}: {}", p.display(), e.message())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.synth.scenes == 0 {
            return usage("synth.scenes must be positive".into());
        }
        self.synth
            .template
            .validate()
            .map_err(|e| CliError::Usage(format!("synth.template: {e}")))?;
        self.dataset
            .validate()
            .map_err(|e| CliError::Usage(format!("dataset: {e}")))?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return usage("train needs positive epochs, batch_size and learning_rate".into());
        }
        if !(0.0..=1.0).contains(&self.segment.threshold) {
            return usage(format!("segment.threshold {} outside [0, 1]", self.segment.threshold));
        }
        if self.rank.k == 0 {
            return usage("rank.k must be positive".into());
        }
        if self.serve.workers == 0 {
            return usage("serve.workers must be positive".into());
        }
        if self.serve.tokens.iter().any(|(t, a)| t.is_empty() || a.is_empty()) {
            return usage("serve.tokens entries must be non-empty".into());
        }
        Ok(())
    }

    /// Applies a command-line seed over the file's seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.dataset.seed = self.seed;
        self
    }

    pub fn training_meta(&self) -> TrainingMeta {
        TrainingMeta {
            seed: self.seed,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
        }
    }
}
