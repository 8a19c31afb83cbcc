//! JSON run configurations. Unknown keys are rejected everywhere so that a
//! typo in an experiment file fails loudly instead of silently falling back
//! to a default.

use std::fs;
use std::path::Path;

use ofnet_core::flow::FlowParams;
use ofnet_core::model::{NetworkConfig, TrainConfig, Variant};
use ofnet_core::phantom::{Corruption, PhantomConfig, Preset, DEFAULT_NOISE_SIGMA};
use ofnet_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// File name of the resolved configuration every command writes.
pub const RESOLVED_CONFIG: &str = "config.json";

/// Reads a JSON document, or the type's defaults when no path is given.
pub fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("configuration serializes") + "\n"
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

/// Settings of `generate`: how many phantom sequences and how they vary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub count: usize,
    /// Cycled over the sequences in order.
    pub presets: Vec<Preset>,
    /// Draw per-sequence geometry around the preset instead of using it verbatim.
    pub jitter: bool,
    pub size: usize,
    pub n_frames: usize,
    pub noise_sigma: f64,
    pub background_texture: bool,
    /// Sequence `s` is generated from seed `seed + s`.
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            count: 3,
            presets: Preset::ALL.to_vec(),
            jitter: true,
            size: 64,
            n_frames: 16,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            background_texture: true,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if self.presets.is_empty() {
            return Err(Error::Config("presets must not be empty".into()));
        }
        (0..self.count).try_for_each(|s| self.phantom(s).validate())
    }

    pub fn sequence_seed(&self, s: usize) -> u64 {
        self.seed.wrapping_add(s as u64)
    }

    pub fn phantom(&self, s: usize) -> PhantomConfig {
        let preset = self.presets[s % self.presets.len()];
        let seed = self.sequence_seed(s);
        let base = if self.jitter {
            PhantomConfig::sampled(preset, seed)
        } else {
            PhantomConfig::preset(preset, seed)
        };
        PhantomConfig {
            n_frames: self.n_frames,
            noise_sigma: self.noise_sigma,
            background_texture: self.background_texture,
            ..base.resized(self.size)
        }
    }
}

/// Everything needed to rebuild, train and run one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Unet,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()
    }

    /// Temporal half-window actually used at inference.
    pub fn window(&self) -> usize {
        if self.variant.aggregates() {
            self.train.k
        } else {
            0
        }
    }

    pub fn flow(&self) -> &FlowParams {
        &self.train.flow
    }
}

/// Settings of `corrupt-test`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptConfig {
    /// Frame to corrupt; the middle frame when absent.
    pub frame: Option<usize>,
    pub mode: Corruption,
}

impl Default for CorruptConfig {
    fn default() -> Self {
        CorruptConfig {
            frame: None,
            mode: Corruption::ContrastDrop,
        }
    }
}
