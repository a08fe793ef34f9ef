//! TOML configuration shared by all subcommands. Every field has a default.

use std::path::Path;

use anyhow::{Context, Result};
use fac_core::corpus::SplitSizes;
use fac_core::extractors::{ToyPpgConfig, ToyQuantizedConfig};
use fac_core::features::MelConfig;
use fac_core::frame_vc::{FrameVcConfig, FrameVcTrainConfig};
use fac_core::pipelines::{ConvertOptions, MethodTrainConfig};
use fac_core::toy::ToyConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FacConfig {
    pub mel: MelConfig,
    pub split: SplitSizes,
    pub seq2seq: MethodTrainConfig,
    pub frame_vc: FrameVcSection,
    pub vocoder: VocoderSection,
    pub convert: ConvertOptions,
    pub asr: AsrSection,
    pub toy: ToySection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameVcSection {
    pub model: FrameVcConfig,
    pub train: FrameVcTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocoderSection {
    /// External command with `{mel}` and `{out}` placeholders; Griffin-Lim when unset.
    pub command: Option<String>,
    pub griffin_lim_iterations: usize,
}

impl Default for VocoderSection {
    fn default() -> Self {
        Self {
            command: None,
            griffin_lim_iterations: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrSection {
    /// Shell template with a `{wav}` placeholder; stdout is the transcript.
    pub command: Option<String>,
    /// Endpoint accepting `audio/wav` and answering `{"text": ...}`.
    pub url: Option<String>,
    pub parallelism: usize,
}

impl Default for AsrSection {
    fn default() -> Self {
        Self {
            command: None,
            url: None,
            parallelism: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub corpus: ToyConfig,
    pub split: SplitSizes,
    pub ppg: ToyPpgConfig,
    pub quantized: ToyQuantizedConfig,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            corpus: ToyConfig::default(),
            split: SplitSizes {
                train: 50,
                dev: 10,
                test: 0,
            },
            ppg: ToyPpgConfig::default(),
            quantized: ToyQuantizedConfig::default(),
        }
    }
}

impl FacConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
