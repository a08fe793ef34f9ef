//! Mel-spectrogram analysis, Griffin-Lim inversion and vocoder backends.

pub mod dump;
pub mod griffin_lim;
pub mod mel;
pub mod vocoder;

pub use griffin_lim::{griffin_lim, GriffinLim};
pub use mel::{mel_analyze, FeatureStats, MelAnalyzer, MelConfig, MelSpectrogram};
pub use vocoder::{vocode, CommandVocoder, GriffinLimVocoder, VocoderBackend, VocoderRegistry};
