use std::collections::BTreeMap;
use std::sync::Arc;

use super::dump::write_mel;
use super::griffin_lim::{GriffinLim, DEFAULT_GRIFFIN_LIM_SEED};
use super::mel::{MelConfig, MelSpectrogram};
use crate::audio::{read_wav, Utterance};
use crate::error::{Error, Result};
use crate::external::run_template;

/// Anything that turns a mel spectrogram into a waveform.
pub trait VocoderBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn sample_rate(&self) -> u32;

    fn synth(&self, m: &MelSpectrogram) -> Result<Vec<f64>>;
}

pub struct GriffinLimVocoder {
    inner: GriffinLim,
    pub iterations: usize,
    pub seed: u64,
}

impl GriffinLimVocoder {
    pub const ID: &'static str = "griffin-lim";

    pub fn new(cfg: &MelConfig, iterations: usize) -> Result<Self> {
        Ok(Self {
            inner: GriffinLim::new(cfg)?,
            iterations,
            seed: DEFAULT_GRIFFIN_LIM_SEED,
        })
    }
}

impl VocoderBackend for GriffinLimVocoder {
    fn backend_id(&self) -> &str {
        Self::ID
    }

    fn sample_rate(&self) -> u32 {
        self.inner.config().sample_rate
    }

    fn synth(&self, m: &MelSpectrogram) -> Result<Vec<f64>> {
        self.inner.reconstruct(m, self.iterations, self.seed)
    }
}

/// Hands the mel to an external program through the feature dump format.
///
/// The command template may use `{mel}` (dump base path, without extension)
/// and `{out}` (WAV path the program must write).
pub struct CommandVocoder {
    pub id: String,
    pub command: String,
    pub sample_rate: u32,
}

impl VocoderBackend for CommandVocoder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn synth(&self, m: &MelSpectrogram) -> Result<Vec<f64>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io("<tempdir>", e))?;
        let base = dir.path().join("mel");
        let out = dir.path().join("out.wav");
        write_mel(&base, m)?;
        run_template(
            &self.command,
            &[
                ("mel", &base.to_string_lossy()),
                ("out", &out.to_string_lossy()),
            ],
        )?;
        let (rate, samples) = read_wav(&out)?;
        if rate != self.sample_rate {
            return Err(Error::External(format!(
                "vocoder {} wrote {rate} Hz audio, expected {}",
                self.id, self.sample_rate
            )));
        }
        Ok(samples)
    }
}

#[derive(Default, Clone)]
pub struct VocoderRegistry {
    backends: BTreeMap<String, Arc<dyn VocoderBackend>>,
}

impl VocoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding only the Griffin-Lim fallback.
    pub fn with_griffin_lim(cfg: &MelConfig, iterations: usize) -> Result<Self> {
        let mut r = Self::new();
        r.register(Arc::new(GriffinLimVocoder::new(cfg, iterations)?));
        Ok(r)
    }

    pub fn register(&mut self, backend: Arc<dyn VocoderBackend>) {
        self.backends
            .insert(backend.backend_id().to_string(), backend);
    }

    pub fn ids(&self) -> Vec<String> {
        self.backends.keys().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn VocoderBackend>> {
        self.backends
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownVocoder {
                requested: id.to_string(),
                available: self.ids(),
            })
    }
}

/// Synthesizes a waveform and wraps it with the identifiers of `like`.
pub fn vocode(
    m: &MelSpectrogram,
    backend: &dyn VocoderBackend,
    like: &Utterance,
) -> Result<Utterance> {
    if backend.sample_rate() != m.sample_rate {
        return Err(Error::invalid(format!(
            "vocoder {} runs at {} Hz but the mel was analyzed at {} Hz",
            backend.backend_id(),
            backend.sample_rate(),
            m.sample_rate
        )));
    }
    let samples = backend.synth(m)?;
    Ok(like.with_samples(samples, m.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    #[test]
    fn unknown_backend_lists_registered() {
        let r = VocoderRegistry::with_griffin_lim(&MelConfig::default(), 4).unwrap();
        let err = r.get("pwg-x").err().unwrap();
        match &err {
            Error::UnknownVocoder { available, .. } => {
                assert_eq!(available, &vec!["griffin-lim".to_string()])
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err.to_string().contains("griffin-lim"));
    }

    #[test]
    fn griffin_lim_dispatch_matches_direct_call() {
        let cfg = MelConfig::default();
        let r = VocoderRegistry::with_griffin_lim(&cfg, 3).unwrap();
        let m = MelSpectrogram::new(Matrix::filled(6, cfg.n_mels, -3.0), &cfg);
        let like = Utterance::new("u", "s", "p", 16000, vec![0.0], "");
        let out = vocode(&m, r.get("griffin-lim").unwrap().as_ref(), &like).unwrap();
        let direct = crate::features::griffin_lim(&m, &cfg, 3, DEFAULT_GRIFFIN_LIM_SEED).unwrap();
        assert_eq!(out.samples, direct);
        assert!((out.samples.len() as i64 - 6 * 256).abs() <= 256);
    }

    #[test]
    fn command_backend_reads_back_wav() {
        // the "vocoder" ignores the mel and copies a prepared file
        let dir = tempfile::tempdir().unwrap();
        let canned = dir.path().join("canned.wav");
        crate::audio::write_wav(&canned, 16000, &[0.25; 512]).unwrap();
        let mut r = VocoderRegistry::new();
        r.register(Arc::new(CommandVocoder {
            id: "external".into(),
            command: format!("test -f {{mel}}.bin && cp '{}' {{out}}", canned.display()),
            sample_rate: 16000,
        }));
        let cfg = MelConfig::default();
        let m = MelSpectrogram::new(Matrix::filled(3, cfg.n_mels, -3.0), &cfg);
        let like = Utterance::new("u", "s", "p", 16000, vec![0.0], "");
        let out = vocode(&m, r.get("external").unwrap().as_ref(), &like).unwrap();
        assert_eq!(out.samples, vec![0.25; 512]);
    }
}
