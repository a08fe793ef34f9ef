//! Utterances, WAV I/O and band-limited resampling.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Half-width of the default 64-tap windowed-sinc kernel, in taps.
pub const RESAMPLE_HALF_TAPS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub prompt_id: String,
    pub sample_rate: u32,
    pub samples: Vec<f64>,
    pub transcript: String,
}

impl Utterance {
    pub fn new(
        utterance_id: impl Into<String>,
        speaker_id: impl Into<String>,
        prompt_id: impl Into<String>,
        sample_rate: u32,
        samples: Vec<f64>,
        transcript: impl Into<String>,
    ) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            speaker_id: speaker_id.into(),
            prompt_id: prompt_id.into(),
            sample_rate,
            samples,
            transcript: transcript.into(),
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Non-empty, finite, and within [-1, 1].
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::invalid(format!(
                "utterance {} has no samples",
                self.utterance_id
            )));
        }
        if let Some(i) = self
            .samples
            .iter()
            .position(|v| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(Error::invalid(format!(
                "utterance {} sample {i} is {} (outside [-1, 1])",
                self.utterance_id, self.samples[i]
            )));
        }
        Ok(())
    }

    /// Copy with new samples, keeping identifiers.
    pub fn with_samples(&self, samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            ..self.clone()
        }
    }
}

/// Reads a mono 16-bit PCM WAV file into `[-1, 1]` samples.
pub fn read_wav(path: &Path) -> Result<(u32, Vec<f64>)> {
    let wav_err = |message: String| Error::Wav {
        path: path.to_path_buf(),
        message,
    };
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(format!(
            "expected mono audio, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(format!(
            "expected 16-bit PCM, found {:?} {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(e.to_string()))?;
    Ok((spec.sample_rate, samples))
}

pub fn write_wav(path: &Path, sample_rate: u32, samples: &[f64]) -> Result<()> {
    let bytes = wav_bytes(sample_rate, samples)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encodes samples as an in-memory 16-bit mono WAV file.
pub fn wav_bytes(sample_rate: u32, samples: &[f64]) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let to_err = |e: hound::Error| Error::Wav {
            path: "<memory>".into(),
            message: e.to_string(),
        };
        let mut w = hound::WavWriter::new(&mut cursor, spec).map_err(to_err)?;
        for &s in samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(v).map_err(to_err)?;
        }
        w.finalize().map_err(to_err)?;
    }
    Ok(cursor.into_inner())
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// Equal rates return the samples untouched, which makes the operation
/// idempotent. Output length is `round(len * target / source)`.
pub fn resample(u: &Utterance, target_rate: u32) -> Result<Utterance> {
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if u.sample_rate < 8000 {
        return Err(Error::invalid(format!(
            "source sample rate {} is below 8000 Hz",
            u.sample_rate
        )));
    }
    if u.sample_rate == target_rate {
        return Ok(u.clone());
    }
    let samples = resample_samples(&u.samples, u.sample_rate, target_rate, RESAMPLE_HALF_TAPS);
    Ok(u.with_samples(samples, target_rate))
}

pub fn resample_samples(x: &[f64], from: u32, to: u32, half_taps: usize) -> Vec<f64> {
    let ratio = to as f64 / from as f64;
    let out_len = (x.len() as f64 * ratio).round() as usize;
    // cutoff relative to the input Nyquist; below 1 when downsampling
    let cutoff = ratio.min(1.0);
    let half_width = half_taps as f64 / cutoff;
    let n_in = x.len() as isize;
    (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - half_width).ceil() as isize;
            let hi = (t + half_width).floor() as isize;
            let mut acc = 0.0;
            for k in lo.max(0)..=hi.min(n_in - 1) {
                let d = t - k as f64;
                let w = 0.5 * (1.0 + (PI * d / half_width).cos());
                acc += x[k as usize] * cutoff * sinc(cutoff * d) * w;
            }
            acc.clamp(-1.0, 1.0)
        })
        .collect()
}

/// Snaps samples onto the 16-bit PCM grid so they survive a WAV round trip exactly.
pub fn quantize_pcm16(samples: &mut [f64]) {
    for s in samples {
        *s = (*s * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0;
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}
