use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Utterance;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub hop_size: usize,
    pub win_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            hop_size: 256,
            win_size: 1024,
            n_mels: 80,
            fmin: 80.0,
            fmax: 7600.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn n_freqs(&self) -> usize {
        self.win_size / 2 + 1
    }

    /// Frame period in milliseconds.
    pub fn frame_period_ms(&self) -> f64 {
        1000.0 * self.hop_size as f64 / self.sample_rate as f64
    }

    /// Frames produced by center-padded analysis of `num_samples` samples.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        1 + num_samples / self.hop_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_size == 0 || self.win_size < 2 || self.n_mels == 0 {
            return Err(Error::invalid(
                "hop_size, win_size and n_mels must be positive",
            ));
        }
        if !(self.fmin >= 0.0
            && self.fmin < self.fmax
            && self.fmax <= self.sample_rate as f64 / 2.0)
        {
            return Err(Error::invalid(format!(
                "mel range {}..{} Hz invalid for {} Hz audio",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::invalid("log_floor must be positive"));
        }
        Ok(())
    }
}

/// Log-mel energies, `frames x n_mels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub values: Matrix,
    pub hop_size: usize,
    pub win_size: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(values: Matrix, cfg: &MelConfig) -> Self {
        Self {
            n_mels: values.cols(),
            values,
            hop_size: cfg.hop_size,
            win_size: cfg.win_size,
            sample_rate: cfg.sample_rate,
        }
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels x n_freqs`, peak weight 1.
pub fn mel_filterbank(cfg: &MelConfig) -> Matrix {
    let n_freqs = cfg.n_freqs();
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.win_size as f64;
    let mut fb = Matrix::zeros(cfg.n_mels, n_freqs);
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_freqs {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb.set(m, k, w);
        }
    }
    fb
}

pub fn hann_window(n: usize) -> Vec<f64> {
    // periodic Hann, the usual choice for STFT analysis
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Short-time Fourier analysis with center zero-padding of `win/2` samples.
pub(crate) struct Stft {
    pub cfg: MelConfig,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &MelConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cfg: cfg.clone(),
            window: hann_window(cfg.win_size),
            forward: planner.plan_fft_forward(cfg.win_size),
            inverse: planner.plan_fft_inverse(cfg.win_size),
        }
    }

    /// One-sided spectra, one `Vec` of `n_freqs` bins per frame.
    pub fn analyze(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let win = self.cfg.win_size;
        let hop = self.cfg.hop_size;
        let pad = win / 2;
        let frames = self.cfg.num_frames(samples.len());
        let mut buf = vec![Complex::new(0.0, 0.0); win];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = (t * hop) as isize - pad as isize;
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let s = if idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize]
                } else {
                    0.0
                };
                *b = Complex::new(s * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            out.push(buf[..self.cfg.n_freqs()].to_vec());
        }
        out
    }

    /// Windowed overlap-add inverse producing exactly `len` samples.
    pub fn synthesize(&self, spectra: &[Vec<Complex<f64>>], len: usize) -> Vec<f64> {
        let win = self.cfg.win_size;
        let hop = self.cfg.hop_size;
        let pad = win / 2;
        let total = pad + len + win;
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex::new(0.0, 0.0); win];
        let half = self.cfg.n_freqs();
        for (t, spec) in spectra.iter().enumerate() {
            buf[..half].copy_from_slice(spec);
            for k in half..win {
                buf[k] = spec[win - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * hop;
            for i in 0..win {
                if start + i >= total {
                    break;
                }
                let w = self.window[i];
                acc[start + i] += buf[i].re / win as f64 * w;
                norm[start + i] += w * w;
            }
        }
        (0..len)
            .map(|i| {
                let j = i + pad;
                if norm[j] > 1e-8 {
                    acc[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Reusable analyzer holding the FFT plan and filterbank for one config.
pub struct MelAnalyzer {
    stft: Stft,
    filterbank: Matrix,
}

impl MelAnalyzer {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            stft: Stft::new(cfg),
            filterbank: mel_filterbank(cfg),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.stft.cfg
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.filterbank
    }

    pub fn analyze_samples(&self, samples: &[f64]) -> Result<MelSpectrogram> {
        if samples.is_empty() {
            return Err(Error::invalid("cannot analyze an empty signal"));
        }
        let cfg = &self.stft.cfg;
        let spectra = self.stft.analyze(samples);
        let mut values = Matrix::zeros(spectra.len(), cfg.n_mels);
        for (t, spec) in spectra.iter().enumerate() {
            let power: Vec<f64> = spec.iter().map(|c| c.norm_sqr()).collect();
            for m in 0..cfg.n_mels {
                let e: f64 = self
                    .filterbank
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                values.set(t, m, e.max(cfg.log_floor).ln());
            }
        }
        Ok(MelSpectrogram::new(values, cfg))
    }

    pub fn analyze(&self, u: &Utterance) -> Result<MelSpectrogram> {
        let cfg = &self.stft.cfg;
        if u.sample_rate != cfg.sample_rate {
            return Err(Error::invalid(format!(
                "utterance {} is at {} Hz, analysis expects {} Hz",
                u.utterance_id, u.sample_rate, cfg.sample_rate
            )));
        }
        self.analyze_samples(&u.samples)
    }

    pub(crate) fn stft(&self) -> &Stft {
        &self.stft
    }
}

pub fn mel_analyze(u: &Utterance, cfg: &MelConfig) -> Result<MelSpectrogram> {
    MelAnalyzer::new(cfg)?.analyze(u)
}

/// Per-dimension mean/std normalizer fitted on training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Matrix>, dim: usize) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for m in mats {
            for r in m.iter_rows() {
                for ((s, q), v) in sum.iter_mut().zip(&mut sq).zip(r) {
                    *s += v;
                    *q += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n as f64 - m * m).max(0.0);
                // near-constant dims keep unit scale instead of exploding
                if var.sqrt() < 1e-3 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        out
    }

    pub fn denormalize(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + mu;
            }
        }
        out
    }
}
