//! Phase reconstruction from log-mel energies.
//!
//! Mel energies are mapped back to linear-frequency magnitudes through the
//! pseudo-inverse of the filterbank, then phases are refined by alternating
//! projections between the magnitude constraint and consistent STFTs.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::{MelAnalyzer, MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_GRIFFIN_LIM_SEED: u64 = 0x6c1f;

const NNLS_ITERATIONS: usize = 50;
const NNLS_FLOOR: f64 = 1e-12;

pub struct GriffinLim {
    analyzer: MelAnalyzer,
    /// `n_freqs x n_mels`
    inverse_filterbank: Matrix,
}

impl GriffinLim {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        let analyzer = MelAnalyzer::new(cfg)?;
        let fb = analyzer.filterbank();
        let dm = DMatrix::from_row_slice(fb.rows(), fb.cols(), fb.data());
        let pinv = dm
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::invalid(format!("filterbank pseudo-inverse failed: {e}")))?;
        let mut inverse_filterbank = Matrix::zeros(pinv.nrows(), pinv.ncols());
        for r in 0..pinv.nrows() {
            for c in 0..pinv.ncols() {
                inverse_filterbank.set(r, c, pinv[(r, c)]);
            }
        }
        Ok(Self {
            analyzer,
            inverse_filterbank,
        })
    }

    pub fn config(&self) -> &MelConfig {
        self.analyzer.config()
    }

    /// Linear magnitudes per frame recovered from log-mel energies.
    ///
    /// The pseudo-inverse solution is clipped to be non-negative and then
    /// refined with multiplicative non-negative least-squares updates.
    fn magnitudes(&self, m: &MelSpectrogram) -> Vec<Vec<f64>> {
        let fb = self.analyzer.filterbank();
        let power = m.values.map(f64::exp);
        // (frames x n_mels) · (n_mels x n_freqs)
        let mut lin = power
            .matmul_bt(&self.inverse_filterbank)
            .map(|p| p.max(NNLS_FLOOR));
        let numer = power.matmul(fb);
        for _ in 0..NNLS_ITERATIONS {
            let denom = lin.matmul_bt(fb).matmul(fb);
            for ((x, n), d) in lin
                .data_mut()
                .iter_mut()
                .zip(numer.data())
                .zip(denom.data())
            {
                *x *= n / d.max(1e-300);
            }
        }
        lin.iter_rows()
            .map(|r| r.iter().map(|p| p.sqrt()).collect())
            .collect()
    }

    /// Reconstructs `max(1, (frames - 1) * hop)` samples, which re-analyze to
    /// exactly `frames` frames.
    pub fn reconstruct(
        &self,
        m: &MelSpectrogram,
        iterations: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let cfg = self.config();
        if iterations == 0 {
            return Err(Error::invalid("griffin_lim needs at least one iteration"));
        }
        if m.n_mels != cfg.n_mels
            || m.hop_size != cfg.hop_size
            || m.win_size != cfg.win_size
            || m.sample_rate != cfg.sample_rate
        {
            return Err(Error::DimensionMismatch(format!(
                "mel ({} mels, hop {}, win {}, {} Hz) does not match vocoder config ({} mels, hop {}, win {}, {} Hz)",
                m.n_mels, m.hop_size, m.win_size, m.sample_rate,
                cfg.n_mels, cfg.hop_size, cfg.win_size, cfg.sample_rate
            )));
        }
        if m.frames() == 0 || !m.values.all_finite() {
            return Err(Error::invalid("mel must have at least one finite frame"));
        }
        let frames = m.frames();
        let len = ((frames - 1) * cfg.hop_size).max(1);
        let mags = self.magnitudes(m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spectra: Vec<Vec<Complex<f64>>> = mags
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&a| Complex::from_polar(a, rng.gen_range(-PI..PI)))
                    .collect()
            })
            .collect();
        let stft = self.analyzer.stft();
        let mut signal = stft.synthesize(&spectra, len);
        for _ in 1..iterations {
            let rebuilt = stft.analyze(&signal);
            for ((spec, target), est) in spectra.iter_mut().zip(&mags).zip(&rebuilt) {
                for ((s, &a), e) in spec.iter_mut().zip(target).zip(est) {
                    let n = e.norm();
                    *s = if n > 1e-12 {
                        e * (a / n)
                    } else {
                        Complex::new(a, 0.0)
                    };
                }
            }
            signal = stft.synthesize(&spectra, len);
        }
        for s in &mut signal {
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(signal)
    }
}

pub fn griffin_lim(
    m: &MelSpectrogram,
    cfg: &MelConfig,
    iterations: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    GriffinLim::new(cfg)?.reconstruct(m, iterations, seed)
}
