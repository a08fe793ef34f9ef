//! Content-feature ("latent") extractors behind one interface.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Utterance};
use crate::error::{Error, Result};
use crate::external::run_template;
use crate::features::dump::{read_dump, write_dump, DumpKind};
use crate::features::{FeatureStats, MelAnalyzer, MelConfig, MelSpectrogram};
use crate::matrix::Matrix;
use crate::nn::graph::softmax_rows;
use crate::nn::optim::sgd_step;
use crate::nn::{Graph, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSequence {
    pub values: Matrix,
    pub extractor_id: String,
    pub frame_period_ms: f64,
}

impl LatentSequence {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames() == 0 {
            return Err(Error::invalid(format!(
                "{} latents have no frames",
                self.extractor_id
            )));
        }
        if !self.values.all_finite() {
            return Err(Error::invalid(format!(
                "{} latents are not finite",
                self.extractor_id
            )));
        }
        Ok(())
    }
}

/// Whether rows are probability vectors (PPG-like) or free-valued.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    Simplex,
    Unconstrained,
}

pub trait ExtractorBackend: Send + Sync {
    fn extractor_id(&self) -> &str;

    fn dim(&self) -> usize;

    fn frame_period_ms(&self) -> f64;

    fn kind(&self) -> LatentKind {
        LatentKind::Unconstrained
    }

    /// Raw extraction. Callers should go through [`extract`], which checks
    /// the result against the declared dimension.
    fn extract_utterance(&self, u: &Utterance) -> Result<Matrix>;

    /// Extraction straight from a mel spectrogram, for backends that work on
    /// mel frames. `None` means the backend needs a waveform.
    fn extract_mel(&self, _m: &MelSpectrogram) -> Option<Result<Matrix>> {
        None
    }

    /// Serializable description from which the backend can be rebuilt.
    fn spec(&self) -> ExtractorSpec;
}

fn finish(backend: &dyn ExtractorBackend, values: Matrix) -> Result<LatentSequence> {
    if values.cols() != backend.dim() {
        return Err(Error::DimensionMismatch(format!(
            "extractor {} declared dim {} but produced {}",
            backend.extractor_id(),
            backend.dim(),
            values.cols()
        )));
    }
    let l = LatentSequence {
        values,
        extractor_id: backend.extractor_id().to_string(),
        frame_period_ms: backend.frame_period_ms(),
    };
    l.validate()?;
    Ok(l)
}

pub fn extract(u: &Utterance, backend: &dyn ExtractorBackend) -> Result<LatentSequence> {
    if u.sample_rate != crate::audio::DEFAULT_SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "extractor input must be 16 kHz, got {} Hz",
            u.sample_rate
        )));
    }
    let min = (backend.frame_period_ms() * u.sample_rate as f64 / 1000.0).round() as usize;
    if u.samples.len() < min.max(1) {
        return Err(Error::invalid(format!(
            "utterance {} ({} samples) is shorter than one {} ms frame",
            u.utterance_id,
            u.samples.len(),
            backend.frame_period_ms()
        )));
    }
    let values = backend.extract_utterance(u)?;
    finish(backend, values)
}

/// Mel-domain extraction when the backend supports it, `None` otherwise.
pub fn extract_from_mel(
    m: &MelSpectrogram,
    backend: &dyn ExtractorBackend,
) -> Option<Result<LatentSequence>> {
    backend
        .extract_mel(m)
        .map(|r| r.and_then(|v| finish(backend, v)))
}

/// Number of mel frames a latent sequence maps to.
pub fn aligned_frames(latent_frames: usize, latent_period_ms: f64, mel_period_ms: f64) -> usize {
    ((latent_frames as f64 * latent_period_ms / mel_period_ms).round() as usize).max(1)
}

/// Nearest-frame resampling of latents onto the mel frame grid.
pub fn align_to_grid(l: &LatentSequence, mel_period_ms: f64) -> Matrix {
    let n = l.frames();
    let target = aligned_frames(n, l.frame_period_ms, mel_period_ms);
    if target == n {
        return l.values.clone();
    }
    let idx: Vec<usize> = (0..target)
        .map(|i| {
            let t = i as f64 * mel_period_ms / l.frame_period_ms;
            (t.round() as usize).min(n - 1)
        })
        .collect();
    l.values.select_rows(&idx)
}

/// Clamps to non-negative and renormalizes each row to sum 1. Rows that
/// clamp to all zeros become uniform.
pub fn project_to_simplex_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let cols = out.cols();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        for v in r.iter_mut() {
            *v = v.max(0.0);
        }
        let s: f64 = r.iter().sum();
        if s > 0.0 {
            r.iter_mut().for_each(|v| *v /= s);
        } else {
            r.iter_mut().for_each(|v| *v = 1.0 / cols as f64);
        }
    }
    out
}

fn check_mel(m: &MelSpectrogram, cfg: &MelConfig, id: &str) -> Result<()> {
    if m.n_mels != cfg.n_mels || m.hop_size != cfg.hop_size || m.sample_rate != cfg.sample_rate {
        return Err(Error::DimensionMismatch(format!(
            "extractor {id} expects {}-bin mels at hop {}, got {} bins at hop {}",
            cfg.n_mels, cfg.hop_size, m.n_mels, m.hop_size
        )));
    }
    Ok(())
}

/// Returns log-mel frames unchanged.
pub struct IdentityExtractor {
    analyzer: MelAnalyzer,
}

impl IdentityExtractor {
    pub const ID: &'static str = "mel";

    pub fn new(cfg: &MelConfig) -> Result<Self> {
        Ok(Self {
            analyzer: MelAnalyzer::new(cfg)?,
        })
    }
}

impl ExtractorBackend for IdentityExtractor {
    fn extractor_id(&self) -> &str {
        Self::ID
    }

    fn dim(&self) -> usize {
        self.analyzer.config().n_mels
    }

    fn frame_period_ms(&self) -> f64 {
        self.analyzer.config().frame_period_ms()
    }

    fn extract_utterance(&self, u: &Utterance) -> Result<Matrix> {
        Ok(self.analyzer.analyze(u)?.values)
    }

    fn extract_mel(&self, m: &MelSpectrogram) -> Option<Result<Matrix>> {
        Some(check_mel(m, self.analyzer.config(), Self::ID).map(|_| m.values.clone()))
    }

    fn spec(&self) -> ExtractorSpec {
        ExtractorSpec::Mel {
            mel: self.analyzer.config().clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyPpgConfig {
    pub hidden: usize,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for ToyPpgConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 400,
            step_size: 0.5,
            seed: 0,
        }
    }
}

/// One-hidden-layer frame classifier over normalized log-mel frames whose
/// softmax outputs serve as phonetic posteriorgrams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPpg {
    pub mel: MelConfig,
    pub stats: FeatureStats,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl ToyPpg {
    pub const ID: &'static str = "toy-ppg";

    pub fn n_phones(&self) -> usize {
        self.w2.cols()
    }

    pub fn posteriors(&self, frames: &Matrix) -> Matrix {
        let x = self.stats.normalize(frames);
        let mut h = x.matmul(&self.w1);
        for i in 0..h.rows() {
            for (v, b) in h.row_mut(i).iter_mut().zip(self.b1.row(0)) {
                *v = (*v + b).tanh();
            }
        }
        let mut z = h.matmul(&self.w2);
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(self.b2.row(0)) {
                *v += b;
            }
        }
        softmax_rows(&z, false)
    }

    pub fn classify(&self, frames: &Matrix) -> Vec<usize> {
        self.posteriors(frames)
            .iter_rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

pub struct ToyPpgExtractor {
    model: ToyPpg,
    analyzer: MelAnalyzer,
}

impl ToyPpgExtractor {
    pub fn new(model: ToyPpg) -> Result<Self> {
        Ok(Self {
            analyzer: MelAnalyzer::new(&model.mel)?,
            model,
        })
    }

    pub fn model(&self) -> &ToyPpg {
        &self.model
    }
}

impl ExtractorBackend for ToyPpgExtractor {
    fn extractor_id(&self) -> &str {
        ToyPpg::ID
    }

    fn dim(&self) -> usize {
        self.model.n_phones()
    }

    fn frame_period_ms(&self) -> f64 {
        self.model.mel.frame_period_ms()
    }

    fn kind(&self) -> LatentKind {
        LatentKind::Simplex
    }

    fn extract_utterance(&self, u: &Utterance) -> Result<Matrix> {
        Ok(self.model.posteriors(&self.analyzer.analyze(u)?.values))
    }

    fn extract_mel(&self, m: &MelSpectrogram) -> Option<Result<Matrix>> {
        Some(check_mel(m, &self.model.mel, ToyPpg::ID).map(|_| self.model.posteriors(&m.values)))
    }

    fn spec(&self) -> ExtractorSpec {
        ExtractorSpec::ToyPpg(self.model.clone())
    }
}

/// Trains the toy PPG classifier with full-batch gradient descent on
/// softmax cross-entropy.
pub fn train_toy_ppg(
    frames: &Matrix,
    labels: &[usize],
    n_phones: usize,
    mel: &MelConfig,
    cfg: &ToyPpgConfig,
) -> Result<ToyPpg> {
    if frames.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} frames but {} labels",
            frames.rows(),
            labels.len()
        )));
    }
    if frames.cols() != mel.n_mels {
        return Err(Error::DimensionMismatch(format!(
            "frames have {} bins, mel config has {}",
            frames.cols(),
            mel.n_mels
        )));
    }
    if n_phones < 2 {
        return Err(Error::invalid("toy PPG needs at least two phones"));
    }
    let mut counts = vec![0usize; n_phones];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("label {l} outside 0..{n_phones}")))? += 1;
    }
    if let Some(p) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("phone {p} has no training frames")));
    }

    let stats = FeatureStats::fit([frames], mel.n_mels);
    let x = stats.normalize(frames);
    let mut target = Matrix::zeros(labels.len(), n_phones);
    for (i, &l) in labels.iter().enumerate() {
        target.set(i, l, 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "hidden", mel.n_mels, cfg.hidden, true, &mut rng);
    let l2 = Linear::new(&mut store, "output", cfg.hidden, n_phones, true, &mut rng);
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let h = l1.forward(&mut g, &store, xv);
        let h = g.tanh(h);
        let z = l2.forward(&mut g, &store, h);
        let loss = g.cross_entropy_logits(z, &target);
        let grads = g.backward(loss);
        sgd_step(&mut store, &grads, cfg.step_size);
    }
    let get = |n: &str| store.value(store.id(n).expect("toy ppg parameter")).clone();
    Ok(ToyPpg {
        mel: mel.clone(),
        stats,
        w1: get("hidden.weight"),
        b1: get("hidden.bias"),
        w2: get("output.weight"),
        b2: get("output.bias"),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyQuantizedConfig {
    pub codebook_size: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for ToyQuantizedConfig {
    fn default() -> Self {
        Self {
            codebook_size: 32,
            max_iterations: 100,
            seed: 0,
        }
    }
}

/// k-means codebook over log-mel frames; each frame is replaced by its
/// nearest centroid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyQuantized {
    pub mel: MelConfig,
    pub codebook: Matrix,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl ToyQuantized {
    pub const ID: &'static str = "toy-vq";

    pub fn nearest(&self, frame: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.codebook.iter_rows().enumerate() {
            let d = sq_dist(frame, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    pub fn codes(&self, frames: &Matrix) -> Vec<usize> {
        frames.iter_rows().map(|r| self.nearest(r)).collect()
    }

    pub fn quantize(&self, frames: &Matrix) -> Matrix {
        self.codebook.select_rows(&self.codes(frames))
    }
}

pub fn train_toy_quantized(
    mels: &[MelSpectrogram],
    mel: &MelConfig,
    cfg: &ToyQuantizedConfig,
) -> Result<ToyQuantized> {
    let k = cfg.codebook_size;
    if k < 2 {
        return Err(Error::invalid("codebook size must be at least 2"));
    }
    let mut rows: Vec<&[f64]> = Vec::new();
    for m in mels {
        check_mel(m, mel, ToyQuantized::ID)?;
        rows.extend(m.values.iter_rows());
    }
    if k > rows.len() {
        return Err(Error::invalid(format!(
            "codebook size {k} exceeds the {} available frames",
            rows.len()
        )));
    }
    // seed centroids from distinct frames, in first-seen order before shuffling
    let mut seen = BTreeSet::new();
    let mut distinct: Vec<&[f64]> = Vec::new();
    for r in &rows {
        let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            distinct.push(r);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    distinct.shuffle(&mut rng);
    let dim = mel.n_mels;
    let mut codebook = Matrix::zeros(k, dim);
    for i in 0..k {
        // fewer distinct frames than k: reuse them cyclically
        codebook
            .row_mut(i)
            .copy_from_slice(distinct[i % distinct.len()]);
    }
    let mut model = ToyQuantized {
        mel: mel.clone(),
        codebook,
    };
    let mut assign: Vec<usize> = vec![usize::MAX; rows.len()];
    for _ in 0..cfg.max_iterations {
        let mut changed = false;
        for (a, r) in assign.iter_mut().zip(&rows) {
            let c = model.nearest(r);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (&a, r) in assign.iter().zip(&rows) {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                for (dst, s) in model.codebook.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n as f64;
                }
            }
        }
    }
    Ok(model)
}

pub struct ToyQuantizedExtractor {
    model: ToyQuantized,
    analyzer: MelAnalyzer,
}

impl ToyQuantizedExtractor {
    pub fn new(model: ToyQuantized) -> Result<Self> {
        Ok(Self {
            analyzer: MelAnalyzer::new(&model.mel)?,
            model,
        })
    }

    pub fn model(&self) -> &ToyQuantized {
        &self.model
    }
}

impl ExtractorBackend for ToyQuantizedExtractor {
    fn extractor_id(&self) -> &str {
        ToyQuantized::ID
    }

    fn dim(&self) -> usize {
        self.model.mel.n_mels
    }

    fn frame_period_ms(&self) -> f64 {
        self.model.mel.frame_period_ms()
    }

    fn extract_utterance(&self, u: &Utterance) -> Result<Matrix> {
        Ok(self.model.quantize(&self.analyzer.analyze(u)?.values))
    }

    fn extract_mel(&self, m: &MelSpectrogram) -> Option<Result<Matrix>> {
        Some(
            check_mel(m, &self.model.mel, ToyQuantized::ID).map(|_| self.model.quantize(&m.values)),
        )
    }

    fn spec(&self) -> ExtractorSpec {
        ExtractorSpec::ToyQuantized(self.model.clone())
    }
}

/// Runs an external program that writes a latent dump.
///
/// The command template may use `{wav}` (16 kHz input) and `{out}` (dump
/// base path the program must write, see [`write_latent`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandExtractor {
    pub extractor_id: String,
    pub command: String,
    pub dim: usize,
    pub frame_period_ms: f64,
    #[serde(default = "unconstrained")]
    pub kind: LatentKind,
}

fn unconstrained() -> LatentKind {
    LatentKind::Unconstrained
}

impl ExtractorBackend for CommandExtractor {
    fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn frame_period_ms(&self) -> f64 {
        self.frame_period_ms
    }

    fn kind(&self) -> LatentKind {
        self.kind
    }

    fn extract_utterance(&self, u: &Utterance) -> Result<Matrix> {
        let dir = tempfile::tempdir().map_err(|e| Error::io("<tempdir>", e))?;
        let wav = dir.path().join("in.wav");
        let out = dir.path().join("latent");
        write_wav(&wav, u.sample_rate, &u.samples)?;
        run_template(
            &self.command,
            &[
                ("wav", &wav.to_string_lossy()),
                ("out", &out.to_string_lossy()),
            ],
        )?;
        let l = read_latent(&out)?;
        if l.extractor_id != self.extractor_id {
            return Err(Error::ExtractorMismatch {
                expected: self.extractor_id.clone(),
                found: l.extractor_id,
            });
        }
        Ok(l.values)
    }

    fn spec(&self) -> ExtractorSpec {
        ExtractorSpec::Command(self.clone())
    }
}

/// Persistable description of an extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ExtractorSpec {
    Mel { mel: MelConfig },
    ToyPpg(ToyPpg),
    ToyQuantized(ToyQuantized),
    Command(CommandExtractor),
}

impl ExtractorSpec {
    pub fn build(&self) -> Result<Arc<dyn ExtractorBackend>> {
        Ok(match self {
            Self::Mel { mel } => Arc::new(IdentityExtractor::new(mel)?),
            Self::ToyPpg(m) => Arc::new(ToyPpgExtractor::new(m.clone())?),
            Self::ToyQuantized(m) => Arc::new(ToyQuantizedExtractor::new(m.clone())?),
            Self::Command(c) => Arc::new(c.clone()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Default, Clone)]
pub struct ExtractorRegistry {
    backends: BTreeMap<String, Arc<dyn ExtractorBackend>>,
}

impl ExtractorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, backend: Arc<dyn ExtractorBackend>) {
        self.backends
            .insert(backend.extractor_id().to_string(), backend);
    }

    pub fn ids(&self) -> Vec<String> {
        self.backends.keys().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn ExtractorBackend>> {
        self.backends
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownExtractor {
                requested: id.to_string(),
                available: self.ids(),
            })
    }
}

pub fn write_latent(base: &Path, l: &LatentSequence) -> Result<()> {
    write_dump(
        base,
        &l.values,
        DumpKind::Latent {
            extractor_id: l.extractor_id.clone(),
            frame_period_ms: l.frame_period_ms,
        },
    )
}

pub fn read_latent(base: &Path) -> Result<LatentSequence> {
    match read_dump(base)? {
        (
            values,
            DumpKind::Latent {
                extractor_id,
                frame_period_ms,
            },
        ) => Ok(LatentSequence {
            values,
            extractor_id,
            frame_period_ms,
        }),
        _ => Err(Error::invalid(format!(
            "{} is not a latent dump",
            PathBuf::from(base).display()
        ))),
    }
}
