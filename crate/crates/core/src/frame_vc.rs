//! Frame-based any-to-one decoder from latent sequences to mel spectrograms.
//!
//! Each output frame is predicted from a window of aligned latent frames and
//! the previous mel frame, so the output has exactly as many frames as the
//! latent sequence has after alignment to the mel grid.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::audio::Utterance;
use crate::error::{Error, Result};
use crate::extractors::{
    align_to_grid, aligned_frames, extract, ExtractorBackend, ExtractorRegistry, LatentSequence,
};
use crate::features::{FeatureStats, MelAnalyzer, MelConfig, MelSpectrogram};
use crate::matrix::Matrix;
use crate::nn::{transfer, Adam, AdamConfig, Checkpoint, Graph, Linear, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameVcConfig {
    /// Latent frames on each side of the current one fed to the decoder.
    pub context: usize,
    pub hidden: usize,
    pub prenet_dim: usize,
    pub seed: u64,
}

impl Default for FrameVcConfig {
    fn default() -> Self {
        Self {
            context: 1,
            hidden: 128,
            prenet_dim: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameVcTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for FrameVcTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            learning_rate: 2e-3,
            clip_norm: Some(1.0),
            normalize: true,
            seed: 0,
        }
    }
}

/// Aligned latents and the mel frames they should reconstruct.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub latents: Matrix,
    pub mel: Matrix,
}

#[derive(Clone, Debug)]
struct Layers {
    prenet: Linear,
    hidden1: Linear,
    hidden2: Linear,
    output: Linear,
    skip: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: FrameVcConfig,
    extractor_id: String,
    target_speaker_id: String,
    latent_period_ms: f64,
    frame_ratio: f64,
    mel: MelConfig,
    latent_stats: FeatureStats,
    mel_stats: FeatureStats,
    steps_trained: usize,
}

const CHECKPOINT_KIND: &str = "frame_vc";

#[derive(Clone, Debug)]
pub struct FrameVcModel {
    pub config: FrameVcConfig,
    pub extractor_id: String,
    pub target_speaker_id: String,
    pub latent_period_ms: f64,
    pub mel: MelConfig,
    pub latent_stats: FeatureStats,
    pub mel_stats: FeatureStats,
    pub steps_trained: usize,
    pub params: ParamStore,
    layers: Layers,
}

impl PartialEq for FrameVcModel {
    fn eq(&self, other: &Self) -> bool {
        self.meta() == other.meta() && self.params == other.params
    }
}

impl FrameVcModel {
    pub fn new(
        cfg: &FrameVcConfig,
        extractor_id: &str,
        target_speaker_id: &str,
        latent_period_ms: f64,
        mel: &MelConfig,
        latent_stats: FeatureStats,
        mel_stats: FeatureStats,
    ) -> Result<Self> {
        mel.validate()?;
        if latent_stats.dim() == 0 || mel_stats.dim() != mel.n_mels {
            return Err(Error::DimensionMismatch(format!(
                "frame decoder needs latent dim > 0 and {} mel stats, got {} and {}",
                mel.n_mels,
                latent_stats.dim(),
                mel_stats.dim()
            )));
        }
        if !(latent_period_ms > 0.0) {
            return Err(Error::invalid("latent frame period must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let d = latent_stats.dim();
        let window = d * (2 * cfg.context + 1);
        let layers = Layers {
            prenet: Linear::new(
                &mut params,
                "decoder.prenet",
                mel.n_mels,
                cfg.prenet_dim,
                true,
                &mut rng,
            ),
            hidden1: Linear::new(
                &mut params,
                "decoder.hidden1",
                window + cfg.prenet_dim,
                cfg.hidden,
                true,
                &mut rng,
            ),
            hidden2: Linear::new(
                &mut params,
                "decoder.hidden2",
                cfg.hidden,
                cfg.hidden,
                true,
                &mut rng,
            ),
            output: Linear::new(
                &mut params,
                "decoder.output",
                cfg.hidden,
                mel.n_mels,
                true,
                &mut rng,
            ),
            skip: Linear::new(&mut params, "decoder.skip", d, mel.n_mels, false, &mut rng),
        };
        if d == mel.n_mels {
            // latents live in mel space: start from a copy of the centre frame
            *params.value_mut(layers.skip.weight) = Matrix::identity(d);
        }
        Ok(Self {
            config: cfg.clone(),
            extractor_id: extractor_id.to_string(),
            target_speaker_id: target_speaker_id.to_string(),
            latent_period_ms,
            mel: mel.clone(),
            latent_stats,
            mel_stats,
            steps_trained: 0,
            params,
            layers,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_stats.dim()
    }

    /// Mel frames per latent frame after grid alignment.
    pub fn frame_ratio(&self) -> f64 {
        self.latent_period_ms / self.mel.frame_period_ms()
    }

    pub fn parameter_hash(&self) -> String {
        self.params.content_hash()
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            extractor_id: self.extractor_id.clone(),
            target_speaker_id: self.target_speaker_id.clone(),
            latent_period_ms: self.latent_period_ms,
            frame_ratio: self.frame_ratio(),
            mel: self.mel.clone(),
            latent_stats: self.latent_stats.clone(),
            mel_stats: self.mel_stats.clone(),
            steps_trained: self.steps_trained,
        }
    }

    /// `[x(t-c) .. x(t+c)]` per row, replicating edge frames.
    fn context_window(&self, x: &Matrix) -> Matrix {
        let c = self.config.context as isize;
        let (n, d) = (x.rows(), x.cols());
        let mut out = Matrix::zeros(n, d * (2 * c as usize + 1));
        for t in 0..n {
            let row = out.row_mut(t);
            for (k, off) in (-c..=c).enumerate() {
                let src = (t as isize + off).clamp(0, n as isize - 1) as usize;
                row[k * d..(k + 1) * d].copy_from_slice(x.row(src));
            }
        }
        out
    }

    /// Normalized frames for normalized window rows, centre latents and
    /// previous frames.
    fn forward(&self, g: &mut Graph, window: Var, centre: Var, prev: Var) -> Var {
        let s = &self.params;
        let l = &self.layers;
        let p = l.prenet.forward(g, s, prev);
        let p = g.relu(p);
        let h = g.concat_cols(&[window, p]);
        let h = l.hidden1.forward(g, s, h);
        let h = g.relu(h);
        let h = l.hidden2.forward(g, s, h);
        let h = g.relu(h);
        let y = l.output.forward(g, s, h);
        let skip = l.skip.forward(g, s, centre);
        g.add(y, skip)
    }

    fn check_pair(&self, p: &FramePair) -> Result<()> {
        if p.latents.cols() != self.latent_dim() || p.mel.cols() != self.mel.n_mels {
            return Err(Error::DimensionMismatch(format!(
                "frame decoder is {}->{}, pair is {}->{}",
                self.latent_dim(),
                self.mel.n_mels,
                p.latents.cols(),
                p.mel.cols()
            )));
        }
        if p.latents.rows() != p.mel.rows() || p.mel.rows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "aligned latents have {} frames but the mel has {}",
                p.latents.rows(),
                p.mel.rows()
            )));
        }
        Ok(())
    }

    fn loss_graph(&self, p: &FramePair) -> (Graph, Var) {
        let xn = self.latent_stats.normalize(&p.latents);
        let yn = self.mel_stats.normalize(&p.mel);
        let mut prev = Matrix::zeros(yn.rows(), yn.cols());
        for t in 1..yn.rows() {
            prev.row_mut(t).copy_from_slice(yn.row(t - 1));
        }
        let mut g = Graph::new();
        let window = g.input(self.context_window(&xn));
        let centre = g.input(xn);
        let prev = g.input(prev);
        let y = self.forward(&mut g, window, centre, prev);
        let loss = g.l1_loss(y, &yn);
        (g, loss)
    }

    /// Teacher-forced L1 (normalized units) and gradients for one pair.
    pub fn loss_and_gradients(&self, p: &FramePair) -> Result<(f64, HashMap<ParamId, Matrix>)> {
        self.check_pair(p)?;
        let (g, loss) = self.loss_graph(p);
        Ok((g.value(loss).get(0, 0), g.backward(loss)))
    }

    pub fn teacher_forced_loss(&self, pairs: &[FramePair]) -> Result<f64> {
        let mut total = 0.0;
        for p in pairs {
            self.check_pair(p)?;
            let (g, loss) = self.loss_graph(p);
            total += g.value(loss).get(0, 0);
        }
        Ok(total / pairs.len().max(1) as f64)
    }

    /// Autoregressive decoding of latents already on the mel grid.
    pub fn decode_aligned(&self, aligned: &Matrix) -> Result<MelSpectrogram> {
        if aligned.cols() != self.latent_dim() {
            return Err(Error::DimensionMismatch(format!(
                "frame decoder expects {}-dim latents, got {}",
                self.latent_dim(),
                aligned.cols()
            )));
        }
        if aligned.rows() == 0 || !aligned.all_finite() {
            return Err(Error::invalid("latents must be non-empty and finite"));
        }
        let xn = self.latent_stats.normalize(aligned);
        let window = self.context_window(&xn);
        let n = xn.rows();
        let mut out = Matrix::zeros(n, self.mel.n_mels);
        let mut prev = Matrix::zeros(1, self.mel.n_mels);
        for t in 0..n {
            let mut g = Graph::new();
            let w = g.input(window.slice_rows(t, t + 1));
            let c = g.input(xn.slice_rows(t, t + 1));
            let p = g.input(prev);
            let y = self.forward(&mut g, w, c, p);
            prev = g.value(y).clone();
            out.row_mut(t).copy_from_slice(prev.row(0));
        }
        Ok(MelSpectrogram::new(
            self.mel_stats.denormalize(&out),
            &self.mel,
        ))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(
            &self.params,
            serde_json::to_value(self.meta())?,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("not a frame decoder checkpoint: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {}",
                meta.kind
            )));
        }
        let mut model = Self::new(
            &meta.config,
            &meta.extractor_id,
            &meta.target_speaker_id,
            meta.latent_period_ms,
            &meta.mel,
            meta.latent_stats,
            meta.mel_stats,
        )?;
        let report = transfer(&mut model.params, ckpt);
        if report.copied() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint does not match its declared architecture: {:?}",
                report.skipped()
            )));
        }
        model.steps_trained = meta.steps_trained;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Aligned latents and target mel for one utterance, trimmed to a common
/// frame count.
pub fn frame_pair(
    u: &Utterance,
    backend: &dyn ExtractorBackend,
    analyzer: &MelAnalyzer,
) -> Result<FramePair> {
    let mel = analyzer.analyze(u)?.values;
    let l = extract(u, backend)?;
    let aligned = align_to_grid(&l, analyzer.config().frame_period_ms());
    let n = aligned.rows().min(mel.rows());
    Ok(FramePair {
        latents: aligned.slice_rows(0, n),
        mel: mel.slice_rows(0, n),
    })
}

#[derive(Clone, Debug)]
pub struct FrameVcTrained {
    pub model: FrameVcModel,
    /// Mean teacher-forced L1 of each step's minibatch.
    pub log: Vec<f64>,
}

pub fn initial_frame_model(
    pairs: &[FramePair],
    backend: &dyn ExtractorBackend,
    target_speaker_id: &str,
    mel: &MelConfig,
    model_cfg: &FrameVcConfig,
    train_cfg: &FrameVcTrainConfig,
) -> Result<FrameVcModel> {
    let (latent_stats, mel_stats) = if train_cfg.normalize {
        (
            FeatureStats::fit(pairs.iter().map(|p| &p.latents), backend.dim()),
            FeatureStats::fit(pairs.iter().map(|p| &p.mel), mel.n_mels),
        )
    } else {
        (
            FeatureStats::identity(backend.dim()),
            FeatureStats::identity(mel.n_mels),
        )
    };
    FrameVcModel::new(
        model_cfg,
        backend.extractor_id(),
        target_speaker_id,
        backend.frame_period_ms(),
        mel,
        latent_stats,
        mel_stats,
    )
}

/// Trains the decoder to reconstruct each utterance's mel from its latents.
/// The extractor is only read, never updated.
pub fn train_frame_decoder(
    utterances: &[Utterance],
    backend: &dyn ExtractorBackend,
    mel: &MelConfig,
    model_cfg: &FrameVcConfig,
    train_cfg: &FrameVcTrainConfig,
) -> Result<FrameVcTrained> {
    let first = utterances
        .first()
        .ok_or_else(|| Error::invalid("frame decoder needs at least one utterance"))?;
    if let Some(u) = utterances.iter().find(|u| u.speaker_id != first.speaker_id) {
        return Err(Error::invalid(format!(
            "frame decoder trains on one speaker, found {} and {}",
            first.speaker_id, u.speaker_id
        )));
    }
    let analyzer = MelAnalyzer::new(mel)?;
    let pairs = utterances
        .iter()
        .map(|u| frame_pair(u, backend, &analyzer))
        .collect::<Result<Vec<_>>>()?;
    train_frame_decoder_on_pairs(
        &pairs,
        backend,
        &first.speaker_id,
        mel,
        model_cfg,
        train_cfg,
    )
}

pub fn train_frame_decoder_on_pairs(
    pairs: &[FramePair],
    backend: &dyn ExtractorBackend,
    target_speaker_id: &str,
    mel: &MelConfig,
    model_cfg: &FrameVcConfig,
    train_cfg: &FrameVcTrainConfig,
) -> Result<FrameVcTrained> {
    if pairs.is_empty() {
        return Err(Error::invalid("frame decoder needs at least one utterance"));
    }
    let mut model =
        initial_frame_model(pairs, backend, target_speaker_id, mel, model_cfg, train_cfg)?;
    for p in pairs {
        model.check_pair(p)?;
    }
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: train_cfg.learning_rate,
            clip_norm: train_cfg.clip_norm,
            ..Default::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let batch = train_cfg.batch_size.clamp(1, pairs.len());
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(train_cfg.steps);
    for step in 0..train_cfg.steps {
        let mut grads: HashMap<ParamId, Matrix> = HashMap::new();
        let mut loss = 0.0;
        for _ in 0..batch {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled");
            let (l, g) = model.loss_and_gradients(&pairs[i])?;
            loss += l / batch as f64;
            for (id, mut gm) in g {
                gm.scale_assign(1.0 / batch as f64);
                match grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&gm),
                    None => {
                        grads.insert(id, gm);
                    }
                }
            }
        }
        adam.step(&mut model.params, &grads);
        model.steps_trained += 1;
        if step % 100 == 0 {
            debug!(step, l1 = loss, "frame decoder step");
        }
        log.push(loss);
    }
    if !model.params.all_finite() {
        return Err(Error::invalid("frame decoder training diverged"));
    }
    Ok(FrameVcTrained { model, log })
}

/// Decodes externally produced latents.
pub fn decode_latents(model: &FrameVcModel, l: &LatentSequence) -> Result<MelSpectrogram> {
    if l.extractor_id != model.extractor_id {
        return Err(Error::ExtractorMismatch {
            expected: model.extractor_id.clone(),
            found: l.extractor_id.clone(),
        });
    }
    if (l.frame_period_ms - model.latent_period_ms).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "latents at {} ms, decoder trained on {} ms",
            l.frame_period_ms, model.latent_period_ms
        )));
    }
    l.validate()?;
    model.decode_aligned(&align_to_grid(l, model.mel.frame_period_ms()))
}

/// Any-to-one conversion: extract with the model's extractor, then decode.
pub fn convert_a2o(
    model: &FrameVcModel,
    u: &Utterance,
    registry: &ExtractorRegistry,
) -> Result<MelSpectrogram> {
    let backend = registry.get(&model.extractor_id)?;
    let l = extract(u, backend.as_ref())?;
    decode_latents(model, &l)
}

/// Mel frames the decoder produces for `latent_frames` input frames.
pub fn expected_frames(model: &FrameVcModel, latent_frames: usize) -> usize {
    aligned_frames(
        latent_frames,
        model.latent_period_ms,
        model.mel.frame_period_ms(),
    )
}
