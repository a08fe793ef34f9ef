//! Autoregressive attention encoder-decoder between feature sequences.
//!
//! Besides the usual Transformer encoder and decoder, the output layer has a
//! copy path: a position-aware attention over the (normalized) input frames
//! whose context is mixed linearly into every output frame. The stop logit
//! also sees how much of that attention falls on the last input frame.
//! With [`InitScheme::PassThrough`] the copy path is set up so the untrained
//! model reproduces its input exactly and stops after the last input frame.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::features::FeatureStats;
use crate::matrix::Matrix;
use crate::nn::graph::sigmoid;
use crate::nn::layers::sinusoidal_positions;
use crate::nn::{
    transfer, warmup_cosine, Adam, AdamConfig, Checkpoint, FeedForward, Graph, LayerNorm, Linear,
    MultiHeadAttention, ParamId, ParamStore, TransferReport, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Xavier,
    /// Output equals input frame by frame; requires `input_dim == output_dim`.
    PassThrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seq2seqConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub prenet_dim: usize,
    /// Longest sequence for which pass-through attention is guaranteed one-hot.
    pub max_positions: usize,
    pub init: InitScheme,
    /// Initial weight of "attention on the last input frame" in the stop logit.
    pub stop_end_prior: f64,
    pub seed: u64,
}

impl Default for Seq2seqConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 64,
            prenet_dim: 32,
            max_positions: 2048,
            init: InitScheme::Xavier,
            stop_end_prior: 10.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seq2seqTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    /// Learning rate at the last step, as a fraction of `learning_rate`,
    /// reached by cosine decay after warmup.
    pub final_lr_fraction: f64,
    pub clip_norm: Option<f64>,
    pub stop_pos_weight: f64,
    /// Half-width of uniform jitter added to teacher-forced decoder inputs
    /// (normalized units). Makes free-running decoding more robust.
    pub teacher_jitter: f64,
    /// Fit per-dimension normalizers on the training pairs.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for Seq2seqTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 2e-3,
            warmup_steps: 50,
            final_lr_fraction: 0.1,
            clip_norm: Some(1.0),
            stop_pos_weight: 5.0,
            teacher_jitter: 0.0,
            normalize: true,
            seed: 0,
        }
    }
}

pub const DEFAULT_STOP_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub input: Matrix,
    pub target: Matrix,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub stop: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.l1 + self.stop
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub l1: f64,
    pub stop: f64,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

#[derive(Clone, Debug)]
struct Layers {
    input: Linear,
    encoder: Vec<EncoderBlock>,
    prenet1: Linear,
    prenet2: Linear,
    decoder: Vec<DecoderBlock>,
    copy_query: ParamId,
    copy_query_pos: ParamId,
    copy_key: ParamId,
    copy_key_pos: ParamId,
    output: Linear,
    copy_output: ParamId,
    stop: Linear,
    stop_end: ParamId,
}

/// Smallest `pe(t)·pe(t) - pe(t)·pe(j)` over `1 <= |t - j| < max_positions`.
fn min_position_gap(dim: usize, max_positions: usize) -> f64 {
    let pe = sinusoidal_positions(max_positions.max(2), dim);
    let row0 = pe.row(0);
    let self_dot: f64 = row0.iter().map(|v| v * v).sum();
    (1..pe.rows())
        .map(|j| self_dot - row0.iter().zip(pe.row(j)).map(|(a, b)| a * b).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Score margin that makes `exp(-margin)` underflow to exactly zero.
const ONE_HOT_MARGIN: f64 = 1000.0;
const PASS_THROUGH_STOP_BIAS: f64 = -10.0;
const PASS_THROUGH_STOP_END: f64 = 20.0;

impl Layers {
    fn build(
        store: &mut ParamStore,
        cfg: &Seq2seqConfig,
        input_dim: usize,
        output_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.d_model;
        let input = Linear::new(store, "encoder.input", input_dim, d, true, rng);
        let encoder = (0..cfg.encoder_layers)
            .map(|i| {
                let p = format!("encoder.block{i}");
                EncoderBlock {
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.heads, rng),
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_dim, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                }
            })
            .collect();
        let prenet1 = Linear::new(
            store,
            "decoder.prenet1",
            output_dim,
            cfg.prenet_dim,
            true,
            rng,
        );
        let prenet2 = Linear::new(store, "decoder.prenet2", cfg.prenet_dim, d, true, rng);
        let decoder = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("decoder.block{i}");
                DecoderBlock {
                    self_attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.self_attn"),
                        d,
                        cfg.heads,
                        rng,
                    ),
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    cross_attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.cross_attn"),
                        d,
                        cfg.heads,
                        rng,
                    ),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_dim, rng),
                    ln3: LayerNorm::new(store, &format!("{p}.ln3"), d),
                }
            })
            .collect();
        let copy_query = store.add_xavier("copy.query", d, d, rng);
        let copy_query_pos = store.add_xavier("copy.query_pos", d, d, rng);
        let copy_key = store.add_xavier("copy.key", d, d, rng);
        let copy_key_pos = store.add_xavier("copy.key_pos", d, d, rng);
        let output = Linear::new(store, "decoder.output", d, output_dim, true, rng);
        let copy_output = store.add_xavier("copy.output", input_dim, output_dim, rng);
        let stop = Linear::new(store, "decoder.stop", d, 1, true, rng);
        let stop_end = store.add("decoder.stop_end", Matrix::filled(1, 1, cfg.stop_end_prior));
        Self {
            input,
            encoder,
            prenet1,
            prenet2,
            decoder,
            copy_query,
            copy_query_pos,
            copy_key,
            copy_key_pos,
            output,
            copy_output,
            stop,
            stop_end,
        }
    }

    fn apply_pass_through(&self, store: &mut ParamStore, cfg: &Seq2seqConfig) {
        let d = cfg.d_model;
        let scale = ONE_HOT_MARGIN / min_position_gap(d, cfg.max_positions);
        *store.value_mut(self.copy_query) = Matrix::zeros(d, d);
        *store.value_mut(self.copy_key) = Matrix::zeros(d, d);
        let mut q = Matrix::identity(d);
        q.scale_assign(scale);
        *store.value_mut(self.copy_query_pos) = q;
        *store.value_mut(self.copy_key_pos) = Matrix::identity(d);
        let (rows, cols) = store.value(self.output.weight).shape();
        *store.value_mut(self.output.weight) = Matrix::zeros(rows, cols);
        let n = store.value(self.copy_output).rows();
        *store.value_mut(self.copy_output) = Matrix::identity(n);
        *store.value_mut(self.stop.weight) = Matrix::zeros(d, 1);
        *store.value_mut(self.stop.bias.expect("stop bias")) =
            Matrix::filled(1, 1, PASS_THROUGH_STOP_BIAS);
        *store.value_mut(self.stop_end) = Matrix::filled(1, 1, PASS_THROUGH_STOP_END);
    }
}

pub struct Seq2seqModel {
    pub config: Seq2seqConfig,
    pub input_dim: usize,
    pub output_dim: usize,
    pub input_stats: FeatureStats,
    pub output_stats: FeatureStats,
    pub steps_trained: usize,
    pub params: ParamStore,
    layers: Layers,
}

impl Clone for Seq2seqModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            input_stats: self.input_stats.clone(),
            output_stats: self.output_stats.clone(),
            steps_trained: self.steps_trained,
            params: self.params.clone(),
            layers: self.layers.clone(),
        }
    }
}

impl std::fmt::Debug for Seq2seqModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Seq2seqModel")
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .field("steps_trained", &self.steps_trained)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

impl PartialEq for Seq2seqModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.input_dim == other.input_dim
            && self.output_dim == other.output_dim
            && self.input_stats == other.input_stats
            && self.output_stats == other.output_stats
            && self.steps_trained == other.steps_trained
            && self.params == other.params
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: Seq2seqConfig,
    input_dim: usize,
    output_dim: usize,
    input_stats: FeatureStats,
    output_stats: FeatureStats,
    steps_trained: usize,
}

const CHECKPOINT_KIND: &str = "seq2seq";

/// Result of autoregressive decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub output: Matrix,
    pub stopped_naturally: bool,
    pub stop_probs: Vec<f64>,
}

impl Seq2seqModel {
    /// Freshly initialized model with identity normalizers.
    pub fn new(cfg: &Seq2seqConfig, input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::with_stats(
            cfg,
            FeatureStats::identity(input_dim),
            FeatureStats::identity(output_dim),
        )
    }

    pub fn with_stats(
        cfg: &Seq2seqConfig,
        input_stats: FeatureStats,
        output_stats: FeatureStats,
    ) -> Result<Self> {
        let (input_dim, output_dim) = (input_stats.dim(), output_stats.dim());
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::invalid("seq2seq dims must be positive"));
        }
        if cfg.d_model == 0 || cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of heads {}",
                cfg.d_model, cfg.heads
            )));
        }
        if cfg.init == InitScheme::PassThrough && input_dim != output_dim {
            return Err(Error::DimensionMismatch(format!(
                "pass-through init needs equal dims, got {input_dim} -> {output_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let layers = Layers::build(&mut params, cfg, input_dim, output_dim, &mut rng);
        if cfg.init == InitScheme::PassThrough {
            layers.apply_pass_through(&mut params, cfg);
        }
        Ok(Self {
            config: cfg.clone(),
            input_dim,
            output_dim,
            input_stats,
            output_stats,
            steps_trained: 0,
            params,
            layers,
        })
    }

    pub fn parameter_hash(&self) -> String {
        self.params.content_hash()
    }

    fn encode(&self, g: &mut Graph, x: Var, len: usize) -> Var {
        let s = &self.params;
        let l = &self.layers;
        let h = l.input.forward(g, s, x);
        let pe = g.input(sinusoidal_positions(len, self.config.d_model));
        let mut h = g.add(h, pe);
        for b in &l.encoder {
            let a = b.attn.forward(g, s, h, h, false);
            let r = g.add(h, a);
            let r = b.ln1.forward(g, s, r);
            let f = b.ffn.forward(g, s, r);
            let r2 = g.add(r, f);
            h = b.ln2.forward(g, s, r2);
        }
        h
    }

    /// Returns `(frames, stop_logits)` for decoder inputs `prev` (go frame
    /// first, then previous outputs, all normalized).
    fn decode(
        &self,
        g: &mut Graph,
        enc: Var,
        x: Var,
        in_len: usize,
        prev: Var,
        out_len: usize,
    ) -> (Var, Var) {
        let s = &self.params;
        let l = &self.layers;
        let d = self.config.d_model;
        let p = l.prenet1.forward(g, s, prev);
        let p = g.relu(p);
        let p = l.prenet2.forward(g, s, p);
        let p = g.relu(p);
        let pe_out = g.input(sinusoidal_positions(out_len, d));
        let mut h = g.add(p, pe_out);
        for b in &l.decoder {
            let a = b.self_attn.forward(g, s, h, h, true);
            let r = g.add(h, a);
            let r = b.ln1.forward(g, s, r);
            let c = b.cross_attn.forward(g, s, r, enc, false);
            let r2 = g.add(r, c);
            let r2 = b.ln2.forward(g, s, r2);
            let f = b.ffn.forward(g, s, r2);
            let r3 = g.add(r2, f);
            h = b.ln3.forward(g, s, r3);
        }

        let wq = g.param(s, l.copy_query);
        let wqp = g.param(s, l.copy_query_pos);
        let wk = g.param(s, l.copy_key);
        let wkp = g.param(s, l.copy_key_pos);
        let q = g.matmul(h, wq);
        let q_pos = g.matmul(pe_out, wqp);
        let q = g.add(q, q_pos);
        let k = g.matmul(enc, wk);
        let pe_in = g.input(sinusoidal_positions(in_len, d));
        let k_pos = g.matmul(pe_in, wkp);
        let k = g.add(k, k_pos);
        let scores = g.matmul_bt(q, k);
        let alpha = g.softmax_rows(scores, false);
        let context = g.matmul(alpha, x);

        let direct = l.output.forward(g, s, h);
        let wc = g.param(s, l.copy_output);
        let copied = g.matmul(context, wc);
        let frames = g.add(direct, copied);

        let stop = l.stop.forward(g, s, h);
        let last = g.slice_cols(alpha, in_len - 1, 1);
        let end = g.param(s, l.stop_end);
        let end = g.matmul(last, end);
        let stop = g.add(stop, end);
        (frames, stop)
    }

    fn check_input(&self, m: &Matrix) -> Result<()> {
        if m.cols() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "seq2seq expects {}-dim input, got {}",
                self.input_dim,
                m.cols()
            )));
        }
        if m.rows() == 0 || !m.all_finite() {
            return Err(Error::invalid("seq2seq input must be non-empty and finite"));
        }
        Ok(())
    }

    fn check_pair(&self, p: &TrainingPair) -> Result<()> {
        self.check_input(&p.input)?;
        if p.target.cols() != self.output_dim {
            return Err(Error::DimensionMismatch(format!(
                "seq2seq expects {}-dim targets, got {}",
                self.output_dim,
                p.target.cols()
            )));
        }
        if p.target.rows() == 0 || !p.target.all_finite() {
            return Err(Error::invalid(
                "seq2seq target must be non-empty and finite",
            ));
        }
        Ok(())
    }

    /// Teacher-forced loss graph for one pair.
    fn loss_graph(
        &self,
        pair: &TrainingPair,
        stop_pos_weight: f64,
        jitter: Option<(f64, &mut ChaCha8Rng)>,
    ) -> (Graph, Var, Var, Var) {
        let xn = self.input_stats.normalize(&pair.input);
        let yn = self.output_stats.normalize(&pair.target);
        let (tin, tout) = (xn.rows(), yn.rows());
        let mut prev = Matrix::zeros(tout, self.output_dim);
        for t in 1..tout {
            prev.row_mut(t).copy_from_slice(yn.row(t - 1));
        }
        if let Some((width, rng)) = jitter {
            if width > 0.0 {
                for v in prev.data_mut()[self.output_dim..].iter_mut() {
                    *v += rng.gen_range(-width..width);
                }
            }
        }
        let mut stop_target = Matrix::zeros(tout, 1);
        stop_target.set(tout - 1, 0, 1.0);

        let mut g = Graph::new();
        let x = g.input(xn);
        let enc = self.encode(&mut g, x, tin);
        let prev = g.input(prev);
        let (frames, stop) = self.decode(&mut g, enc, x, tin, prev, tout);
        let l1 = g.l1_loss(frames, &yn);
        let bce = g.bce_logits(stop, &stop_target, stop_pos_weight);
        let total = g.add(l1, bce);
        (g, total, l1, bce)
    }

    /// Teacher-forced loss and parameter gradients for one pair.
    pub fn loss_and_gradients(
        &self,
        pair: &TrainingPair,
        stop_pos_weight: f64,
    ) -> Result<(LossBreakdown, HashMap<ParamId, Matrix>)> {
        self.check_pair(pair)?;
        let (g, total, l1, bce) = self.loss_graph(pair, stop_pos_weight, None);
        let loss = LossBreakdown {
            l1: g.value(l1).get(0, 0),
            stop: g.value(bce).get(0, 0),
        };
        Ok((loss, g.backward(total)))
    }

    /// Mean teacher-forced loss over `pairs`.
    pub fn teacher_forced_loss(
        &self,
        pairs: &[TrainingPair],
        stop_pos_weight: f64,
    ) -> Result<LossBreakdown> {
        let mut acc = LossBreakdown::default();
        for p in pairs {
            self.check_pair(p)?;
            let (g, _, l1, bce) = self.loss_graph(p, stop_pos_weight, None);
            acc.l1 += g.value(l1).get(0, 0);
            acc.stop += g.value(bce).get(0, 0);
        }
        let n = pairs.len().max(1) as f64;
        Ok(LossBreakdown {
            l1: acc.l1 / n,
            stop: acc.stop / n,
        })
    }

    /// Greedy autoregressive decoding. Stops after the first frame whose stop
    /// probability exceeds `stop_threshold`, or after `max_frames` frames.
    pub fn infer_ar(
        &self,
        input: &Matrix,
        max_frames: usize,
        stop_threshold: f64,
    ) -> Result<Decoded> {
        self.check_input(input)?;
        let xn = self.input_stats.normalize(input);
        let tin = xn.rows();
        let mut g = Graph::new();
        let x = g.input(xn.clone());
        let enc = self.encode(&mut g, x, tin);
        let enc_value = g.value(enc).clone();

        let mut outputs: Vec<Vec<f64>> = Vec::new();
        let mut stop_probs = Vec::new();
        let mut stopped = false;
        while outputs.len() < max_frames {
            let t = outputs.len();
            let mut prev = Matrix::zeros(t + 1, self.output_dim);
            for (i, o) in outputs.iter().enumerate() {
                prev.row_mut(i + 1).copy_from_slice(o);
            }
            let mut g = Graph::new();
            let x = g.input(xn.clone());
            let enc = g.input(enc_value.clone());
            let prev = g.input(prev);
            let (frames, stop) = self.decode(&mut g, enc, x, tin, prev, t + 1);
            outputs.push(g.value(frames).row(t).to_vec());
            let p = sigmoid(g.value(stop).get(t, 0));
            stop_probs.push(p);
            if stop_threshold <= 0.0 || p > stop_threshold {
                stopped = true;
                break;
            }
        }
        let normalized =
            Matrix::from_rows(&outputs).unwrap_or_else(|_| Matrix::zeros(0, self.output_dim));
        let output = if normalized.rows() == 0 {
            Matrix::zeros(0, self.output_dim)
        } else {
            self.output_stats.denormalize(&normalized)
        };
        Ok(Decoded {
            output,
            stopped_naturally: stopped,
            stop_probs,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            input_stats: self.input_stats.clone(),
            output_stats: self.output_stats.clone(),
            steps_trained: self.steps_trained,
        };
        Ok(Checkpoint::from_store(
            &self.params,
            serde_json::to_value(meta)?,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("not a seq2seq checkpoint: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {}",
                meta.kind
            )));
        }
        let mut model = Self::with_stats(&meta.config, meta.input_stats, meta.output_stats)?;
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

/// Copies every tensor whose name and shape match; the rest keep their
/// initial values and are listed in the report.
pub fn load_pretrained(model: &Seq2seqModel, ckpt: &Checkpoint) -> (Seq2seqModel, TransferReport) {
    let mut out = model.clone();
    let report = transfer(&mut out.params, ckpt);
    (out, report)
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Seq2seqModel,
    pub log: Vec<StepLoss>,
    pub transfer: Option<TransferReport>,
}

fn check_pairs(pairs: &[TrainingPair]) -> Result<(usize, usize)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::invalid("no training pairs"))?;
    let (din, dout) = (first.input.cols(), first.target.cols());
    for (i, p) in pairs.iter().enumerate() {
        if p.input.cols() != din || p.target.cols() != dout {
            return Err(Error::DimensionMismatch(format!(
                "pair {i} is {}->{}, expected {din}->{dout}",
                p.input.cols(),
                p.target.cols()
            )));
        }
    }
    Ok((din, dout))
}

/// Builds the model that [`train_seq2seq`] starts from.
pub fn initial_model(
    pairs: &[TrainingPair],
    model_cfg: &Seq2seqConfig,
    train_cfg: &Seq2seqTrainConfig,
) -> Result<Seq2seqModel> {
    let (din, dout) = check_pairs(pairs)?;
    if train_cfg.normalize {
        Seq2seqModel::with_stats(
            model_cfg,
            FeatureStats::fit(pairs.iter().map(|p| &p.input), din),
            FeatureStats::fit(pairs.iter().map(|p| &p.target), dout),
        )
    } else {
        Seq2seqModel::new(model_cfg, din, dout)
    }
}

/// Minibatch Adam on L1 + weighted stop BCE under teacher forcing.
pub fn train_seq2seq(
    pairs: &[TrainingPair],
    model_cfg: &Seq2seqConfig,
    train_cfg: &Seq2seqTrainConfig,
    init: Option<&Checkpoint>,
) -> Result<Trained> {
    train_seq2seq_with(pairs, model_cfg, train_cfg, init, &mut |_, _| {})
}

/// [`train_seq2seq`] that calls `on_step` after every parameter update.
pub fn train_seq2seq_with(
    pairs: &[TrainingPair],
    model_cfg: &Seq2seqConfig,
    train_cfg: &Seq2seqTrainConfig,
    init: Option<&Checkpoint>,
    on_step: &mut dyn FnMut(&Seq2seqModel, &StepLoss),
) -> Result<Trained> {
    let mut model = initial_model(pairs, model_cfg, train_cfg)?;
    for p in pairs {
        model.check_pair(p)?;
    }
    let transfer = init.map(|ckpt| {
        let (m, report) = load_pretrained(&model, ckpt);
        model = m;
        report
    });
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
        let mut loss = LossBreakdown::default();
        for _ in 0..batch {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled");
            let (graph, total, l1, bce) = model.loss_graph(
                &pairs[i],
                train_cfg.stop_pos_weight,
                Some((train_cfg.teacher_jitter, &mut rng)),
            );
            let l = LossBreakdown {
                l1: graph.value(l1).get(0, 0),
                stop: graph.value(bce).get(0, 0),
            };
            let g = graph.backward(total);
            loss.l1 += l.l1 / batch as f64;
            loss.stop += l.stop / batch as f64;
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
        adam.set_learning_rate(warmup_cosine(
            train_cfg.learning_rate,
            step,
            train_cfg.steps,
            train_cfg.warmup_steps,
            train_cfg.final_lr_fraction,
        ));
        adam.step(&mut model.params, &grads);
        model.steps_trained += 1;
        if step % 100 == 0 {
            debug!(step, l1 = loss.l1, stop = loss.stop, "seq2seq step");
        }
        let entry = StepLoss {
            step,
            l1: loss.l1,
            stop: loss.stop,
        };
        on_step(&model, &entry);
        log.push(entry);
    }
    if !model.params.all_finite() {
        return Err(Error::invalid(
            "seq2seq training diverged to non-finite parameters",
        ));
    }
    Ok(Trained {
        model,
        log,
        transfer,
    })
}
