//! Training and conversion recipes for the three accent conversion methods.
//!
//! * cascade: seq2seq source speech -> reference speech, then the frozen
//!   frame decoder restores the source speaker's identity.
//! * stg: the frame decoder turns reference utterances into synthetic
//!   source-speaker targets, and a seq2seq model learns source -> synthetic.
//! * lsc: seq2seq maps source latents to reference latents, and the frame
//!   decoder renders them with the source speaker's identity.
//!
//! The frame decoder is only borrowed immutably here, so it stays frozen
//! across every training run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

use crate::audio::Utterance;
use crate::corpus::{ParallelCorpus, Split};
use crate::error::{Error, Result};
use crate::extractors::{
    extract, extract_from_mel, project_to_simplex_rows, write_latent, ExtractorBackend,
    ExtractorRegistry, ExtractorSpec, LatentKind, LatentSequence,
};
use crate::features::dump::write_mel;
use crate::features::{vocode, MelAnalyzer, MelConfig, MelSpectrogram, VocoderBackend};
use crate::frame_vc::{convert_a2o, decode_latents, FrameVcModel};
use crate::matrix::Matrix;
use crate::nn::Checkpoint;
use crate::seq2seq::{
    train_seq2seq, Seq2seqConfig, Seq2seqModel, Seq2seqTrainConfig, TrainingPair,
    DEFAULT_STOP_THRESHOLD,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cascade,
    Stg,
    Lsc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cascade, Method::Stg, Method::Lsc];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cascade => "cascade",
            Method::Stg => "stg",
            Method::Lsc => "lsc",
        }
    }

    pub fn uses_frame_decoder(self) -> bool {
        !matches!(self, Method::Stg)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown method {s:?}; expected cascade, stg or lsc"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Speech,
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageKind {
    Seq2seq { domain: Domain },
    Extractor,
    FrameDecoder,
    Vocoder,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Seq2seq {
                domain: Domain::Speech,
            } => "seq2seq(speech)",
            StageKind::Seq2seq {
                domain: Domain::Latent,
            } => "seq2seq(latent)",
            StageKind::Extractor => "extractor",
            StageKind::FrameDecoder => "frame_decoder",
            StageKind::Vocoder => "vocoder",
        }
    }
}

/// Stage order each method must follow.
pub fn stage_order(method: Method) -> Vec<StageKind> {
    use StageKind::*;
    match method {
        Method::Cascade => vec![
            Seq2seq {
                domain: Domain::Speech,
            },
            Extractor,
            FrameDecoder,
            Vocoder,
        ],
        Method::Stg => vec![
            Seq2seq {
                domain: Domain::Speech,
            },
            Vocoder,
        ],
        Method::Lsc => vec![
            Extractor,
            Seq2seq {
                domain: Domain::Latent,
            },
            FrameDecoder,
            Vocoder,
        ],
    }
}

/// Reference used for the vocoder stage, which is chosen at conversion time.
pub const RUNTIME_VOCODER: &str = "runtime";
pub const SEQ2SEQ_FILE: &str = "seq2seq.ckpt";
pub const FRAME_VC_FILE: &str = "frame_vc.ckpt";
pub const EXTRACTOR_FILE: &str = "extractor.json";
pub const METHOD_FILE: &str = "method.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageDescriptor {
    #[serde(flatten)]
    pub kind: StageKind,
    /// Checkpoint file, extractor id or vocoder reference.
    pub model: String,
    /// Feature dimension consumed. Speech enters as mel frames.
    pub input_dim: usize,
    /// Feature dimension produced; 1 for waveform samples.
    pub output_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionGraph {
    pub method: Method,
    pub stages: Vec<StageDescriptor>,
}

impl ConversionGraph {
    pub fn build(method: Method, n_mels: usize, extractor_id: &str, latent_dim: usize) -> Self {
        let stage = |kind: StageKind, input_dim, output_dim| {
            let model = match kind {
                StageKind::Seq2seq { .. } => SEQ2SEQ_FILE.to_string(),
                StageKind::Extractor => extractor_id.to_string(),
                StageKind::FrameDecoder => FRAME_VC_FILE.to_string(),
                StageKind::Vocoder => RUNTIME_VOCODER.to_string(),
            };
            StageDescriptor {
                kind,
                model,
                input_dim,
                output_dim,
            }
        };
        let stages = stage_order(method)
            .into_iter()
            .map(|k| match k {
                StageKind::Seq2seq {
                    domain: Domain::Speech,
                } => stage(k, n_mels, n_mels),
                StageKind::Seq2seq {
                    domain: Domain::Latent,
                } => stage(k, latent_dim, latent_dim),
                StageKind::Extractor => stage(k, n_mels, latent_dim),
                StageKind::FrameDecoder => stage(k, latent_dim, n_mels),
                StageKind::Vocoder => stage(k, n_mels, 1),
            })
            .collect();
        Self { method, stages }
    }

    pub fn kinds(&self) -> Vec<StageKind> {
        self.stages.iter().map(|s| s.kind).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds() != stage_order(self.method) {
            return Err(Error::invalid(format!(
                "{} graph has stages {:?}",
                self.method,
                self.stages
                    .iter()
                    .map(|s| s.kind.name())
                    .collect::<Vec<_>>()
            )));
        }
        for w in self.stages.windows(2) {
            if w[0].output_dim != w[1].input_dim {
                return Err(Error::DimensionMismatch(format!(
                    "{} emits {} dims but {} expects {}",
                    w[0].kind.name(),
                    w[0].output_dim,
                    w[1].kind.name(),
                    w[1].input_dim
                )));
            }
        }
        Ok(())
    }

    pub fn seq2seq_stage(&self) -> &StageDescriptor {
        self.stages
            .iter()
            .find(|s| matches!(s.kind, StageKind::Seq2seq { .. }))
            .expect("every method has a seq2seq stage")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodTrainConfig {
    pub model: Seq2seqConfig,
    pub train: Seq2seqTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainedInfo {
    pub hash: String,
    pub copied: usize,
    pub reinitialized: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    pub corpus_hash: String,
    pub train_pairs: usize,
    pub frame_vc_hash: String,
    pub extractor_id: String,
    pub target_speaker_id: String,
    pub mel: MelConfig,
    pub config: MethodTrainConfig,
    pub steps: usize,
    pub seq2seq_hash: String,
    pub pretrained: Option<PretrainedInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodBundle {
    pub method: Method,
    pub graph: ConversionGraph,
    pub seq2seq: Seq2seqModel,
    /// How to rebuild the extractor. STG only records the id.
    pub extractor: Option<ExtractorSpec>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct MethodFile {
    bundle_id: String,
    method: Method,
    graph: ConversionGraph,
    provenance: Provenance,
    seq2seq: String,
    frame_vc: Option<String>,
    extractor: Option<String>,
}

impl MethodBundle {
    /// SHA-256 of the method and provenance, so equal inputs give equal ids.
    pub fn bundle_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.method.as_str().as_bytes());
        h.update(serde_json::to_vec(&self.provenance).expect("provenance serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks the graph and that the frame decoder, when given, is the one
    /// the bundle was trained against.
    pub fn validate(&self, frame_vc: Option<&FrameVcModel>) -> Result<()> {
        self.graph.validate()?;
        if self.graph.method != self.method {
            return Err(Error::invalid("bundle method and graph method differ"));
        }
        let s = self.graph.seq2seq_stage();
        if self.seq2seq.input_dim != s.input_dim || self.seq2seq.output_dim != s.output_dim {
            return Err(Error::DimensionMismatch(format!(
                "seq2seq is {}->{} but the graph needs {}->{}",
                self.seq2seq.input_dim, self.seq2seq.output_dim, s.input_dim, s.output_dim
            )));
        }
        if self.seq2seq.parameter_hash() != self.provenance.seq2seq_hash {
            return Err(Error::Checkpoint(
                "seq2seq parameters do not match the bundle provenance".into(),
            ));
        }
        if self.method.uses_frame_decoder() && self.extractor.is_none() {
            return Err(Error::invalid(format!(
                "{} bundle has no extractor",
                self.method
            )));
        }
        if let Some(fv) = frame_vc {
            check_frame_vc(self, fv)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, frame_vc: Option<&FrameVcModel>) -> Result<()> {
        self.validate(frame_vc)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.seq2seq.save(&dir.join(SEQ2SEQ_FILE))?;
        let frame_file = if self.method.uses_frame_decoder() {
            let fv = frame_vc.ok_or_else(|| {
                Error::invalid(format!(
                    "saving a {} bundle needs its frame decoder",
                    self.method
                ))
            })?;
            fv.save(&dir.join(FRAME_VC_FILE))?;
            Some(FRAME_VC_FILE.to_string())
        } else {
            None
        };
        let extractor_file = match &self.extractor {
            Some(spec) => {
                spec.save(&dir.join(EXTRACTOR_FILE))?;
                Some(EXTRACTOR_FILE.to_string())
            }
            None => None,
        };
        let file = MethodFile {
            bundle_id: self.bundle_id(),
            method: self.method,
            graph: self.graph.clone(),
            provenance: self.provenance.clone(),
            seq2seq: SEQ2SEQ_FILE.into(),
            frame_vc: frame_file,
            extractor: extractor_file,
        };
        let path = dir.join(METHOD_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads everything except the frame decoder, see [`load_frame_vc`].
    pub fn load(dir: &Path) -> Result<Self> {
        let file = read_method_file(dir)?;
        let seq2seq = Seq2seqModel::load(&dir.join(&file.seq2seq))?;
        let extractor = match &file.extractor {
            Some(f) => Some(ExtractorSpec::load(&dir.join(f))?),
            None => None,
        };
        let bundle = Self {
            method: file.method,
            graph: file.graph,
            seq2seq,
            extractor,
            provenance: file.provenance,
        };
        if bundle.bundle_id() != file.bundle_id {
            return Err(Error::Checkpoint(format!(
                "bundle id mismatch in {}",
                dir.display()
            )));
        }
        bundle.validate(None)?;
        Ok(bundle)
    }

    pub fn build_extractor(&self) -> Result<Option<std::sync::Arc<dyn ExtractorBackend>>> {
        self.extractor.as_ref().map(|s| s.build()).transpose()
    }
}

fn read_method_file(dir: &Path) -> Result<MethodFile> {
    let path = dir.join(METHOD_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads the frame decoder stored next to a bundle and checks it is the
/// one recorded in its provenance.
pub fn load_frame_vc(dir: &Path) -> Result<FrameVcModel> {
    let file = read_method_file(dir)?;
    let name = file
        .frame_vc
        .ok_or_else(|| Error::invalid(format!("{} bundle stores no frame decoder", file.method)))?;
    let fv = FrameVcModel::load(&dir.join(name))?;
    if fv.parameter_hash() != file.provenance.frame_vc_hash {
        return Err(Error::Checkpoint(
            "stored frame decoder does not match the bundle provenance".into(),
        ));
    }
    Ok(fv)
}

fn check_frame_vc(bundle: &MethodBundle, fv: &FrameVcModel) -> Result<()> {
    if fv.parameter_hash() != bundle.provenance.frame_vc_hash {
        return Err(Error::Checkpoint(format!(
            "frame decoder {} is not the one this bundle was trained with ({})",
            fv.parameter_hash(),
            bundle.provenance.frame_vc_hash
        )));
    }
    if fv.extractor_id != bundle.provenance.extractor_id {
        return Err(Error::ExtractorMismatch {
            expected: bundle.provenance.extractor_id.clone(),
            found: fv.extractor_id.clone(),
        });
    }
    Ok(())
}

fn shared_extractor(
    frame_vc: &FrameVcModel,
    extractor: &ExtractorSpec,
) -> Result<std::sync::Arc<dyn ExtractorBackend>> {
    let backend = extractor.build()?;
    if backend.extractor_id() != frame_vc.extractor_id {
        return Err(Error::ExtractorMismatch {
            expected: frame_vc.extractor_id.clone(),
            found: backend.extractor_id().to_string(),
        });
    }
    if backend.dim() != frame_vc.latent_dim() {
        return Err(Error::DimensionMismatch(format!(
            "extractor {} has dim {} but the frame decoder expects {}",
            backend.extractor_id(),
            backend.dim(),
            frame_vc.latent_dim()
        )));
    }
    Ok(backend)
}

fn train_split(corpus: &ParallelCorpus) -> Result<Vec<&crate::corpus::UtterancePair>> {
    let pairs = corpus.split_pairs(Split::Train);
    if pairs.is_empty() {
        return Err(Error::invalid("the training split is empty"));
    }
    Ok(pairs)
}

fn fit(
    method: Method,
    corpus: &ParallelCorpus,
    pairs: &[TrainingPair],
    frame_vc: &FrameVcModel,
    extractor: Option<ExtractorSpec>,
    latent_dim: usize,
    cfg: &MethodTrainConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<MethodBundle> {
    info!(method = %method, pairs = pairs.len(), steps = cfg.train.steps, "training seq2seq");
    let trained = train_seq2seq(pairs, &cfg.model, &cfg.train, pretrained)
        .map_err(|e| e.in_stage("seq2seq"))?;
    let pretrained = pretrained
        .zip(trained.transfer.as_ref())
        .map(|(ckpt, report)| PretrainedInfo {
            hash: ckpt.content_hash(),
            copied: report.copied(),
            reinitialized: report.0.len() - report.copied(),
        });
    let provenance = Provenance {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        corpus_hash: corpus.content_hash(),
        train_pairs: pairs.len(),
        frame_vc_hash: frame_vc.parameter_hash(),
        extractor_id: frame_vc.extractor_id.clone(),
        target_speaker_id: frame_vc.target_speaker_id.clone(),
        mel: frame_vc.mel.clone(),
        config: cfg.clone(),
        steps: trained.model.steps_trained,
        seq2seq_hash: trained.model.parameter_hash(),
        pretrained,
    };
    let bundle = MethodBundle {
        method,
        graph: ConversionGraph::build(
            method,
            frame_vc.mel.n_mels,
            &frame_vc.extractor_id,
            latent_dim,
        ),
        seq2seq: trained.model,
        extractor,
        provenance,
    };
    bundle.validate(Some(frame_vc))?;
    Ok(bundle)
}

/// Source mel -> reference mel pairs of the training split.
pub fn speech_pairs(
    corpus: &ParallelCorpus,
    split: Split,
    mel: &MelConfig,
) -> Result<Vec<TrainingPair>> {
    let analyzer = MelAnalyzer::new(mel)?;
    corpus
        .split_pairs(split)
        .into_iter()
        .map(|p| {
            Ok(TrainingPair {
                input: analyzer.analyze(&p.source)?.values,
                target: analyzer.analyze(&p.reference)?.values,
            })
        })
        .collect()
}

/// Source latents -> reference latents pairs of a split.
pub fn latent_pairs(
    corpus: &ParallelCorpus,
    split: Split,
    backend: &dyn ExtractorBackend,
) -> Result<Vec<TrainingPair>> {
    corpus
        .split_pairs(split)
        .into_iter()
        .map(|p| {
            Ok(TrainingPair {
                input: extract(&p.source, backend)?.values,
                target: extract(&p.reference, backend)?.values,
            })
        })
        .collect()
}

pub fn train_cascade(
    corpus: &ParallelCorpus,
    frame_vc: &FrameVcModel,
    extractor: &ExtractorSpec,
    cfg: &MethodTrainConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<MethodBundle> {
    train_split(corpus)?;
    let backend = shared_extractor(frame_vc, extractor)?;
    let pairs = speech_pairs(corpus, Split::Train, &frame_vc.mel)?;
    fit(
        Method::Cascade,
        corpus,
        &pairs,
        frame_vc,
        Some(extractor.clone()),
        backend.dim(),
        cfg,
        pretrained,
    )
}

/// The frame decoder's rendering of each native utterance, in order.
pub fn generate_synthetic_targets(
    frame_vc: &FrameVcModel,
    native: &[Utterance],
    registry: &ExtractorRegistry,
) -> Result<Vec<MelSpectrogram>> {
    native
        .iter()
        .map(|u| {
            convert_a2o(frame_vc, u, registry)
                .map_err(|e| e.in_stage(format!("synthetic target {}", u.utterance_id)))
        })
        .collect()
}

/// Source mel -> synthetic target pairs of a split.
pub fn synthetic_pairs(
    corpus: &ParallelCorpus,
    split: Split,
    frame_vc: &FrameVcModel,
    registry: &ExtractorRegistry,
) -> Result<Vec<TrainingPair>> {
    let pairs = corpus.split_pairs(split);
    let native: Vec<Utterance> = pairs.iter().map(|p| p.reference.clone()).collect();
    let targets = generate_synthetic_targets(frame_vc, &native, registry)?;
    let analyzer = MelAnalyzer::new(&frame_vc.mel)?;
    pairs
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            Ok(TrainingPair {
                input: analyzer.analyze(&p.source)?.values,
                target: t.values,
            })
        })
        .collect()
}

pub fn train_stg(
    corpus: &ParallelCorpus,
    frame_vc: &FrameVcModel,
    extractor: &ExtractorSpec,
    cfg: &MethodTrainConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<MethodBundle> {
    train_split(corpus)?;
    let backend = shared_extractor(frame_vc, extractor)?;
    let mut registry = ExtractorRegistry::new();
    registry.register(backend.clone());
    let pairs = synthetic_pairs(corpus, Split::Train, frame_vc, &registry)?;
    fit(
        Method::Stg,
        corpus,
        &pairs,
        frame_vc,
        None,
        backend.dim(),
        cfg,
        pretrained,
    )
}

pub fn train_lsc(
    corpus: &ParallelCorpus,
    frame_vc: &FrameVcModel,
    extractor: &ExtractorSpec,
    cfg: &MethodTrainConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<MethodBundle> {
    train_split(corpus)?;
    let backend = shared_extractor(frame_vc, extractor)?;
    let pairs = latent_pairs(corpus, Split::Train, backend.as_ref())
        .map_err(|e| e.in_stage("extractor"))?;
    fit(
        Method::Lsc,
        corpus,
        &pairs,
        frame_vc,
        Some(extractor.clone()),
        backend.dim(),
        cfg,
        pretrained,
    )
}

pub fn train_method(
    method: Method,
    corpus: &ParallelCorpus,
    frame_vc: &FrameVcModel,
    extractor: &ExtractorSpec,
    cfg: &MethodTrainConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<MethodBundle> {
    match method {
        Method::Cascade => train_cascade(corpus, frame_vc, extractor, cfg, pretrained),
        Method::Stg => train_stg(corpus, frame_vc, extractor, cfg, pretrained),
        Method::Lsc => train_lsc(corpus, frame_vc, extractor, cfg, pretrained),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvertOptions {
    /// Decoding cap as a multiple of the seq2seq input length.
    pub max_frames_factor: f64,
    pub stop_threshold: f64,
    /// Directory receiving every intermediate artifact.
    pub dump_dir: Option<PathBuf>,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            max_frames_factor: 4.0,
            stop_threshold: DEFAULT_STOP_THRESHOLD,
            dump_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    FrameVcLoaded,
    Stage {
        kind: StageKind,
    },
    /// The extractor needed a waveform, so the stage-1 mel was vocoded first.
    VocodedForExtraction,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Mel(MelSpectrogram),
    Latent(LatentSequence),
    Waveform(Utterance),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intermediate {
    pub name: String,
    pub artifact: Artifact,
}

#[derive(Clone, Debug)]
pub struct Conversion {
    pub output: Utterance,
    pub mel: MelSpectrogram,
    pub trace: Vec<TraceEvent>,
    pub intermediates: Vec<Intermediate>,
    pub stopped_naturally: bool,
}

impl Conversion {
    pub fn executed_stages(&self) -> Vec<StageKind> {
        self.trace
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Stage { kind } => Some(*kind),
                _ => None,
            })
            .collect()
    }

    pub fn loaded_frame_vc(&self) -> bool {
        self.trace.contains(&TraceEvent::FrameVcLoaded)
    }

    pub fn intermediate(&self, name: &str) -> Option<&Artifact> {
        self.intermediates
            .iter()
            .find(|i| i.name == name)
            .map(|i| &i.artifact)
    }
}

struct Run<'a> {
    bundle: &'a MethodBundle,
    frame_vc: Option<&'a FrameVcModel>,
    opts: &'a ConvertOptions,
    trace: Vec<TraceEvent>,
    intermediates: Vec<Intermediate>,
}

impl<'a> Run<'a> {
    fn stage(&mut self, kind: StageKind) {
        self.trace.push(TraceEvent::Stage { kind });
    }

    fn keep(&mut self, name: &str, artifact: Artifact) -> Result<()> {
        if let Some(dir) = &self.opts.dump_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let base = dir.join(name);
            match &artifact {
                Artifact::Mel(m) => write_mel(&base, m)?,
                Artifact::Latent(l) => write_latent(&base, l)?,
                Artifact::Waveform(u) => {
                    crate::audio::write_wav(&base.with_extension("wav"), u.sample_rate, &u.samples)?
                }
            }
        }
        self.intermediates.push(Intermediate {
            name: name.to_string(),
            artifact,
        });
        Ok(())
    }

    fn frame_vc(&mut self) -> Result<&'a FrameVcModel> {
        let fv = self.frame_vc.ok_or_else(|| {
            Error::invalid(format!(
                "{} conversion needs the frame decoder",
                self.bundle.method
            ))
        })?;
        if !self.trace.contains(&TraceEvent::FrameVcLoaded) {
            check_frame_vc(self.bundle, fv)?;
            self.trace.push(TraceEvent::FrameVcLoaded);
        }
        Ok(fv)
    }

    fn seq2seq(&mut self, input: &Matrix, domain: Domain) -> Result<(Matrix, bool)> {
        self.stage(StageKind::Seq2seq { domain });
        let cap = ((input.rows() as f64) * self.opts.max_frames_factor)
            .ceil()
            .max(1.0) as usize;
        let d = self
            .bundle
            .seq2seq
            .infer_ar(input, cap, self.opts.stop_threshold)
            .map_err(|e| e.in_stage(StageKind::Seq2seq { domain }.name()))?;
        Ok((d.output, d.stopped_naturally))
    }

    fn vocoder(
        &mut self,
        m: &MelSpectrogram,
        vocoder: &dyn VocoderBackend,
        like: &Utterance,
    ) -> Result<Utterance> {
        self.stage(StageKind::Vocoder);
        let out = vocode(m, vocoder, like).map_err(|e| e.in_stage("vocoder"))?;
        self.keep("output", Artifact::Waveform(out.clone()))?;
        Ok(out)
    }

    fn finish(self, output: Utterance, mel: MelSpectrogram, stopped_naturally: bool) -> Conversion {
        Conversion {
            output,
            mel,
            trace: self.trace,
            intermediates: self.intermediates,
            stopped_naturally,
        }
    }
}

fn expect_method(bundle: &MethodBundle, method: Method) -> Result<()> {
    if bundle.method != method {
        return Err(Error::invalid(format!(
            "expected a {method} bundle, got {}",
            bundle.method
        )));
    }
    bundle.graph.validate()
}

fn bundle_extractor(bundle: &MethodBundle) -> Result<std::sync::Arc<dyn ExtractorBackend>> {
    bundle
        .build_extractor()?
        .ok_or_else(|| Error::invalid(format!("{} bundle has no extractor", bundle.method)))
}

pub fn convert_cascade(
    bundle: &MethodBundle,
    frame_vc: &FrameVcModel,
    u: &Utterance,
    vocoder: &dyn VocoderBackend,
    opts: &ConvertOptions,
) -> Result<Conversion> {
    expect_method(bundle, Method::Cascade)?;
    let mut run = Run {
        bundle,
        frame_vc: Some(frame_vc),
        opts,
        trace: Vec::new(),
        intermediates: Vec::new(),
    };
    let fv = run.frame_vc()?;
    let backend = bundle_extractor(bundle)?;
    let input = MelAnalyzer::new(&fv.mel)?.analyze(u)?;
    run.keep("input", Artifact::Mel(input.clone()))?;

    let (stage1, stopped) = run.seq2seq(&input.values, Domain::Speech)?;
    let stage1 = MelSpectrogram::new(stage1, &fv.mel);
    run.keep("seq2seq", Artifact::Mel(stage1.clone()))?;

    run.stage(StageKind::Extractor);
    let latents = match extract_from_mel(&stage1, backend.as_ref()) {
        Some(l) => l,
        None => {
            run.trace.push(TraceEvent::VocodedForExtraction);
            let wav = vocode(&stage1, vocoder, u)?;
            run.keep("seq2seq_waveform", Artifact::Waveform(wav.clone()))?;
            extract(&wav, backend.as_ref())
        }
    }
    .map_err(|e| e.in_stage("extractor"))?;
    run.keep("extractor", Artifact::Latent(latents.clone()))?;

    run.stage(StageKind::FrameDecoder);
    let mel = decode_latents(fv, &latents).map_err(|e| e.in_stage("frame_decoder"))?;
    run.keep("frame_decoder", Artifact::Mel(mel.clone()))?;
    let out = run.vocoder(&mel, vocoder, u)?;
    Ok(run.finish(out, mel, stopped))
}

pub fn convert_stg(
    bundle: &MethodBundle,
    u: &Utterance,
    vocoder: &dyn VocoderBackend,
    opts: &ConvertOptions,
) -> Result<Conversion> {
    expect_method(bundle, Method::Stg)?;
    let mel_cfg = &bundle.provenance.mel;
    let mut run = Run {
        bundle,
        frame_vc: None,
        opts,
        trace: Vec::new(),
        intermediates: Vec::new(),
    };
    let input = MelAnalyzer::new(mel_cfg)?.analyze(u)?;
    run.keep("input", Artifact::Mel(input.clone()))?;
    let (out, stopped) = run.seq2seq(&input.values, Domain::Speech)?;
    let mel = MelSpectrogram::new(out, mel_cfg);
    run.keep("seq2seq", Artifact::Mel(mel.clone()))?;
    let out = run.vocoder(&mel, vocoder, u)?;
    Ok(run.finish(out, mel, stopped))
}

pub fn convert_lsc(
    bundle: &MethodBundle,
    frame_vc: &FrameVcModel,
    u: &Utterance,
    vocoder: &dyn VocoderBackend,
    opts: &ConvertOptions,
) -> Result<Conversion> {
    expect_method(bundle, Method::Lsc)?;
    let mut run = Run {
        bundle,
        frame_vc: Some(frame_vc),
        opts,
        trace: Vec::new(),
        intermediates: Vec::new(),
    };
    let fv = run.frame_vc()?;
    let backend = bundle_extractor(bundle)?;

    run.stage(StageKind::Extractor);
    let source = extract(u, backend.as_ref()).map_err(|e| e.in_stage("extractor"))?;
    run.keep("extractor", Artifact::Latent(source.clone()))?;

    let (mapped, stopped) = run.seq2seq(&source.values, Domain::Latent)?;
    let mapped = match backend.kind() {
        LatentKind::Simplex => project_to_simplex_rows(&mapped),
        LatentKind::Unconstrained => mapped,
    };
    let latents = LatentSequence {
        values: mapped,
        extractor_id: source.extractor_id.clone(),
        frame_period_ms: source.frame_period_ms,
    };
    run.keep("seq2seq", Artifact::Latent(latents.clone()))?;

    run.stage(StageKind::FrameDecoder);
    let mel = decode_latents(fv, &latents).map_err(|e| e.in_stage("frame_decoder"))?;
    run.keep("frame_decoder", Artifact::Mel(mel.clone()))?;
    let out = run.vocoder(&mel, vocoder, u)?;
    Ok(run.finish(out, mel, stopped))
}

/// Dispatches on the bundle's method. STG ignores `frame_vc`.
pub fn convert(
    bundle: &MethodBundle,
    frame_vc: Option<&FrameVcModel>,
    u: &Utterance,
    vocoder: &dyn VocoderBackend,
    opts: &ConvertOptions,
) -> Result<Conversion> {
    let need = || {
        frame_vc.ok_or_else(|| {
            Error::invalid(format!(
                "{} conversion needs the frame decoder",
                bundle.method
            ))
        })
    };
    match bundle.method {
        Method::Cascade => convert_cascade(bundle, need()?, u, vocoder, opts),
        Method::Stg => convert_stg(bundle, u, vocoder, opts),
        Method::Lsc => convert_lsc(bundle, need()?, u, vocoder, opts),
    }
}

/// Converts utterances in parallel. Each item gets its own dump
/// subdirectory named after the utterance id.
pub fn convert_all(
    bundle: &MethodBundle,
    frame_vc: Option<&FrameVcModel>,
    utterances: &[Utterance],
    vocoder: &dyn VocoderBackend,
    opts: &ConvertOptions,
) -> Vec<Result<Conversion>> {
    utterances
        .par_iter()
        .map(|u| {
            let mut o = opts.clone();
            o.dump_dir = opts.dump_dir.as_ref().map(|d| d.join(&u.utterance_id));
            convert(bundle, frame_vc, u, vocoder, &o)
        })
        .collect()
}
