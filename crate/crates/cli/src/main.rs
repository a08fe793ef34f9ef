use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fac_cli::config::FacConfig;
use fac_cli::server::{self, AppState};
use fac_cli::sessions::{build_sessions, load_sessions, save_sessions, SampleManifest};
use fac_cli::store::RatingStore;
use fac_core::audio::{write_wav, Utterance};
use fac_core::corpus::{
    export_manifest, ingest_corpus, load_manifest, load_utterance, read_transcript_table,
    split_corpus, ParallelCorpus, Split,
};
use fac_core::evaluation::{
    build_report, correlation_report, read_ratings_csv, reference_table, render_table,
    score_system, AsrClient, Axis, CommandAsr, HttpAsr, RatingRecord, REFERENCE_CORRELATIONS,
};
use fac_core::extractors::{extract, train_toy_quantized, write_latent, ExtractorSpec};
use fac_core::features::{
    mel_analyze, CommandVocoder, GriffinLimVocoder, MelConfig, VocoderBackend,
};
use fac_core::frame_vc::{train_frame_decoder, FrameVcModel};
use fac_core::nn::Checkpoint;
use fac_core::pipelines::{
    convert_all, load_frame_vc, train_method, Artifact, Method, MethodBundle,
};
use fac_core::toy::{generate_toy_corpus, train_toy_extractor, write_corpus_dirs};

#[derive(Parser)]
#[command(
    name = "fac",
    version,
    about = "Ground-truth-free foreign accent conversion toolkit"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seeds of the workflow.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a parallel corpus, split it and write a manifest.
    Prepare {
        #[arg(long)]
        source_dir: PathBuf,
        #[arg(long)]
        reference_dir: PathBuf,
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for the resampled WAVs; defaults to `audio/` beside the manifest.
        #[arg(long)]
        audio_dir: Option<PathBuf>,
    },
    /// Generate the synthetic toy corpus, its manifest and toy extractors.
    Toy {
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract latent sequences for every utterance of a manifest.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// Extractor description (JSON); defaults to the mel identity extractor.
        #[arg(long)]
        extractor: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Train the frame decoder or one of the conversion methods.
    Train {
        #[arg(long, value_enum)]
        method: TrainTarget,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// Frame decoder checkpoint, required for the conversion methods.
        #[arg(long)]
        frame_vc: Option<PathBuf>,
        /// Seq2seq checkpoint to initialize from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Checkpoint path (frame-vc) or bundle directory (methods).
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert WAV files with a trained bundle.
    Convert {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        bundle: PathBuf,
        /// A WAV file or a directory of WAV files.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every intermediate artifact under `<out>/intermediates/`.
        #[arg(long)]
        dump_intermediates: bool,
    },
    /// Score systems with an ASR engine and aggregate listener ratings.
    Eval {
        /// Directory of `<system>/<prompt>.wav` files to transcribe.
        #[arg(long)]
        systems: Option<PathBuf>,
        /// Transcript table for the prompts in `--systems`.
        #[arg(long)]
        transcripts: Option<PathBuf>,
        #[arg(long)]
        asr_command: Option<String>,
        #[arg(long)]
        asr_url: Option<String>,
        /// Ratings CSV as written by `fac export`.
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// Report correlations over the bundled reference results table.
        #[arg(long)]
        reference_table: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON-lines file receiving per-utterance scores.
        #[arg(long)]
        per_utterance: Option<PathBuf>,
    },
    /// Build listening-test sessions.
    Sessions {
        /// Existing sample manifest (JSON).
        #[arg(long, conflicts_with = "systems_dir")]
        samples: Option<PathBuf>,
        /// Build the sample manifest from `<dir>/<system>/<prompt>.wav`.
        #[arg(long)]
        systems_dir: Option<PathBuf>,
        #[arg(long, default_value = "source")]
        source_system: String,
        #[arg(long, default_value = "target")]
        target_system: String,
        /// Where to write the generated sample manifest.
        #[arg(long)]
        samples_out: Option<PathBuf>,
        #[arg(long)]
        listeners: usize,
        #[arg(long)]
        per_listener: usize,
        #[arg(long, value_delimiter = ',', default_value = "naturalness,similarity")]
        axes: Vec<AxisArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the listening-test HTTP service.
    Serve {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        sessions: PathBuf,
        /// Append-only JSON-lines rating log.
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Export the rating log as CSV.
    Export {
        #[arg(long)]
        store: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Cascade,
    Stg,
    Lsc,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cascade => Method::Cascade,
            MethodArg::Stg => Method::Stg,
            MethodArg::Lsc => Method::Lsc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainTarget {
    FrameVc,
    Cascade,
    Stg,
    Lsc,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Naturalness,
    Accentedness,
    Similarity,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Naturalness => Axis::Naturalness,
            AxisArg::Accentedness => Axis::Accentedness,
            AxisArg::Similarity => Axis::Similarity,
        }
    }
}

impl Common {
    fn config(&self) -> Result<FacConfig> {
        let mut cfg = FacConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seq2seq.model.seed = seed;
            cfg.seq2seq.train.seed = seed;
            cfg.frame_vc.model.seed = seed;
            cfg.frame_vc.train.seed = seed;
            cfg.toy.corpus.seed = seed;
            cfg.toy.ppg.seed = seed;
            cfg.toy.quantized.seed = seed;
        }
        Ok(cfg)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let common = cli.common;
    match cli.command {
        Command::Prepare {
            source_dir,
            reference_dir,
            transcripts,
            out,
            audio_dir,
        } => {
            let cfg = common.config()?;
            let (corpus, report) = ingest_corpus(&source_dir, &reference_dir, &transcripts)?;
            let corpus = split_corpus(&corpus, cfg.split, common.seed())?;
            let audio = audio_dir.unwrap_or_else(|| sibling(&out, "audio"));
            export_manifest(&corpus, &out, &audio)?;
            println!(
                "{} pairs ({} train / {} dev / {} test), {} excluded",
                corpus.len(),
                corpus.splits.train.len(),
                corpus.splits.dev.len(),
                corpus.splits.test.len(),
                report.excluded()
            );
        }
        Command::Toy { out } => toy(&common.config()?, &out)?,
        Command::Extract {
            manifest,
            extractor,
            out,
            split,
        } => {
            let cfg = common.config()?;
            let corpus = load_manifest(&manifest)?;
            let backend = extractor_spec(extractor.as_deref(), &cfg.mel)?.build()?;
            std::fs::create_dir_all(&out)?;
            let mut n = 0;
            for u in utterances(&corpus, split) {
                let l = extract(u, backend.as_ref())?;
                write_latent(&out.join(&u.utterance_id), &l)?;
                n += 1;
            }
            println!("extracted {n} utterances with {}", backend.extractor_id());
        }
        Command::Train {
            method,
            manifest,
            extractor,
            frame_vc,
            pretrained,
            out,
        } => {
            let cfg = common.config()?;
            let corpus = load_manifest(&manifest)?;
            let spec = extractor_spec(extractor.as_deref(), &cfg.mel)?;
            let method = match method {
                TrainTarget::FrameVc => return train_frame_vc(&cfg, &corpus, &spec, &out),
                TrainTarget::Cascade => Method::Cascade,
                TrainTarget::Stg => Method::Stg,
                TrainTarget::Lsc => Method::Lsc,
            };
            let Some(fv_path) = frame_vc else {
                bail!("--frame-vc is required to train {method}");
            };
            let fv = FrameVcModel::load(&fv_path)?;
            let pre = pretrained.map(|p| Checkpoint::load(&p)).transpose()?;
            let bundle = train_method(method, &corpus, &fv, &spec, &cfg.seq2seq, pre.as_ref())?;
            bundle.save(&out, Some(&fv))?;
            println!(
                "{method} bundle {} written to {}",
                bundle.bundle_id(),
                out.display()
            );
        }
        Command::Convert {
            method,
            bundle,
            input,
            out,
            dump_intermediates,
        } => {
            let cfg = common.config()?;
            convert(
                &cfg,
                method.into(),
                &bundle,
                &input,
                &out,
                dump_intermediates,
            )?;
        }
        Command::Eval {
            systems,
            transcripts,
            asr_command,
            asr_url,
            ratings,
            reference_table: use_reference,
            out,
            per_utterance,
        } => {
            let cfg = common.config()?;
            if use_reference {
                let c = correlation_report(&reference_table()?)?;
                println!(
                    "reference table: accentedness vs CER r = {:.3} (published {:.3}), vs WER r = {:.3} (published {:.3}), n = {}",
                    c.accentedness_vs_cer,
                    REFERENCE_CORRELATIONS.0,
                    c.accentedness_vs_wer,
                    REFERENCE_CORRELATIONS.1,
                    c.n
                );
            }
            let mut scores = BTreeMap::new();
            if let Some(dir) = systems {
                let Some(table) = transcripts else {
                    bail!("--systems needs --transcripts");
                };
                let asr: Box<dyn AsrClient> = match (
                    asr_command.or(cfg.asr.command.clone()),
                    asr_url.or(cfg.asr.url.clone()),
                ) {
                    (Some(c), _) => Box::new(CommandAsr::new(c)),
                    (None, Some(u)) => Box::new(HttpAsr::new(u)),
                    (None, None) => bail!("scoring needs --asr-command or --asr-url"),
                };
                let texts = read_transcript_table(&table)?;
                for (system, samples) in system_samples(&dir, &texts)? {
                    let s = score_system(&samples, asr.as_ref(), cfg.asr.parallelism)?;
                    if !s.exclusions.is_empty() {
                        eprintln!("{system}: {} samples excluded", s.exclusions.len());
                    }
                    scores.insert(system, s);
                }
                if let Some(path) = per_utterance {
                    let mut lines = String::new();
                    for (system, s) in &scores {
                        for u in &s.per_utterance {
                            let mut v = serde_json::to_value(u)?;
                            v["system_id"] = system.clone().into();
                            lines.push_str(&serde_json::to_string(&v)?);
                            lines.push('\n');
                        }
                    }
                    std::fs::write(&path, lines)?;
                }
            }
            let records: Vec<RatingRecord> = match ratings {
                Some(p) => read_ratings_csv(
                    std::fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?,
                )?,
                None => Vec::new(),
            };
            if !scores.is_empty() || !records.is_empty() {
                let report = build_report(&scores, &records)?;
                print!("{}", render_table(&report));
                if let Some(path) = out {
                    std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
                }
            } else if !use_reference {
                bail!("nothing to evaluate: pass --systems, --ratings or --reference-table");
            }
        }
        Command::Sessions {
            samples,
            systems_dir,
            source_system,
            target_system,
            samples_out,
            listeners,
            per_listener,
            axes,
            out,
        } => {
            let manifest = match (samples, systems_dir) {
                (Some(p), _) => SampleManifest::load(&p)?,
                (None, Some(dir)) => {
                    let m = SampleManifest::from_system_dirs(&dir, &source_system, &target_system)?;
                    let path = samples_out.unwrap_or_else(|| sibling(&out, "samples.json"));
                    m.save(&path)?;
                    println!("sample manifest written to {}", path.display());
                    m
                }
                (None, None) => bail!("pass --samples or --systems-dir"),
            };
            let axes: Vec<Axis> = axes.into_iter().map(Axis::from).collect();
            let sessions =
                build_sessions(&manifest, &axes, listeners, per_listener, common.seed())?;
            save_sessions(&out, &sessions)?;
            println!(
                "{} sessions, {} task slots",
                sessions.len(),
                sessions.iter().map(|s| s.tasks.len()).sum::<usize>()
            );
        }
        Command::Serve {
            samples,
            sessions,
            store,
            host,
            port,
        } => {
            let state = AppState::new(
                SampleManifest::load(&samples)?,
                load_sessions(&sessions)?,
                Arc::new(RatingStore::open(&store)?),
            )?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = server::bind(SocketAddr::new(host, port)).await?;
                server::serve(listener, Arc::new(state)).await
            })?;
        }
        Command::Export { store, out } => {
            let csv = RatingStore::open(&store)?.export_csv();
            match out {
                Some(p) => std::fs::write(&p, csv)?,
                None => std::io::Write::write_all(&mut std::io::stdout(), &csv)?,
            }
        }
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn extractor_spec(path: Option<&Path>, mel: &MelConfig) -> Result<ExtractorSpec> {
    Ok(match path {
        Some(p) => ExtractorSpec::load(p)?,
        None => ExtractorSpec::Mel { mel: mel.clone() },
    })
}

fn utterances(corpus: &ParallelCorpus, split: SplitArg) -> Vec<&Utterance> {
    let splits: Vec<Split> = match split {
        SplitArg::Train => vec![Split::Train],
        SplitArg::Dev => vec![Split::Dev],
        SplitArg::Test => vec![Split::Test],
        SplitArg::All => Split::ALL.to_vec(),
    };
    splits
        .into_iter()
        .flat_map(|s| corpus.split_pairs(s))
        .flat_map(|p| [&p.source, &p.reference])
        .collect()
}

fn toy(cfg: &FacConfig, out: &Path) -> Result<()> {
    let toy = generate_toy_corpus(&cfg.toy.corpus)?;
    write_corpus_dirs(&toy.corpus, &out.join("corpus"))?;
    let corpus = split_corpus(&toy.corpus, cfg.toy.split, cfg.toy.corpus.seed)?;
    export_manifest(&corpus, &out.join("manifest.jsonl"), &out.join("audio"))?;
    let train: Vec<&Utterance> = corpus
        .split_pairs(Split::Train)
        .into_iter()
        .flat_map(|p| [&p.source, &p.reference])
        .collect();
    let ids: Vec<&str> = train.iter().map(|u| u.utterance_id.as_str()).collect();
    let dir = out.join("extractors");
    std::fs::create_dir_all(&dir)?;
    ExtractorSpec::Mel {
        mel: cfg.mel.clone(),
    }
    .save(&dir.join("mel.json"))?;
    let ppg = train_toy_extractor(&toy, &ids, &cfg.mel, &cfg.toy.ppg)?;
    ExtractorSpec::ToyPpg(ppg).save(&dir.join("toy-ppg.json"))?;
    let mels = train
        .iter()
        .map(|u| mel_analyze(u, &cfg.mel))
        .collect::<fac_core::Result<Vec<_>>>()?;
    let vq = train_toy_quantized(&mels, &cfg.mel, &cfg.toy.quantized)?;
    ExtractorSpec::ToyQuantized(vq).save(&dir.join("toy-vq.json"))?;
    println!(
        "toy corpus of {} pairs in {}; manifest, audio and extractors written",
        corpus.len(),
        out.display()
    );
    Ok(())
}

fn train_frame_vc(
    cfg: &FacConfig,
    corpus: &ParallelCorpus,
    spec: &ExtractorSpec,
    out: &Path,
) -> Result<()> {
    let backend = spec.build()?;
    let utts: Vec<Utterance> = corpus
        .split_pairs(Split::Train)
        .into_iter()
        .map(|p| p.source.clone())
        .collect();
    let trained = train_frame_decoder(
        &utts,
        backend.as_ref(),
        &cfg.mel,
        &cfg.frame_vc.model,
        &cfg.frame_vc.train,
    )?;
    trained.model.save(out)?;
    println!(
        "frame decoder for {} on {} written to {} (final loss {:.4})",
        trained.model.target_speaker_id,
        trained.model.extractor_id,
        out.display(),
        trained.log.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn vocoder(cfg: &FacConfig, mel: &MelConfig) -> Result<Box<dyn VocoderBackend>> {
    Ok(match &cfg.vocoder.command {
        Some(command) => Box::new(CommandVocoder {
            id: "external".into(),
            command: command.clone(),
            sample_rate: mel.sample_rate,
        }),
        None => Box::new(GriffinLimVocoder::new(
            mel,
            cfg.vocoder.griffin_lim_iterations,
        )?),
    })
}

fn wav_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "wav"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no WAV files in {}", input.display());
    }
    Ok(files)
}

fn convert(
    cfg: &FacConfig,
    method: Method,
    bundle_dir: &Path,
    input: &Path,
    out: &Path,
    dump: bool,
) -> Result<()> {
    let bundle = MethodBundle::load(bundle_dir)?;
    if bundle.method != method {
        bail!(
            "{} holds a {} bundle, not {method}",
            bundle_dir.display(),
            bundle.method
        );
    }
    let fv = method
        .uses_frame_decoder()
        .then(|| load_frame_vc(bundle_dir))
        .transpose()?;
    let voc = vocoder(cfg, &bundle.provenance.mel)?;
    let utts = wav_inputs(input)?
        .iter()
        .map(|p| {
            let prompt = p.file_stem().unwrap().to_string_lossy().into_owned();
            load_utterance(p, "input", &prompt, "")
        })
        .collect::<fac_core::Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    let mut opts = cfg.convert.clone();
    if dump {
        opts.dump_dir = Some(out.join("intermediates"));
    }
    let mut failed = 0;
    for (u, r) in utts.iter().zip(convert_all(
        &bundle,
        fv.as_ref(),
        &utts,
        voc.as_ref(),
        &opts,
    )) {
        match r {
            Ok(c) => {
                write_wav(
                    &out.join(format!("{}.wav", u.prompt_id)),
                    c.output.sample_rate,
                    &c.output.samples,
                )?;
                let seq2seq_frames =
                    c.intermediates
                        .iter()
                        .find(|i| i.name == "seq2seq")
                        .map(|i| match &i.artifact {
                            Artifact::Mel(m) => m.frames(),
                            Artifact::Latent(l) => l.frames(),
                            Artifact::Waveform(w) => w.samples.len(),
                        });
                println!(
                    "{}: {} samples, seq2seq output {:?}, stopped naturally: {}",
                    u.prompt_id,
                    c.output.samples.len(),
                    seq2seq_frames,
                    c.stopped_naturally
                );
            }
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", u.prompt_id);
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} conversions failed", utts.len());
    }
    Ok(())
}

/// `<dir>/<system>/<prompt>.wav` grouped by system, paired with reference transcripts.
fn system_samples(
    dir: &Path,
    texts: &std::collections::HashMap<String, String>,
) -> Result<BTreeMap<String, Vec<(Utterance, String)>>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let sys_dir = entry?.path();
        if !sys_dir.is_dir() {
            continue;
        }
        let system = sys_dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut samples = Vec::new();
        for wav in wav_inputs(&sys_dir)? {
            let prompt = wav.file_stem().unwrap().to_string_lossy().into_owned();
            let Some(text) = texts.get(&prompt) else {
                bail!("no transcript for prompt {prompt} ({})", wav.display());
            };
            samples.push((load_utterance(&wav, &system, &prompt, text)?, text.clone()));
        }
        out.insert(system, samples);
    }
    Ok(out)
}
