mod common;

use std::sync::OnceLock;

use fac_core::corpus::{ParallelCorpus, Split};
use fac_core::extractors::{align_to_grid, extract, ExtractorRegistry, ExtractorSpec};
use fac_core::features::{GriffinLimVocoder, MelConfig, MelSpectrogram};
use fac_core::frame_vc::{convert_a2o, FrameVcModel};
use fac_core::pipelines::*;
use fac_core::seq2seq::{InitScheme, Seq2seqConfig, Seq2seqTrainConfig};
use fac_core::toy::ToyCorpus;
use fac_core::Error;

struct Fixture {
    toy: ToyCorpus,
    corpus: ParallelCorpus,
    identity_vc: FrameVcModel,
    copy_vc: FrameVcModel,
    ppg_spec: ExtractorSpec,
    ppg_vc: FrameVcModel,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (toy, corpus) = common::toy_split();
        let identity_vc = common::frame_vc(&corpus, &common::identity_spec(), 1000);
        let copy_vc = common::copy_frame_vc(&corpus, 1000);
        let ppg_spec = common::toy_ppg_spec(&toy, &corpus);
        let ppg_vc = common::frame_vc(&corpus, &ppg_spec, 300);
        Fixture {
            toy,
            corpus,
            identity_vc,
            copy_vc,
            ppg_spec,
            ppg_vc,
        }
    })
}

fn quick(steps: usize) -> MethodTrainConfig {
    MethodTrainConfig {
        train: Seq2seqTrainConfig {
            steps,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn pass_through() -> MethodTrainConfig {
    MethodTrainConfig {
        model: Seq2seqConfig {
            init: InitScheme::PassThrough,
            ..Default::default()
        },
        train: Seq2seqTrainConfig {
            steps: 0,
            normalize: false,
            ..Default::default()
        },
    }
}

fn vocoder() -> GriffinLimVocoder {
    GriffinLimVocoder::new(&MelConfig::default(), 16).unwrap()
}

fn dev_utterances(c: &ParallelCorpus) -> Vec<fac_core::audio::Utterance> {
    c.split_pairs(Split::Dev)
        .into_iter()
        .map(|p| p.source.clone())
        .collect()
}

#[test]
fn graphs_follow_method_order() {
    for m in Method::ALL {
        let g = ConversionGraph::build(m, 80, "toy-ppg", 6);
        g.validate().unwrap();
        assert_eq!(g.kinds(), stage_order(m));
    }
    assert_eq!(
        ConversionGraph::build(Method::Stg, 80, "x", 6).stages.len(),
        2
    );

    let mut g = ConversionGraph::build(Method::Cascade, 80, "x", 6);
    g.stages.swap(1, 2);
    assert!(g.validate().is_err());
    let mut g = ConversionGraph::build(Method::Lsc, 80, "x", 6);
    g.stages[1].input_dim = 7;
    assert!(matches!(g.validate(), Err(Error::DimensionMismatch(_))));
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
    }
    assert!("tts".parse::<Method>().is_err());
}

#[test]
fn bundle_dims_follow_graph() {
    let f = fixture();
    let cascade = train_cascade(&f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(2), None).unwrap();
    assert_eq!(
        (cascade.seq2seq.input_dim, cascade.seq2seq.output_dim),
        (80, 80)
    );
    let stg = train_stg(&f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(2), None).unwrap();
    assert_eq!(stg.seq2seq.output_dim, 80);
    assert_eq!(stg.graph.stages.len(), 2);
    let lsc = train_lsc(&f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(2), None).unwrap();
    assert_eq!((lsc.seq2seq.input_dim, lsc.seq2seq.output_dim), (6, 6));
}

#[test]
fn empty_training_split_is_rejected() {
    let f = fixture();
    let mut c = f.corpus.clone();
    c.splits.dev.append(&mut c.splits.train);
    for m in Method::ALL {
        assert!(
            train_method(m, &c, &f.ppg_vc, &f.ppg_spec, &quick(1), None).is_err(),
            "{m}"
        );
    }
}

#[test]
fn frame_decoder_stays_frozen() {
    let f = fixture();
    let before = f.ppg_vc.parameter_hash();
    for m in Method::ALL {
        let b = train_method(m, &f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(3), None).unwrap();
        assert_eq!(f.ppg_vc.parameter_hash(), before);
        assert_eq!(b.provenance.frame_vc_hash, before);
    }
}

#[test]
fn bundle_ids_are_reproducible() {
    let f = fixture();
    let a = train_stg(&f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(3), None).unwrap();
    let b = train_stg(&f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(3), None).unwrap();
    assert_eq!(a.bundle_id(), b.bundle_id());
    assert_eq!(a.provenance.corpus_hash, f.corpus.content_hash());
    let mut cfg = quick(3);
    cfg.train.seed = 9;
    let c = train_stg(&f.corpus, &f.ppg_vc, &f.ppg_spec, &cfg, None).unwrap();
    assert_ne!(a.bundle_id(), c.bundle_id());
}

#[test]
fn wiring_identity_for_lsc() {
    let f = fixture();
    let spec = common::identity_spec();
    let bundle = train_lsc(&f.corpus, &f.identity_vc, &spec, &pass_through(), None).unwrap();
    let mut reg = ExtractorRegistry::new();
    reg.register(spec.build().unwrap());
    let voc = vocoder();
    for u in dev_utterances(&f.corpus).iter().take(10) {
        let c = convert_lsc(&bundle, &f.identity_vc, u, &voc, &ConvertOptions::default()).unwrap();
        let direct = convert_a2o(&f.identity_vc, u, &reg).unwrap();
        assert!(
            c.mel.values.bitwise_eq(&direct.values),
            "{}",
            u.utterance_id
        );
        assert!(c.stopped_naturally);
    }
}

#[test]
fn traces_show_which_models_run() {
    let f = fixture();
    let voc = vocoder();
    let u = &dev_utterances(&f.corpus)[0];
    for m in Method::ALL {
        let b = train_method(m, &f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(2), None).unwrap();
        let c = convert(&b, Some(&f.ppg_vc), u, &voc, &ConvertOptions::default()).unwrap();
        assert_eq!(c.executed_stages(), stage_order(m), "{m}");
        assert_eq!(c.loaded_frame_vc(), m != Method::Stg, "{m}");
    }
    let stg = train_stg(&f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(2), None).unwrap();
    let c = convert(&stg, None, u, &voc, &ConvertOptions::default()).unwrap();
    assert!(!c.loaded_frame_vc());
    let lsc = train_lsc(&f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(2), None).unwrap();
    assert!(convert(&lsc, None, u, &voc, &ConvertOptions::default()).is_err());
}

#[test]
fn wrong_frame_decoder_is_rejected() {
    let f = fixture();
    let voc = vocoder();
    let u = &dev_utterances(&f.corpus)[0];
    let lsc = train_lsc(&f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(1), None).unwrap();
    let err = convert_lsc(&lsc, &f.identity_vc, u, &voc, &ConvertOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn lsc_ppg_outputs_stay_on_simplex() {
    let f = fixture();
    let b = train_lsc(&f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(5), None).unwrap();
    let u = &dev_utterances(&f.corpus)[1];
    let c = convert_lsc(&b, &f.ppg_vc, u, &vocoder(), &ConvertOptions::default()).unwrap();
    let Some(Artifact::Latent(l)) = c.intermediate("seq2seq") else {
        panic!("no seq2seq latents")
    };
    for row in l.values.iter_rows() {
        assert!(row.iter().all(|v| *v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn cascade_with_identity_second_stage_keeps_stage_one_mel() {
    let f = fixture();
    let spec = common::identity_spec();
    let bundle = train_cascade(&f.corpus, &f.copy_vc, &spec, &quick(2000), None).unwrap();
    let voc = vocoder();
    let mut worst: f64 = 0.0;
    for u in dev_utterances(&f.corpus) {
        let c = convert_cascade(&bundle, &f.copy_vc, &u, &voc, &ConvertOptions::default()).unwrap();
        let Some(Artifact::Mel(stage1)) = c.intermediate("seq2seq") else {
            panic!("no stage-1 mel")
        };
        assert!(!c.trace.contains(&TraceEvent::VocodedForExtraction));
        worst = worst.max(c.mel.values.mean_abs_diff(&stage1.values));
        assert_eq!(c.mel.frames(), stage1.frames());

        let ratio = c.output.duration_secs() / u.duration_secs();
        assert!((0.3..=3.0).contains(&ratio), "duration ratio {ratio}");
        assert!(c.output.samples.iter().all(|s| s.is_finite()));
    }
    assert!(worst < 0.1, "worst per-frame L1 {worst}");
}

#[test]
fn synthetic_targets_preserve_count_and_length() {
    let f = fixture();
    let backend = f.ppg_spec.build().unwrap();
    let mut reg = ExtractorRegistry::new();
    reg.register(backend.clone());
    assert!(generate_synthetic_targets(&f.ppg_vc, &[], &reg)
        .unwrap()
        .is_empty());
    let native: Vec<_> = f
        .corpus
        .split_pairs(Split::Train)
        .into_iter()
        .map(|p| p.reference.clone())
        .collect();
    let targets = generate_synthetic_targets(&f.ppg_vc, &native, &reg).unwrap();
    assert_eq!(targets.len(), native.len());
    for (u, t) in native.iter().zip(&targets) {
        let aligned = align_to_grid(&extract(u, backend.as_ref()).unwrap(), 16.0).rows();
        assert!(t.frames().abs_diff(aligned) <= 1);
    }
    assert!(f.toy.corpus.len() >= native.len());
}

#[test]
fn conversion_is_reproducible() {
    let f = fixture();
    let b = train_lsc(&f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(5), None).unwrap();
    let u = &dev_utterances(&f.corpus)[2];
    let voc = vocoder();
    let a = convert_lsc(&b, &f.ppg_vc, u, &voc, &ConvertOptions::default()).unwrap();
    let c = convert_lsc(&b, &f.ppg_vc, u, &voc, &ConvertOptions::default()).unwrap();
    assert_eq!(a.output.samples, c.output.samples);
}

#[test]
fn bundle_directory_round_trip() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    for m in Method::ALL {
        let dir = tmp.path().join(m.as_str());
        let b = train_method(m, &f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(2), None).unwrap();
        b.save(&dir, Some(&f.ppg_vc)).unwrap();
        let back = MethodBundle::load(&dir).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.bundle_id(), b.bundle_id());
        assert_eq!(dir.join(FRAME_VC_FILE).exists(), m != Method::Stg);
        if m != Method::Stg {
            assert_eq!(load_frame_vc(&dir).unwrap(), f.ppg_vc);
        } else {
            assert!(load_frame_vc(&dir).is_err());
        }
    }
}

#[test]
fn dump_dir_receives_intermediates() {
    let f = fixture();
    let b = train_cascade(&f.corpus, &f.ppg_vc, &f.ppg_spec, &quick(2), None).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let opts = ConvertOptions {
        dump_dir: Some(tmp.path().to_path_buf()),
        ..Default::default()
    };
    let u = &dev_utterances(&f.corpus)[0];
    let c = convert_cascade(&b, &f.ppg_vc, u, &vocoder(), &opts).unwrap();
    for i in &c.intermediates {
        let exists = match i.artifact {
            Artifact::Waveform(_) => tmp.path().join(format!("{}.wav", i.name)).exists(),
            _ => tmp.path().join(format!("{}.json", i.name)).exists(),
        };
        assert!(exists, "{}", i.name);
    }
    let stage1: MelSpectrogram =
        fac_core::features::dump::read_mel(&tmp.path().join("seq2seq")).unwrap();
    assert!(
        matches!(c.intermediate("seq2seq"), Some(Artifact::Mel(m)) if m.values.bitwise_eq(&stage1.values))
    );
}
