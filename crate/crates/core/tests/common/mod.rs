#![allow(dead_code)]

use fac_core::corpus::{split_corpus, ParallelCorpus, Split, SplitSizes};
use fac_core::extractors::{ExtractorSpec, ToyPpgConfig};
use fac_core::features::{MelAnalyzer, MelConfig};
use fac_core::frame_vc::{
    frame_pair, train_frame_decoder, train_frame_decoder_on_pairs, FrameVcConfig, FrameVcModel,
    FrameVcTrainConfig,
};
use fac_core::toy::{generate_toy_corpus, train_toy_extractor, ToyConfig, ToyCorpus};

/// The default toy corpus split 50/10/0.
pub fn toy_split() -> (ToyCorpus, ParallelCorpus) {
    let toy = generate_toy_corpus(&ToyConfig::default()).unwrap();
    let corpus = split_corpus(
        &toy.corpus,
        SplitSizes {
            train: 50,
            dev: 10,
            test: 0,
        },
        0,
    )
    .unwrap();
    (toy, corpus)
}

pub fn identity_spec() -> ExtractorSpec {
    ExtractorSpec::Mel {
        mel: MelConfig::default(),
    }
}

/// Toy PPG trained on both speakers of the training split.
pub fn toy_ppg_spec(toy: &ToyCorpus, corpus: &ParallelCorpus) -> ExtractorSpec {
    let ids: Vec<&str> = corpus
        .split_pairs(Split::Train)
        .into_iter()
        .flat_map(|p| {
            [
                p.source.utterance_id.as_str(),
                p.reference.utterance_id.as_str(),
            ]
        })
        .collect();
    let ppg =
        train_toy_extractor(toy, &ids, &MelConfig::default(), &ToyPpgConfig::default()).unwrap();
    ExtractorSpec::ToyPpg(ppg)
}

/// Frame decoder trained on the source speaker's training utterances.
pub fn frame_vc(corpus: &ParallelCorpus, spec: &ExtractorSpec, steps: usize) -> FrameVcModel {
    let backend = spec.build().unwrap();
    let source: Vec<_> = corpus
        .split_pairs(Split::Train)
        .into_iter()
        .map(|p| p.source.clone())
        .collect();
    let cfg = FrameVcTrainConfig {
        steps,
        ..Default::default()
    };
    train_frame_decoder(
        &source,
        backend.as_ref(),
        &MelConfig::default(),
        &FrameVcConfig::default(),
        &cfg,
    )
    .unwrap()
    .model
}

/// Identity-extractor decoder trained to copy mels of both speakers, so it
/// acts as a copy operator on either speaker's spectra.
pub fn copy_frame_vc(corpus: &ParallelCorpus, steps: usize) -> FrameVcModel {
    let mel = MelConfig::default();
    let spec = identity_spec();
    let backend = spec.build().unwrap();
    let analyzer = MelAnalyzer::new(&mel).unwrap();
    let pairs: Vec<_> = corpus
        .split_pairs(Split::Train)
        .into_iter()
        .flat_map(|p| [&p.source, &p.reference])
        .map(|u| frame_pair(u, backend.as_ref(), &analyzer).unwrap())
        .collect();
    let cfg = FrameVcTrainConfig {
        steps,
        ..Default::default()
    };
    train_frame_decoder_on_pairs(
        &pairs,
        backend.as_ref(),
        "copy",
        &mel,
        &FrameVcConfig::default(),
        &cfg,
    )
    .unwrap()
    .model
}
