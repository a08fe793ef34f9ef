//! Synthetic parallel corpus for tests and demos.
//!
//! Each "phone" is a harmonic series shaped by three formant resonances, so
//! its mel spectrum is a fixed band pattern. The reference speaker uses the
//! inventory as is. The non-native speaker has a lower pitch, scales every
//! formant (speaker identity), stretches durations and mispronounces one
//! phone (accent). Transcripts spell the phone names.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{quantize_pcm16, write_wav, Utterance};
use crate::corpus::{ParallelCorpus, UtterancePair};
use crate::error::{Error, Result};
use crate::extractors::{train_toy_ppg, ToyPpg, ToyPpgConfig};
use crate::features::{MelAnalyzer, MelConfig};
use crate::matrix::Matrix;

pub struct ToyPhone {
    pub name: &'static str,
    pub formants: [f64; 3],
}

pub const PHONES: [ToyPhone; 6] = [
    ToyPhone {
        name: "AA",
        formants: [700.0, 1200.0, 2600.0],
    },
    ToyPhone {
        name: "IY",
        formants: [300.0, 2300.0, 3000.0],
    },
    ToyPhone {
        name: "UW",
        formants: [320.0, 900.0, 2300.0],
    },
    ToyPhone {
        name: "EH",
        formants: [550.0, 1800.0, 2500.0],
    },
    ToyPhone {
        name: "OW",
        formants: [450.0, 850.0, 2400.0],
    },
    ToyPhone {
        name: "SH",
        formants: [2800.0, 3900.0, 5200.0],
    },
];

/// The non-native realization of IY.
const ACCENTED_IY: [f64; 3] = [480.0, 1900.0, 2700.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub pairs: usize,
    pub seed: u64,
    pub sample_rate: u32,
    /// Samples per duration unit. Matches the mel hop so labels align.
    pub unit: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    pub min_units: usize,
    pub max_units: usize,
    pub source_speaker: String,
    pub reference_speaker: String,
    pub reference_f0: f64,
    pub source_f0: f64,
    pub source_formant_scale: f64,
    pub source_stretch: (f64, f64),
    pub amplitude: f64,
    pub noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            pairs: 60,
            seed: 0,
            sample_rate: 16000,
            unit: 256,
            min_phones: 3,
            max_phones: 5,
            min_units: 3,
            max_units: 5,
            source_speaker: "toy_l2".into(),
            reference_speaker: "toy_l1".into(),
            reference_f0: 110.0,
            source_f0: 95.0,
            source_formant_scale: 0.88,
            source_stretch: (1.2, 1.6),
            amplitude: 0.3,
            noise: 1e-4,
        }
    }
}

/// A toy corpus plus per-sample phone labels for every utterance.
pub struct ToyCorpus {
    pub corpus: ParallelCorpus,
    /// utterance id -> phone index of every sample
    pub sample_labels: BTreeMap<String, Vec<usize>>,
}

impl ToyCorpus {
    /// Phone label at the centre of each analysis frame.
    pub fn frame_labels(
        &self,
        utterance_id: &str,
        hop: usize,
        frames: usize,
    ) -> Option<Vec<usize>> {
        let labels = self.sample_labels.get(utterance_id)?;
        Some(
            (0..frames)
                .map(|t| labels[(t * hop).min(labels.len() - 1)])
                .collect(),
        )
    }
}

/// Trains the toy PPG extractor on every frame of the given utterances,
/// labelled with the phone at each frame centre.
pub fn train_toy_extractor(
    toy: &ToyCorpus,
    utterance_ids: &[&str],
    mel: &MelConfig,
    cfg: &ToyPpgConfig,
) -> Result<ToyPpg> {
    let analyzer = MelAnalyzer::new(mel)?;
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for id in utterance_ids {
        let u = toy
            .corpus
            .pairs
            .values()
            .flat_map(|p| [&p.source, &p.reference])
            .find(|u| u.utterance_id == *id)
            .ok_or_else(|| Error::invalid(format!("utterance {id} is not in the toy corpus")))?;
        let m = analyzer.analyze(u)?.values;
        let l = toy
            .frame_labels(id, mel.hop_size, m.rows())
            .ok_or_else(|| Error::invalid(format!("no labels for {id}")))?;
        frames.push(m);
        labels.extend(l);
    }
    let refs: Vec<&Matrix> = frames.iter().collect();
    train_toy_ppg(&Matrix::vstack(&refs)?, &labels, PHONES.len(), mel, cfg)
}

struct Segment {
    formants: [f64; 3],
    gains: [f64; 3],
    len: usize,
    phone: usize,
}

const BANDWIDTHS: [f64; 3] = [90.0, 110.0, 150.0];
const SPECTRAL_FLOOR: f64 = 0.02;
const HIGHEST_HARMONIC_HZ: f64 = 7600.0;

/// Harmonic amplitudes of one phone under its formant envelope, scaled so
/// the waveform peak cannot exceed one.
fn harmonic_amplitudes(seg: &Segment, f0: f64) -> Vec<f64> {
    let n = (HIGHEST_HARMONIC_HZ / f0).floor() as usize;
    let amps: Vec<f64> = (1..=n)
        .map(|k| {
            let f = k as f64 * f0;
            SPECTRAL_FLOOR
                + seg
                    .formants
                    .iter()
                    .zip(&seg.gains)
                    .zip(&BANDWIDTHS)
                    .map(|((fc, g), b)| g / (1.0 + ((f - fc) / b).powi(2)))
                    .sum::<f64>()
        })
        .collect();
    let total: f64 = amps.iter().sum();
    amps.iter().map(|a| a / total).collect()
}

fn render(
    segments: &[Segment],
    f0: f64,
    cfg: &ToyConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<usize>) {
    let total: usize = segments.iter().map(|s| s.len).sum();
    let ramp = cfg.unit / 2;
    let sr = cfg.sample_rate as f64;
    let mut out = vec![0.0; total];
    let mut labels = vec![0; total];
    let mut start = 0usize;
    for seg in segments {
        let amps = harmonic_amplitudes(seg, f0);
        let lo = start.saturating_sub(ramp);
        let hi = (start + seg.len + ramp).min(total);
        for (n, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
            // linear crossfade of width 2*ramp centred on each boundary
            let rise =
                ((n as f64 - start as f64 + ramp as f64) / (2 * ramp) as f64).clamp(0.0, 1.0);
            let fall = ((start as f64 + seg.len as f64 + ramp as f64 - n as f64)
                / (2 * ramp) as f64)
                .clamp(0.0, 1.0);
            let env = rise.min(fall);
            let phase = 2.0 * PI * f0 * n as f64 / sr;
            let s: f64 = amps
                .iter()
                .enumerate()
                .map(|(k, a)| a * (phase * (k + 1) as f64).sin())
                .sum();
            *o += env * s * cfg.amplitude;
        }
        labels[start..start + seg.len].fill(seg.phone);
        start += seg.len;
    }
    for o in &mut out {
        *o += cfg.noise * rng.gen_range(-1.0..1.0);
    }
    quantize_pcm16(&mut out);
    (out, labels)
}

pub fn generate_toy_corpus(cfg: &ToyConfig) -> Result<ToyCorpus> {
    if cfg.pairs == 0 || cfg.min_phones == 0 || cfg.min_phones > cfg.max_phones {
        return Err(Error::invalid(
            "toy corpus needs pairs > 0 and 0 < min_phones <= max_phones",
        ));
    }
    if cfg.min_units == 0 || cfg.min_units > cfg.max_units {
        return Err(Error::invalid(
            "toy corpus needs 0 < min_units <= max_units",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(cfg.pairs);
    let mut sample_labels = BTreeMap::new();
    for i in 0..cfg.pairs {
        let prompt = format!("toy_{i:04}");
        let n = rng.gen_range(cfg.min_phones..=cfg.max_phones);
        let phones: Vec<usize> = (0..n).map(|_| rng.gen_range(0..PHONES.len())).collect();
        let units: Vec<usize> = (0..n)
            .map(|_| rng.gen_range(cfg.min_units..=cfg.max_units))
            .collect();
        let transcript = phones
            .iter()
            .map(|&p| PHONES[p].name)
            .collect::<Vec<_>>()
            .join(" ");

        let reference: Vec<Segment> = phones
            .iter()
            .zip(&units)
            .map(|(&p, &u)| Segment {
                formants: PHONES[p].formants,
                gains: [1.0, 0.7, 0.5],
                len: u * cfg.unit,
                phone: p,
            })
            .collect();
        let source: Vec<Segment> = phones
            .iter()
            .zip(&units)
            .map(|(&p, &u)| {
                let base = if PHONES[p].name == "IY" {
                    ACCENTED_IY
                } else {
                    PHONES[p].formants
                };
                let stretch = rng.gen_range(cfg.source_stretch.0..=cfg.source_stretch.1);
                Segment {
                    formants: base.map(|f| f * cfg.source_formant_scale),
                    gains: [1.0, 0.45, 0.3],
                    len: ((u * cfg.unit) as f64 * stretch).round() as usize,
                    phone: p,
                }
            })
            .collect();

        let mut utt = |spk: &str, segs: &[Segment], f0: f64| {
            let (samples, labels) = render(segs, f0, cfg, &mut rng);
            let id = format!("{spk}_{prompt}");
            sample_labels.insert(id.clone(), labels);
            Utterance::new(id, spk, &prompt, cfg.sample_rate, samples, &transcript)
        };
        let source = utt(&cfg.source_speaker, &source, cfg.source_f0);
        let reference = utt(&cfg.reference_speaker, &reference, cfg.reference_f0);
        pairs.push(UtterancePair { source, reference });
    }
    Ok(ToyCorpus {
        corpus: ParallelCorpus::from_pairs(pairs)?,
        sample_labels,
    })
}

/// Lays the corpus out as two speaker directories of `<prompt>.wav` files
/// plus a tab-separated transcript table, the layout `ingest_corpus` reads.
pub fn write_corpus_dirs(c: &ParallelCorpus, root: &Path) -> Result<()> {
    let (Some(src), Some(reference)) = (c.source_speaker(), c.reference_speaker()) else {
        return Err(Error::invalid("cannot write an empty corpus"));
    };
    let mut table = String::new();
    for (prompt, pair) in &c.pairs {
        for (spk, u) in [(src, &pair.source), (reference, &pair.reference)] {
            let dir = root.join(spk);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_wav(
                &dir.join(format!("{prompt}.wav")),
                u.sample_rate,
                &u.samples,
            )?;
        }
        table.push_str(&format!("{prompt}\t{}\n", pair.reference.transcript));
    }
    let path = root.join("transcripts.tsv");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))
}
