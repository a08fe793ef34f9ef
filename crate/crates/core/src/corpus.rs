//! Parallel non-native/native corpus: ingest, validation, splits and the
//! JSON-lines manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::audio::{quantize_pcm16, read_wav, resample, write_wav, Utterance, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::text::normalize_transcript;

pub const DEFAULT_SPLIT_SIZES: SplitSizes = SplitSizes {
    train: 1032,
    dev: 50,
    test: 50,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        DEFAULT_SPLIT_SIZES
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtterancePair {
    pub source: Utterance,
    pub reference: Utterance,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_of(&self, prompt: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|s| self.get(*s).iter().any(|p| p == prompt))
    }
}

/// Prompt-aligned source/reference utterances plus their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: BTreeMap<String, UtterancePair>,
    pub splits: Splits,
}

impl ParallelCorpus {
    /// Builds a corpus with every pair in the training split, then validates it.
    pub fn from_pairs(pairs: Vec<UtterancePair>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for p in pairs {
            let id = p.source.prompt_id.clone();
            if map.insert(id.clone(), p).is_some() {
                return Err(Error::invalid(format!("duplicate prompt {id}")));
            }
        }
        let splits = Splits {
            train: map.keys().cloned().collect(),
            ..Default::default()
        };
        let c = Self { pairs: map, splits };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split_pairs(&self, split: Split) -> Vec<&UtterancePair> {
        self.splits
            .get(split)
            .iter()
            .map(|p| &self.pairs[p])
            .collect()
    }

    pub fn source_speaker(&self) -> Option<&str> {
        self.pairs
            .values()
            .next()
            .map(|p| p.source.speaker_id.as_str())
    }

    pub fn reference_speaker(&self) -> Option<&str> {
        self.pairs
            .values()
            .next()
            .map(|p| p.reference.speaker_id.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        let mut src_spk = BTreeSet::new();
        let mut ref_spk = BTreeSet::new();
        for (prompt, pair) in &self.pairs {
            for u in [&pair.source, &pair.reference] {
                if &u.prompt_id != prompt {
                    return Err(Error::invalid(format!(
                        "utterance {} filed under prompt {prompt} but carries prompt {}",
                        u.utterance_id, u.prompt_id
                    )));
                }
                u.validate()?;
            }
            let (a, b) = (
                normalize_transcript(&pair.source.transcript),
                normalize_transcript(&pair.reference.transcript),
            );
            if a != b {
                return Err(Error::TranscriptMismatch {
                    prompt_id: prompt.clone(),
                    source_text: pair.source.transcript.clone(),
                    reference_text: pair.reference.transcript.clone(),
                });
            }
            src_spk.insert(pair.source.speaker_id.as_str());
            ref_spk.insert(pair.reference.speaker_id.as_str());
        }
        if src_spk.len() > 1 || ref_spk.len() > 1 {
            return Err(Error::invalid(format!(
                "expected one source and one reference speaker, found {src_spk:?} and {ref_spk:?}"
            )));
        }
        if !src_spk.is_disjoint(&ref_spk) {
            return Err(Error::invalid("source and reference speakers must differ"));
        }
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            for p in self.splits.get(split) {
                if !self.pairs.contains_key(p) {
                    return Err(Error::invalid(format!(
                        "split {split:?} names unknown prompt {p}"
                    )));
                }
                if !seen.insert(p.as_str()) {
                    return Err(Error::invalid(format!("prompt {p} appears in two splits")));
                }
            }
        }
        if seen.len() != self.pairs.len() {
            return Err(Error::invalid(format!(
                "splits cover {} of {} prompts",
                seen.len(),
                self.pairs.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 over prompt ids, split membership, transcripts and sample bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (prompt, pair) in &self.pairs {
            h.update(prompt.as_bytes());
            h.update([self.splits.split_of(prompt).map(|s| s as u8).unwrap_or(255)]);
            for u in [&pair.source, &pair.reference] {
                h.update(u.utterance_id.as_bytes());
                h.update(u.speaker_id.as_bytes());
                h.update(u.transcript.as_bytes());
                h.update(u.sample_rate.to_le_bytes());
                for s in &u.samples {
                    h.update(s.to_bits().to_le_bytes());
                }
            }
        }
        crate::nn::params::hex_digest(h)
    }
}

/// Prompts that could not be paired during ingest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub paired: usize,
    pub missing_reference: Vec<String>,
    pub missing_source: Vec<String>,
}

impl IngestReport {
    pub fn excluded(&self) -> usize {
        self.missing_reference.len() + self.missing_source.len()
    }
}

/// Parses a transcript table. Accepts `prompt_id<TAB>text` lines and the
/// festival-style `( prompt_id "text" )` lines used by ARCTIC prompt lists.
pub fn read_transcript_table(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = if let Some(inner) = line.strip_prefix('(') {
            let inner = inner.trim_end_matches(')').trim();
            inner
                .split_once(char::is_whitespace)
                .map(|(id, rest)| (id.to_string(), rest.trim().trim_matches('"').to_string()))
        } else {
            line.split_once('\t')
                .map(|(id, t)| (id.trim().to_string(), t.trim().to_string()))
        };
        match parsed {
            Some((id, t)) => {
                out.insert(id, t);
            }
            None => {
                return Err(Error::invalid(format!(
                    "{}:{}: cannot parse transcript line",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

fn list_wavs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("wav") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn speaker_from_dir(dir: &Path) -> String {
    dir.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("speaker")
        .to_string()
}

/// Loads a WAV, brings it to 16 kHz on the 16-bit grid, and attaches metadata.
pub fn load_utterance(
    path: &Path,
    speaker_id: &str,
    prompt_id: &str,
    transcript: &str,
) -> Result<Utterance> {
    let (rate, samples) = read_wav(path)?;
    let u = Utterance::new(
        format!("{speaker_id}_{prompt_id}"),
        speaker_id,
        prompt_id,
        rate,
        samples,
        transcript,
    );
    let mut u = resample(&u, DEFAULT_SAMPLE_RATE)?;
    if rate != DEFAULT_SAMPLE_RATE {
        quantize_pcm16(&mut u.samples);
    }
    u.validate()?;
    Ok(u)
}

fn transcript_for(dir: &Path, prompt: &str, table: &HashMap<String, String>) -> Result<String> {
    let sidecar = dir.join(format!("{prompt}.txt"));
    if sidecar.exists() {
        let t = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        return Ok(t.trim().to_string());
    }
    table
        .get(prompt)
        .cloned()
        .ok_or_else(|| Error::MissingTranscript(prompt.to_string()))
}

/// Pairs `<prompt_id>.wav` files across the two speaker directories.
///
/// A `<prompt_id>.txt` file beside a WAV overrides the table for that
/// utterance. All pairs land in the training split; use [`split_corpus`]
/// afterwards.
pub fn ingest_corpus(
    source_dir: &Path,
    reference_dir: &Path,
    transcript_table: &Path,
) -> Result<(ParallelCorpus, IngestReport)> {
    let table = read_transcript_table(transcript_table)?;
    let src = list_wavs(source_dir)?;
    let refs = list_wavs(reference_dir)?;
    let src_spk = speaker_from_dir(source_dir);
    let ref_spk = speaker_from_dir(reference_dir);
    let mut report = IngestReport::default();
    let mut pairs = Vec::new();
    for (prompt, src_path) in &src {
        let Some(ref_path) = refs.get(prompt) else {
            report.missing_reference.push(prompt.clone());
            continue;
        };
        let src_text = transcript_for(source_dir, prompt, &table)?;
        let ref_text = transcript_for(reference_dir, prompt, &table)?;
        if normalize_transcript(&src_text) != normalize_transcript(&ref_text) {
            return Err(Error::TranscriptMismatch {
                prompt_id: prompt.clone(),
                source_text: src_text,
                reference_text: ref_text,
            });
        }
        pairs.push(UtterancePair {
            source: load_utterance(src_path, &src_spk, prompt, &src_text)?,
            reference: load_utterance(ref_path, &ref_spk, prompt, &ref_text)?,
        });
    }
    report.missing_source = refs
        .keys()
        .filter(|p| !src.contains_key(*p))
        .cloned()
        .collect();
    if report.excluded() > 0 {
        warn!(
            missing_reference = ?report.missing_reference,
            missing_source = ?report.missing_source,
            "excluded unpaired prompts"
        );
    }
    report.paired = pairs.len();
    Ok((ParallelCorpus::from_pairs(pairs)?, report))
}

/// Seeded split over lexicographically sorted prompts. Pairs beyond
/// `sizes.total()` are dropped so the splits still cover the corpus.
pub fn split_corpus(c: &ParallelCorpus, sizes: SplitSizes, seed: u64) -> Result<ParallelCorpus> {
    if sizes.total() > c.len() {
        return Err(Error::invalid(format!(
            "split sizes {}/{}/{} exceed the {} available pairs",
            sizes.train,
            sizes.dev,
            sizes.test,
            c.len()
        )));
    }
    let mut ids: Vec<String> = c.pairs.keys().cloned().collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let take = |n: usize, from: &mut std::vec::IntoIter<String>| -> Vec<String> {
        let mut v: Vec<String> = from.by_ref().take(n).collect();
        v.sort();
        v
    };
    let mut it = ids.into_iter();
    let splits = Splits {
        train: take(sizes.train, &mut it),
        dev: take(sizes.dev, &mut it),
        test: take(sizes.test, &mut it),
    };
    let keep: BTreeSet<&String> = splits
        .train
        .iter()
        .chain(&splits.dev)
        .chain(&splits.test)
        .collect();
    let pairs = c
        .pairs
        .iter()
        .filter(|(k, _)| keep.contains(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(ParallelCorpus { pairs, splits })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Reference,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub prompt_id: String,
    pub path: PathBuf,
    pub transcript: String,
    pub split: Split,
    pub role: Role,
}

/// Writes every utterance as a 16-bit WAV under `audio_dir` and the manifest
/// to `manifest_path`. Relative paths in the manifest are relative to the
/// manifest's directory.
pub fn export_manifest(c: &ParallelCorpus, manifest_path: &Path, audio_dir: &Path) -> Result<()> {
    fs::create_dir_all(audio_dir).map_err(|e| Error::io(audio_dir, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for split in Split::ALL {
        for prompt in c.splits.get(split) {
            let pair = &c.pairs[prompt];
            for (u, role) in [
                (&pair.source, Role::Source),
                (&pair.reference, Role::Reference),
            ] {
                let wav = audio_dir.join(format!("{}.wav", u.utterance_id));
                write_wav(&wav, u.sample_rate, &u.samples)?;
                let path = wav
                    .strip_prefix(base)
                    .map(Path::to_path_buf)
                    .unwrap_or(wav.clone());
                let entry = ManifestEntry {
                    utterance_id: u.utterance_id.clone(),
                    speaker_id: u.speaker_id.clone(),
                    prompt_id: u.prompt_id.clone(),
                    path,
                    transcript: u.transcript.clone(),
                    split,
                    role,
                };
                serde_json::to_writer(&mut out, &entry)?;
                out.push(b'\n');
            }
        }
    }
    let mut f = fs::File::create(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    f.write_all(&out).map_err(|e| Error::io(manifest_path, e))
}

pub fn read_manifest(manifest_path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn load_manifest(manifest_path: &Path) -> Result<ParallelCorpus> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest_path)?;
    let mut sources: BTreeMap<String, (Utterance, Split)> = BTreeMap::new();
    let mut references: BTreeMap<String, Utterance> = BTreeMap::new();
    for e in entries {
        let path = if e.path.is_absolute() {
            e.path.clone()
        } else {
            base.join(&e.path)
        };
        let mut u = load_utterance(&path, &e.speaker_id, &e.prompt_id, &e.transcript)?;
        u.utterance_id = e.utterance_id.clone();
        match e.role {
            Role::Source => {
                sources.insert(e.prompt_id.clone(), (u, e.split));
            }
            Role::Reference => {
                references.insert(e.prompt_id.clone(), u);
            }
        }
    }
    let mut pairs = BTreeMap::new();
    let mut splits = Splits::default();
    for (prompt, (source, split)) in sources {
        let reference = references.remove(&prompt).ok_or_else(|| {
            Error::invalid(format!("manifest has no reference utterance for {prompt}"))
        })?;
        match split {
            Split::Train => splits.train.push(prompt.clone()),
            Split::Dev => splits.dev.push(prompt.clone()),
            Split::Test => splits.test.push(prompt.clone()),
        }
        pairs.insert(prompt, UtterancePair { source, reference });
    }
    if let Some(p) = references.keys().next() {
        return Err(Error::invalid(format!(
            "manifest has no source utterance for {p}"
        )));
    }
    let c = ParallelCorpus { pairs, splits };
    c.validate()?;
    Ok(c)
}
