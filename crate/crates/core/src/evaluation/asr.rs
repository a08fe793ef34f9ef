//! Speech recognizer clients and corpus-level error-rate scoring.

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{wav_bytes, write_wav, Utterance};
use crate::error::{Error, Result};
use crate::external::run_template;

use super::edit::ErrorCounts;

pub trait AsrClient: Send + Sync {
    fn client_id(&self) -> &str;
    fn transcribe(&self, u: &Utterance) -> Result<String>;
}

/// Runs a shell template with `{wav}` replaced by a temporary WAV path; stdout is the transcript.
#[derive(Clone, Debug)]
pub struct CommandAsr {
    pub template: String,
}

impl CommandAsr {
    pub fn new(template: impl Into<String>) -> Self {
        Self {
            template: template.into(),
        }
    }
}

impl AsrClient for CommandAsr {
    fn client_id(&self) -> &str {
        "command"
    }

    fn transcribe(&self, u: &Utterance) -> Result<String> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let path = dir.path().join("input.wav");
        write_wav(&path, u.sample_rate, &u.samples)?;
        let out = run_template(&self.template, &[("wav", &path.to_string_lossy())])?;
        Ok(out.trim().to_string())
    }
}

/// POSTs `audio/wav` bytes and reads `{"text": ...}` back.
#[derive(Clone, Debug)]
pub struct HttpAsr {
    pub url: String,
    pub timeout: Duration,
}

impl HttpAsr {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Deserialize)]
struct HttpAsrResponse {
    text: String,
}

impl AsrClient for HttpAsr {
    fn client_id(&self) -> &str {
        "http"
    }

    fn transcribe(&self, u: &Utterance) -> Result<String> {
        let body = wav_bytes(u.sample_rate, &u.samples)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&self.url)
            .header("Content-Type", "audio/wav")
            .send(&body[..])
            .map_err(|e| Error::External(format!("ASR request to {} failed: {e}", self.url)))?;
        let text = resp.body_mut().read_to_string().map_err(|e| {
            Error::External(format!("ASR response from {} unreadable: {e}", self.url))
        })?;
        let parsed: HttpAsrResponse = serde_json::from_str(&text)?;
        Ok(parsed.text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub utterance_id: String,
    pub reference: String,
    pub hypothesis: String,
    pub counts: ErrorCounts,
    pub cer: f64,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub index: usize,
    pub utterance_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemScore {
    /// Pooled rates: summed edits over summed reference lengths.
    pub cer: f64,
    pub wer: f64,
    pub totals: ErrorCounts,
    pub per_utterance: Vec<UtteranceScore>,
    pub exclusions: Vec<Exclusion>,
}

/// Transcribes every sample with at most `parallelism` concurrent requests and
/// pools the edit counts. Samples whose transcription fails are excluded.
pub fn score_system(
    samples: &[(Utterance, String)],
    asr: &dyn AsrClient,
    parallelism: usize,
) -> Result<SystemScore> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::External(e.to_string()))?;
    let hyps: Vec<Result<String>> =
        pool.install(|| samples.par_iter().map(|(u, _)| asr.transcribe(u)).collect());
    let mut per_utterance = Vec::new();
    let mut exclusions = Vec::new();
    let mut totals = ErrorCounts::default();
    for (index, ((u, reference), hyp)) in samples.iter().zip(hyps).enumerate() {
        let scored = hyp.and_then(|h| ErrorCounts::compute(reference, &h).map(|c| (h, c)));
        match scored {
            Ok((hypothesis, counts)) => {
                totals += counts;
                per_utterance.push(UtteranceScore {
                    utterance_id: u.utterance_id.clone(),
                    reference: reference.clone(),
                    hypothesis,
                    cer: counts.cer(),
                    wer: counts.wer(),
                    counts,
                });
            }
            Err(e) => {
                tracing::warn!(utterance = %u.utterance_id, "excluded from scoring: {e}");
                exclusions.push(Exclusion {
                    index,
                    utterance_id: u.utterance_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    if per_utterance.is_empty() {
        return Err(Error::External(format!(
            "all {} samples failed transcription",
            samples.len()
        )));
    }
    Ok(SystemScore {
        cer: totals.cer(),
        wer: totals.wer(),
        totals,
        per_utterance,
        exclusions,
    })
}
