//! Levenshtein alignment and character/word error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::normalize_transcript;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

impl std::ops::AddAssign for EditOps {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }
}

/// Minimal unit-cost alignment of `hyp` against `reference`. Among optimal
/// alignments, substitutions are preferred over insertion/deletion pairs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hyp.len());
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        cost[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            cost[i][j] = diag.min(cost[i - 1][j] + 1).min(cost[i][j - 1] + 1);
        }
    }
    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let mismatch = reference[i - 1] != hyp[j - 1];
            if cost[i][j] == cost[i - 1][j - 1] + usize::from(mismatch) {
                ops.substitutions += usize::from(mismatch);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[i][j] == cost[i - 1][j] + 1 {
            ops.deletions += 1;
            i -= 1;
        } else {
            ops.insertions += 1;
            j -= 1;
        }
    }
    ops
}

/// Characters of the normalized text, spaces excluded.
pub fn char_tokens(text: &str) -> Vec<char> {
    normalize_transcript(text)
        .chars()
        .filter(|c| *c != ' ')
        .collect()
}

pub fn word_tokens(text: &str) -> Vec<String> {
    normalize_transcript(text)
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Edit counts and reference lengths for one utterance, the units that are
/// pooled into corpus-level rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub chars: EditOps,
    pub ref_chars: usize,
    pub words: EditOps,
    pub ref_words: usize,
}

impl ErrorCounts {
    pub fn compute(reference: &str, hyp: &str) -> Result<Self> {
        let rc = char_tokens(reference);
        let rw = word_tokens(reference);
        if rw.is_empty() {
            return Err(Error::invalid(format!(
                "reference {reference:?} is empty after normalization"
            )));
        }
        Ok(Self {
            chars: edit_distance(&rc, &char_tokens(hyp)),
            ref_chars: rc.len(),
            words: edit_distance(&rw, &word_tokens(hyp)),
            ref_words: rw.len(),
        })
    }

    pub fn cer(&self) -> f64 {
        self.chars.total() as f64 / self.ref_chars as f64
    }

    pub fn wer(&self) -> f64 {
        self.words.total() as f64 / self.ref_words as f64
    }
}

impl std::ops::AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.chars += o.chars;
        self.ref_chars += o.ref_chars;
        self.words += o.words;
        self.ref_words += o.ref_words;
    }
}

/// `(cer, wer)` of one hypothesis.
pub fn cer_wer(reference: &str, hyp: &str) -> Result<(f64, f64)> {
    let c = ErrorCounts::compute(reference, hyp)?;
    Ok((c.cer(), c.wer()))
}
