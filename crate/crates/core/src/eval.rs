//! Text normalization, word-level Levenshtein alignment with S/I/D
//! decomposition, and pooled corpus WER.

use serde::{Deserialize, Serialize};

use crate::error::EvalError;

/// Normalization profile; letters outside Unicode-alphabetic that must
/// survive can be declared per language (ae/oe/aa analogs are alphabetic and
/// survive regardless).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormProfile {
    #[serde(default)]
    pub extra_keep: Vec<char>,
}

/// Lowercase, strip punctuation except apostrophes inside words, preserve
/// alphabetic letters (including æ/ø/å), collapse whitespace.
pub fn normalize(text: &str, profile: &NormProfile) -> String {
    let lower: String = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let keep = |c: char| c.is_alphanumeric() || profile.extra_keep.contains(&c);
    let mut out = String::with_capacity(lower.len());
    let mut pending_space = false;
    for (i, &c) in chars.iter().enumerate() {
        let retained = if keep(c) {
            true
        } else if c == '\'' {
            // Apostrophes survive only between two retained characters.
            i > 0 && keep(chars[i - 1]) && chars.get(i + 1).map(|&n| keep(n)).unwrap_or(false)
        } else {
            false
        };
        if retained {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Word-error counts out of a minimum-cost alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub hits: usize,
    pub reference_words: usize,
}

impl AlignmentCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.reference_words as f64
    }

    pub fn add(&mut self, other: &AlignmentCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.hits += other.hits;
        self.reference_words += other.reference_words;
    }
}

/// Unit-cost Levenshtein alignment with a deterministic backtrace.
/// Tie preference: match > substitution > deletion > insertion.
pub fn align(reference: &[&str], hypothesis: &[&str]) -> Result<AlignmentCounts, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference(String::new()));
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = if reference[i - 1] == hypothesis[j - 1] {
                0
            } else {
                1
            };
            dp[idx(i, j)] = (dp[idx(i - 1, j - 1)] + sub_cost)
                .min(dp[idx(i - 1, j)] + 1)
                .min(dp[idx(i, j - 1)] + 1);
        }
    }
    // Backtrace with the fixed preference order.
    let mut counts = AlignmentCounts {
        reference_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[idx(i, j)];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && here == dp[idx(i - 1, j - 1)]
        {
            counts.hits += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && here == dp[idx(i - 1, j - 1)] + 1 {
            counts.substitutions += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && here == dp[idx(i - 1, j)] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(
        counts.hits + counts.substitutions + counts.deletions,
        counts.reference_words
    );
    Ok(counts)
}

pub fn align_texts(reference: &str, hypothesis: &str) -> Result<AlignmentCounts, EvalError> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    align(&r, &h)
}

/// Per-utterance evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub counts: AlignmentCounts,
    pub wer: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusWer {
    /// Pooled WER: sum of errors over sum of reference words.
    pub wer: f64,
    pub totals: AlignmentCounts,
    pub utterances: Vec<UtteranceScore>,
    /// Utterance ids excluded for empty references.
    pub excluded: Vec<String>,
}

/// Pooled corpus WER over (id, reference, hypothesis) triples; utterances
/// with empty references are excluded and logged.
pub fn corpus_wer(pairs: &[(String, String, String)]) -> Result<CorpusWer, EvalError> {
    let mut totals = AlignmentCounts::default();
    let mut utterances = Vec::new();
    let mut excluded = Vec::new();
    for (id, reference, hypothesis) in pairs {
        match align_texts(reference, hypothesis) {
            Ok(counts) => {
                totals.add(&counts);
                utterances.push(UtteranceScore {
                    id: id.clone(),
                    counts,
                    wer: counts.wer(),
                });
            }
            Err(EvalError::EmptyReference(_)) => excluded.push(id.clone()),
            Err(e) => return Err(e),
        }
    }
    if utterances.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    Ok(CorpusWer {
        wer: totals.errors() as f64 / totals.reference_words as f64,
        totals,
        utterances,
        excluded,
    })
}
