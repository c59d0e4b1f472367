//! Beam-search transcription over the LM's next-token distribution. Scores
//! are summed token log-probabilities with no length normalization; beams
//! terminate at EOS or max_len (truncation flagged).

use crate::error::ModelError;
use crate::lm::{BOS, EOS};
use crate::tensor::{no_grad, Tensor};
use crate::trainer::AsrBundle;

/// Anything that can score the next token given a generated prefix.
/// Implemented by the ASR bundle and by toy models in tests.
pub trait TokenScorer {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the vocabulary for the position following
    /// `prefix` (generated token ids, BOS/prompt handled internally).
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>, ModelError>;
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub utterance_id: String,
    pub tokens: Vec<usize>,
    pub text: String,
    pub score: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<usize>,
    score: f64,
}

/// Standard beam search; returns the highest-score completed beam, or the
/// best live beam with a truncation flag if none completed by max_len.
pub fn beam_decode<S: TokenScorer>(
    scorer: &S,
    beam_size: usize,
    max_len: usize,
) -> Result<(Vec<usize>, f64, bool), ModelError> {
    assert!(beam_size >= 1);
    let mut live = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut completed: Vec<Beam> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &live {
            let log_probs = scorer.next_log_probs(&beam.tokens)?;
            for (tok, lp) in log_probs.iter().enumerate() {
                if tok == BOS || *lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                let score = beam.score + lp;
                if tok == EOS {
                    completed.push(Beam {
                        tokens,
                        score,
                    });
                } else {
                    tokens.push(tok);
                    candidates.push(Beam { tokens, score });
                }
            }
        }
        // Deterministic ordering: score descending, then token sequence.
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam_size);
        if candidates.is_empty() {
            break;
        }
        live = candidates;
    }
    if let Some(best) = completed.iter().max_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap()
            .then_with(|| b.tokens.cmp(&a.tokens))
    }) {
        return Ok((best.tokens.clone(), best.score, false));
    }
    let best = live
        .into_iter()
        .next()
        .expect("at least one live beam");
    Ok((best.tokens, best.score, true))
}

/// Scorer view of an ASR bundle for one utterance: speech prefix fixed,
/// prefix ⊕ BOS ⊕ generated tokens fed through the (frozen) LM + adapters.
pub struct AsrScorer<'a> {
    bundle: &'a AsrBundle,
    speech_prefix: Tensor,
}

impl<'a> AsrScorer<'a> {
    pub fn new(bundle: &'a AsrBundle, frames: &Tensor) -> Result<Self, ModelError> {
        let speech_prefix = no_grad(|| -> Result<Tensor, ModelError> {
            let enc = bundle.encoder.encode(frames, bundle.prune)?;
            bundle.projector.project(&enc, None)
        })?;
        Ok(AsrScorer {
            bundle,
            speech_prefix,
        })
    }
}

impl TokenScorer for AsrScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.bundle.lm.vocab.size()
    }

    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        no_grad(|| {
            let logits = self.bundle.lm.forward_asr(
                &self.speech_prefix,
                prefix,
                self.bundle.lora.as_ref(),
                None,
            )?;
            let v = self.vocab_size();
            let last = logits.data()[(logits.rows() - 1) * v..].to_vec();
            Ok(log_softmax(&last))
        })
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Decode one utterance through the bundle to a normalized-text hypothesis.
pub fn decode_utterance(
    bundle: &AsrBundle,
    utterance_id: &str,
    frames: &Tensor,
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis, ModelError> {
    let scorer = AsrScorer::new(bundle, frames)?;
    let (tokens, score, truncated) = beam_decode(&scorer, beam_size, max_len)?;
    let text = bundle.lm.vocab.decode(&tokens);
    Ok(Hypothesis {
        utterance_id: utterance_id.to_string(),
        tokens,
        text,
        score,
        truncated,
    })
}
