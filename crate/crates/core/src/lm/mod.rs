//! Conditional token log-probabilities behind one interface.
//!
//! Three backends implement [`ScoringBackend`]: the trainable
//! encoder-decoder [`ToyLm`], the closed-form [`BigramBackend`], and (with
//! the `http` feature) an HTTP client for an external scorer.

pub mod bigram;
#[cfg(feature = "http")]
pub mod http;
pub mod toy;
pub mod vocab;

pub use bigram::BigramBackend;
#[cfg(feature = "http")]
pub use http::HttpBackend;
pub use toy::{Scalar, ToyLm, ToyLmConfig};
pub use vocab::Vocabulary;

use serde::{Deserialize, Serialize};

use crate::choices::ChoiceCandidate;
use crate::error::{Error, Result};

/// Teacher-forced log-probabilities of each continuation token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs(pub Vec<f64>);

impl TokenLogProbs {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Mean log-probability over tokens.
    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

/// Provider of `log p(continuation | prompt)`.
pub trait ScoringBackend: Send + Sync {
    /// Score several continuations of one prompt.
    fn score_batch(&self, prompt: &str, continuations: &[&str]) -> Result<Vec<TokenLogProbs>>;

    /// Vocabulary the backend scores over, when it has one.
    fn vocabulary(&self) -> Option<&Vocabulary> {
        None
    }

    /// Log-probability of every vocabulary entry as the first continuation
    /// token. Non-word entries (specials, bytes) get `-inf`.
    fn next_token_logprobs(&self, prompt: &str) -> Result<Vec<f64>> {
        let vocab = self
            .vocabulary()
            .ok_or_else(|| Error::Unavailable("backend exposes no vocabulary".into()))?;
        let ids: Vec<usize> = vocab.word_ids().collect();
        let words: Vec<&str> = ids.iter().map(|&i| vocab.token(i).unwrap_or("")).collect();
        let scores = self.score_batch(prompt, &words)?;
        let mut out = vec![f64::NEG_INFINITY; vocab.len()];
        for (id, s) in ids.into_iter().zip(scores) {
            if let Some(&first) = s.0.first() {
                out[id] = first;
            }
        }
        Ok(out)
    }
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for &B {
    fn score_batch(&self, prompt: &str, continuations: &[&str]) -> Result<Vec<TokenLogProbs>> {
        (**self).score_batch(prompt, continuations)
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        (**self).vocabulary()
    }

    fn next_token_logprobs(&self, prompt: &str) -> Result<Vec<f64>> {
        (**self).next_token_logprobs(prompt)
    }
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for Box<B> {
    fn score_batch(&self, prompt: &str, continuations: &[&str]) -> Result<Vec<TokenLogProbs>> {
        (**self).score_batch(prompt, continuations)
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        (**self).vocabulary()
    }

    fn next_token_logprobs(&self, prompt: &str) -> Result<Vec<f64>> {
        (**self).next_token_logprobs(prompt)
    }
}

pub fn score_continuation(
    backend: &dyn ScoringBackend,
    prompt: &str,
    continuation: &str,
) -> Result<TokenLogProbs> {
    let mut out = backend.score_batch(prompt, &[continuation])?;
    out.pop()
        .ok_or_else(|| Error::Transport { retries: 0, message: "backend returned no scores".into() })
}

/// Mean per-token log-probability of `continuation`.
pub fn length_normalized_score(
    backend: &dyn ScoringBackend,
    prompt: &str,
    continuation: &str,
) -> Result<f64> {
    Ok(score_continuation(backend, prompt, continuation)?.mean())
}

/// Per-class length-normalized scores for one prompt and the argmax class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRanking {
    pub scores: Vec<f64>,
    pub argmax: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Score every class's answer-choice text as a continuation of `prompt`.
pub fn rank_classes(
    backend: &dyn ScoringBackend,
    prompt: &str,
    choices: &ChoiceCandidate,
) -> Result<ClassRanking> {
    let texts: Vec<&str> = choices.mapping.iter().map(String::as_str).collect();
    let scores: Vec<f64> = backend
        .score_batch(prompt, &texts)?
        .iter()
        .map(TokenLogProbs::mean)
        .collect();
    Ok(ClassRanking {
        argmax: argmax(&scores),
        scores,
    })
}

/// Tokenize continuations, rejecting empty ones.
pub(crate) fn encode_continuations(vocab: &Vocabulary, continuations: &[&str]) -> Result<Vec<Vec<usize>>> {
    continuations
        .iter()
        .map(|c| {
            let ids = vocab.encode(c);
            if ids.is_empty() {
                Err(Error::contract(format!("continuation {c:?} has no tokens")))
            } else {
                Ok(ids)
            }
        })
        .collect()
}
