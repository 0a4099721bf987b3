//! Laplace-smoothed bigram scorer with closed-form log-probabilities.

use std::collections::HashMap;

use super::vocab::{Vocabulary, PAD};
use super::{encode_continuations, ScoringBackend, TokenLogProbs};
use crate::error::Result;

/// `log p(w | u) = log((c(u,w) + 1) / (c(u,·) + |V|))`, counted within
/// corpus lines. The token before an empty prompt is `<pad>`.
#[derive(Debug, Clone)]
pub struct BigramBackend {
    vocab: Vocabulary,
    pair_counts: HashMap<(usize, usize), u64>,
    context_counts: HashMap<usize, u64>,
}

impl BigramBackend {
    /// Count bigrams over `corpus` lines with a vocabulary built from them.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str> + Clone) -> Self {
        let vocab = Vocabulary::build(corpus.clone());
        Self::with_vocabulary(vocab, corpus)
    }

    pub fn with_vocabulary<'a>(vocab: Vocabulary, corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut pair_counts = HashMap::new();
        let mut context_counts = HashMap::new();
        for line in corpus {
            let ids = vocab.encode(line);
            for w in ids.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += 1;
                *context_counts.entry(w[0]).or_insert(0) += 1;
            }
        }
        BigramBackend {
            vocab,
            pair_counts,
            context_counts,
        }
    }

    pub fn count(&self, prev: usize, next: usize) -> u64 {
        self.pair_counts.get(&(prev, next)).copied().unwrap_or(0)
    }

    pub fn context_count(&self, prev: usize) -> u64 {
        self.context_counts.get(&prev).copied().unwrap_or(0)
    }

    pub fn logprob(&self, prev: usize, next: usize) -> f64 {
        let num = (self.count(prev, next) + 1) as f64;
        let den = (self.context_count(prev) + self.vocab.len() as u64) as f64;
        (num / den).ln()
    }

    fn last_prompt_token(&self, prompt: &str) -> usize {
        self.vocab.encode(prompt).last().copied().unwrap_or(PAD)
    }
}

impl ScoringBackend for BigramBackend {
    fn score_batch(&self, prompt: &str, continuations: &[&str]) -> Result<Vec<TokenLogProbs>> {
        let start = self.last_prompt_token(prompt);
        let encoded = encode_continuations(&self.vocab, continuations)?;
        Ok(encoded
            .into_iter()
            .map(|ids| {
                let mut prev = start;
                TokenLogProbs(
                    ids.into_iter()
                        .map(|id| {
                            let lp = self.logprob(prev, id);
                            prev = id;
                            lp
                        })
                        .collect(),
                )
            })
            .collect())
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }

    fn next_token_logprobs(&self, prompt: &str) -> Result<Vec<f64>> {
        let prev = self.last_prompt_token(prompt);
        Ok((0..self.vocab.len())
            .map(|id| {
                if self.vocab.is_special(id) || self.vocab.is_byte(id) {
                    f64::NEG_INFINITY
                } else {
                    self.logprob(prev, id)
                }
            })
            .collect())
    }
}
