//! Text and word-in-context embeddings.
//!
//! The reference [`HashedBowEmbedder`] lowercases, splits on
//! non-alphanumerics, hashes each token with FNV-1a (64-bit) into one of
//! `dim` buckets, and L2-normalizes the term-frequency vector. It is
//! deterministic across runs and platforms.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 512;
/// Weight of the word vector when mixing it with its sentence.
pub const DEFAULT_WORD_WEIGHT: f64 = 0.7;

/// A fixed-length vector, unit-norm unless it is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalize `values` to unit length (zeros stay zeros).
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

impl std::ops::Neg for EmbeddingVector {
    type Output = EmbeddingVector;

    fn neg(self) -> Self::Output {
        EmbeddingVector(self.0.into_iter().map(|v| -v).collect())
    }
}

/// Cosine similarity of two embeddings; 0 if either is the zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "cosine of vectors with dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Lowercased maximal alphanumeric runs.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// A text encoder producing [`EmbeddingVector`]s.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> EmbeddingVector;

    fn word_weight(&self) -> f64 {
        DEFAULT_WORD_WEIGHT
    }

    /// `normalize(α·embed(word) + (1−α)·embed(sentence))`; the word must
    /// occur in the sentence (case-insensitive).
    fn embed_word_in_context(&self, sentence: &str, word: &str) -> Result<EmbeddingVector> {
        let target = word.to_lowercase();
        if !words(sentence).contains(&target) {
            return Err(Error::contract(format!(
                "word `{word}` does not occur in {sentence:?}"
            )));
        }
        let alpha = self.word_weight();
        let w = self.embed_text(word);
        let s = self.embed_text(sentence);
        let mixed = w
            .values()
            .iter()
            .zip(s.values())
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        Ok(EmbeddingVector::normalized(mixed))
    }
}

/// Hashed bag-of-words embedder.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dim: usize,
    word_weight: f64,
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder {
            dim: DEFAULT_DIM,
            word_weight: DEFAULT_WORD_WEIGHT,
        }
    }
}

impl HashedBowEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedBowEmbedder {
            dim,
            ..Default::default()
        }
    }

    pub fn with_word_weight(mut self, alpha: f64) -> Self {
        self.word_weight = alpha;
        self
    }

    /// Bucket a token lands in.
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Embedder for HashedBowEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0.0; self.dim];
        for w in words(text) {
            v[self.bucket(&w)] += 1.0;
        }
        EmbeddingVector::normalized(v)
    }

    fn word_weight(&self) -> f64 {
        self.word_weight
    }
}

type Factory = Box<dyn Fn() -> Box<dyn Embedder> + Send + Sync>;

/// Named embedder constructors, so configs can pick a backend by name.
pub struct EmbedderRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for EmbedderRegistry {
    fn default() -> Self {
        let mut r = EmbedderRegistry {
            factories: BTreeMap::new(),
        };
        r.register("hashed-bow", || Box::new(HashedBowEmbedder::default()));
        r
    }
}

impl EmbedderRegistry {
    pub fn register(
        &mut self,
        name: impl Into<String>,
        factory: impl Fn() -> Box<dyn Embedder> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.into(), Box::new(factory));
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn Embedder>> {
        self.factories.get(name).map(|f| f()).ok_or_else(|| {
            Error::Validation(format!(
                "unknown embedder `{name}`; registered: {:?}",
                self.factories.keys().collect::<Vec<_>>()
            ))
        })
    }
}
