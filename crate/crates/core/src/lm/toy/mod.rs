//! Small encoder-decoder transformer with hand-written backpropagation.
//!
//! Pre-norm blocks with RMSNorm, no biases, tanh-GELU feed-forward and
//! learned positions. Generic over `f32` (training, inference) and `f64`
//! (gradient checks).

mod layout;
mod net;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use net::Grads;
pub(crate) use net::Forward;
pub(crate) use layout::Layout;

use super::vocab::{Vocabulary, PAD};
use super::{encode_continuations, ScoringBackend, TokenLogProbs};
use crate::error::{Error, Result};
use crate::peft_trainer::PeftParams;
use layout::Init;

/// Floating-point element type of a [`ToyLm`].
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Encoder positions, including the trailing `</s>`.
    pub max_prompt_len: usize,
    pub max_cont_len: usize,
    pub init_std: f64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        ToyLmConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_prompt_len: 256,
            max_cont_len: 32,
            init_std: 0.02,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Validation(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_prompt_len < 2 || self.max_cont_len == 0 {
            return Err(Error::Validation(
                "d_ff, max_cont_len must be ≥ 1 and max_prompt_len ≥ 2".into(),
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Validation(format!("init_std {} must be positive", self.init_std)));
        }
        Ok(())
    }
}

/// Truncated normal: `std · z` with `|z| ≤ 2` by rejection.
pub(crate) fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return std * z;
        }
    }
}

/// Frozen weights `W₀` plus the vocabulary they score over.
#[derive(Debug, Clone)]
pub struct ToyLm<F> {
    cfg: ToyLmConfig,
    vocab: Vocabulary,
    seed: u64,
    names: Vec<String>,
    params: Vec<Array2<F>>,
    layout: Layout,
}

impl<F: Scalar> ToyLm<F> {
    /// Seeded initialization: matrices from a truncated normal, gains at 1.
    pub fn new(cfg: ToyLmConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = Layout::build(&cfg, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let p = match spec.init {
                Init::Ones => Array2::ones(spec.shape),
                Init::Normal => Array2::from_shape_simple_fn(spec.shape, || {
                    F::of(truncated_normal(&mut rng, cfg.init_std))
                }),
            };
            names.push(spec.name);
            params.push(p);
        }
        Ok(ToyLm {
            cfg,
            vocab,
            seed,
            names,
            params,
            layout,
        })
    }

    /// Rebuild from named tensors; every expected name must be present
    /// with the expected shape.
    pub fn from_tensors(
        cfg: ToyLmConfig,
        vocab: Vocabulary,
        seed: u64,
        mut tensors: std::collections::HashMap<String, Array2<F>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = Layout::build(&cfg, vocab.len());
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = tensors
                .remove(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", spec.name)))?;
            if t.dim() != spec.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.dim(),
                    spec.shape
                )));
            }
            names.push(spec.name);
            params.push(t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(ToyLm {
            cfg,
            vocab,
            seed,
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Array2<F>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.iter().map(Array2::len).sum()
    }

    /// Indices of the linear maps that receive adapters.
    pub fn adaptable(&self) -> &[usize] {
        &self.layout.adaptable
    }

    /// Same weights in another precision.
    pub fn cast<G: Scalar>(&self) -> ToyLm<G> {
        ToyLm {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            seed: self.seed,
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.mapv(|x| G::of(x.f64()))).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Fold adapters into the base weights: `W' = diag(λ)(W₀ + BA)`.
    pub fn merged(&self, peft: &PeftParams<F>) -> Result<Self> {
        let mut out = self.clone();
        for (ad, &idx) in peft.adapters.iter().zip(&peft.targets) {
            out.params[idx] = crate::peft_trainer::merge_weights(&self.params[idx], ad)?;
        }
        Ok(out)
    }

    /// Teacher-forced log-probabilities of token-id continuations.
    pub fn score_ids(
        &self,
        peft: Option<&PeftParams<F>>,
        prompt: &[usize],
        continuations: &[Vec<usize>],
    ) -> Result<Vec<Vec<F>>> {
        Ok(self.forward(peft, prompt, continuations, false)?.target_logprobs())
    }

    /// Next-token log-distribution after an empty continuation prefix.
    pub fn first_token_logprobs(&self, peft: Option<&PeftParams<F>>, prompt: &[usize]) -> Result<Vec<F>> {
        let fwd = self.forward(peft, prompt, &[vec![PAD]], false)?;
        Ok(fwd.logprobs.row(0).to_vec())
    }

    fn score_text(&self, peft: Option<&PeftParams<F>>, prompt: &str, continuations: &[&str]) -> Result<Vec<TokenLogProbs>> {
        let conts = encode_continuations(&self.vocab, continuations)?;
        let prompt_ids = self.vocab.encode(prompt);
        Ok(self
            .score_ids(peft, &prompt_ids, &conts)?
            .into_iter()
            .map(|lps| TokenLogProbs(lps.into_iter().map(Scalar::f64).collect()))
            .collect())
    }

    fn next_token_text(&self, peft: Option<&PeftParams<F>>, prompt: &str) -> Result<Vec<f64>> {
        let row = self.first_token_logprobs(peft, &self.vocab.encode(prompt))?;
        Ok(row
            .into_iter()
            .enumerate()
            .map(|(id, lp)| {
                if self.vocab.is_special(id) || self.vocab.is_byte(id) {
                    f64::NEG_INFINITY
                } else {
                    lp.f64()
                }
            })
            .collect())
    }
}

impl<F: Scalar> ScoringBackend for ToyLm<F> {
    fn score_batch(&self, prompt: &str, continuations: &[&str]) -> Result<Vec<TokenLogProbs>> {
        self.score_text(None, prompt, continuations)
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }

    fn next_token_logprobs(&self, prompt: &str) -> Result<Vec<f64>> {
        self.next_token_text(None, prompt)
    }
}

/// Frozen model plus unmerged adapters, scored through `λ(W₀x + BAx)`.
#[derive(Debug, Clone, Copy)]
pub struct AdaptedLm<'a, F> {
    pub base: &'a ToyLm<F>,
    pub peft: &'a PeftParams<F>,
}

impl<F: Scalar> ScoringBackend for AdaptedLm<'_, F> {
    fn score_batch(&self, prompt: &str, continuations: &[&str]) -> Result<Vec<TokenLogProbs>> {
        self.base.score_text(Some(self.peft), prompt, continuations)
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.base.vocab)
    }

    fn next_token_logprobs(&self, prompt: &str) -> Result<Vec<f64>> {
        self.base.next_token_text(Some(self.peft), prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::score_continuation;

    fn tiny() -> ToyLm<f64> {
        let vocab = Vocabulary::build(["the cat sat on the mat", "a dog ran"]);
        let cfg = ToyLmConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_prompt_len: 16,
            max_cont_len: 8,
            init_std: 0.3,
        };
        ToyLm::new(cfg, vocab, 7).unwrap()
    }

    #[test]
    fn rows_are_distributions() {
        let m = tiny();
        let fwd = m.forward(None, &m.vocab.encode("the cat"), &[m.vocab.encode("sat on"), m.vocab.encode("mat")], false).unwrap();
        for row in fwd.logprobs.rows() {
            let s: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_give_log_inverse_vocab() {
        let mut m = tiny();
        let head = m.layout.head;
        m.params[head].fill(0.0);
        let lp = score_continuation(&m, "the cat", "sat on the").unwrap();
        let expect = -(m.vocab.len() as f64).ln();
        assert_eq!(lp.len(), 3);
        for x in lp.0 {
            assert!((x - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn segments_do_not_interact() {
        let m = tiny();
        let p = m.vocab.encode("a dog");
        let c1 = m.vocab.encode("sat on the mat");
        let c2 = m.vocab.encode("ran");
        let joint = m.score_ids(None, &p, &[c1.clone(), c2.clone()]).unwrap();
        assert_eq!(joint[0], m.score_ids(None, &p, &[c1]).unwrap()[0]);
        assert_eq!(joint[1], m.score_ids(None, &p, &[c2]).unwrap()[0]);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = tiny();
        let b = tiny();
        assert_eq!(a.params, b.params);
        assert!(a.params.iter().flatten().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn out_of_range_ids_are_contract_errors() {
        let m = tiny();
        assert!(m.score_ids(None, &[10_000], &[vec![300]]).is_err());
        assert!(m.score_ids(None, &[], &[vec![]]).is_err());
        assert!(m.score_ids(None, &[], &[vec![300; 9]]).is_err());
    }

    #[test]
    fn base_gradients_match_finite_differences() {
        let m = tiny();
        let p = m.vocab.encode("the cat sat");
        let conts = [m.vocab.encode("on the"), m.vocab.encode("mat")];
        // loss = −Σ log p(target)
        let loss = |m: &ToyLm<f64>| -> f64 {
            -m.score_ids(None, &p, &conts).unwrap().iter().flatten().sum::<f64>()
        };
        let fwd = m.forward(None, &p, &conts, true).unwrap();
        let mut dlogits = fwd.logprobs.mapv(f64::exp);
        for (t, &tgt) in fwd.batch.targets.iter().enumerate() {
            dlogits[[t, tgt]] -= 1.0;
        }
        let mut g = Grads::for_base(&m);
        m.backward(None, fwd, &dlogits, &mut g).unwrap();
        let g = g.base.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..60 {
            let pi = rng.gen_range(0..m.params.len());
            let n = m.params[pi].len();
            let k = rng.gen_range(0..n);
            let h = 1e-5;
            let mut mp = m.clone();
            mp.params[pi].as_slice_mut().unwrap()[k] += h;
            let mut mm = m.clone();
            mm.params[pi].as_slice_mut().unwrap()[k] -= h;
            let num = (loss(&mp) - loss(&mm)) / (2.0 * h);
            let ana = g[pi].as_slice().unwrap()[k];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
            if ana.abs().max(num.abs()) > 1e-7 {
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
