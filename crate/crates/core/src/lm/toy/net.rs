//! Encoder-decoder forward pass with caches and the matching backward pass.
//!
//! Several continuations share one decoder pass: they are concatenated as
//! segments, positions restart per segment and the causal mask never
//! crosses a segment boundary.

use std::ops::Range;

use ndarray::Array2;

use super::layout::{AttnIdx, FfIdx};
use super::ops::{self, AttnCache, LinCache, Mask, RmsCache};
use super::{Scalar, ToyLm};
use crate::error::{Error, Result};
use crate::lm::vocab::{EOS, PAD};
use crate::peft_trainer::{AdapterGrad, PeftParams};

/// Gradient buffers. `None` fields are not accumulated.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub base: Option<Vec<Array2<F>>>,
    pub peft: Option<Vec<AdapterGrad<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn for_base(model: &ToyLm<F>) -> Self {
        Grads {
            base: Some(model.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect()),
            peft: None,
        }
    }

    pub fn for_peft(peft: &PeftParams<F>) -> Self {
        Grads {
            base: None,
            peft: Some(peft.adapters.iter().map(AdapterGrad::zeros_like).collect()),
        }
    }

    fn pair(&mut self, idx: usize, slot: Option<usize>) -> (Option<&mut Array2<F>>, Option<&mut AdapterGrad<F>>) {
        let Grads { base, peft } = self;
        let dw = base.as_mut().map(|b| &mut b[idx]);
        let dad = match (peft.as_mut(), slot) {
            (Some(g), Some(s)) => Some(&mut g[s]),
            _ => None,
        };
        (dw, dad)
    }

    fn base(&mut self, idx: usize) -> Option<&mut Array2<F>> {
        self.base.as_mut().map(|b| &mut b[idx])
    }
}

/// Teacher-forced decoder inputs for a set of continuations.
#[derive(Debug, Clone)]
pub(crate) struct DecBatch {
    pub ids: Vec<usize>,
    pub pos: Vec<usize>,
    pub seg: Vec<usize>,
    pub targets: Vec<usize>,
    pub ranges: Vec<Range<usize>>,
}

impl DecBatch {
    pub fn new(continuations: &[Vec<usize>]) -> Self {
        let mut b = DecBatch {
            ids: vec![],
            pos: vec![],
            seg: vec![],
            targets: vec![],
            ranges: vec![],
        };
        for (s, c) in continuations.iter().enumerate() {
            let start = b.ids.len();
            for (t, &tok) in c.iter().enumerate() {
                b.ids.push(if t == 0 { PAD } else { c[t - 1] });
                b.pos.push(t);
                b.seg.push(s);
                b.targets.push(tok);
            }
            b.ranges.push(start..b.ids.len());
        }
        b
    }

    fn mask(&self) -> Mask {
        let n = self.ids.len();
        Array2::from_shape_fn((n, n), |(i, j)| self.seg[i] == self.seg[j] && j <= i)
    }
}

struct AttnBlockCache<F> {
    q: LinCache<F>,
    k: LinCache<F>,
    v: LinCache<F>,
    attn: AttnCache<F>,
    o: LinCache<F>,
}

struct FfCache<F> {
    ln: RmsCache<F>,
    l1: LinCache<F>,
    pre: Array2<F>,
    l2: LinCache<F>,
}

struct EncLayerCache<F> {
    ln: RmsCache<F>,
    attn: AttnBlockCache<F>,
    ff: FfCache<F>,
}

struct DecLayerCache<F> {
    ln1: RmsCache<F>,
    self_attn: AttnBlockCache<F>,
    ln2: RmsCache<F>,
    cross: AttnBlockCache<F>,
    ff: FfCache<F>,
}

struct NetCache<F> {
    enc_ids: Vec<usize>,
    enc: Vec<EncLayerCache<F>>,
    enc_ln: RmsCache<F>,
    dec: Vec<DecLayerCache<F>>,
    dec_ln: RmsCache<F>,
    head: LinCache<F>,
}

/// Result of one forward pass.
pub(crate) struct Forward<F> {
    /// `[Σ len, |V|]` log-probabilities at every decoder position.
    pub logprobs: Array2<F>,
    pub batch: DecBatch,
    cache: Option<NetCache<F>>,
}

impl<F: Scalar> Forward<F> {
    /// Log-probabilities of each segment's target tokens.
    pub fn target_logprobs(&self) -> Vec<Vec<F>> {
        self.batch
            .ranges
            .iter()
            .map(|r| r.clone().map(|t| self.logprobs[[t, self.batch.targets[t]]]).collect())
            .collect()
    }
}

type Peft<'a, F> = Option<&'a PeftParams<F>>;

fn adapter<F: Scalar>(peft: Peft<'_, F>, idx: usize) -> Option<&crate::peft_trainer::Adapter<F>> {
    peft.and_then(|p| p.for_param(idx))
}

fn slot<F: Scalar>(peft: Peft<'_, F>, idx: usize) -> Option<usize> {
    peft.and_then(|p| p.slot(idx))
}

impl<F: Scalar> ToyLm<F> {
    /// Encoder input: the prompt's last tokens followed by `</s>`.
    pub(crate) fn encoder_ids(&self, prompt: &[usize]) -> Vec<usize> {
        let keep = self.cfg.max_prompt_len - 1;
        let start = prompt.len().saturating_sub(keep);
        if start > 0 {
            log::debug!("prompt truncated from {} to {keep} tokens", prompt.len());
        }
        let mut ids = prompt[start..].to_vec();
        ids.push(EOS);
        ids
    }

    fn linear(&self, peft: Peft<'_, F>, idx: usize, x: &Array2<F>, keep: bool) -> (Array2<F>, Option<LinCache<F>>) {
        ops::linear_fwd(&self.params[idx], adapter(peft, idx), x, keep)
    }

    fn linear_bwd(
        &self,
        peft: Peft<'_, F>,
        idx: usize,
        cache: LinCache<F>,
        dy: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        let (dw, dad) = grads.pair(idx, slot(peft, idx));
        ops::linear_bwd(&self.params[idx], adapter(peft, idx), cache, dy, dw, dad)
    }

    fn rms(&self, idx: usize, x: &Array2<F>, keep: bool) -> (Array2<F>, Option<RmsCache<F>>) {
        ops::rms_fwd(x, &self.params[idx], keep)
    }

    fn rms_bwd(&self, idx: usize, cache: RmsCache<F>, dy: &Array2<F>, grads: &mut Grads<F>) -> Array2<F> {
        ops::rms_bwd(&self.params[idx], cache, dy, grads.base(idx))
    }

    fn embed(&self, ids: &[usize], pos: impl Iterator<Item = usize>, pos_table: usize) -> Array2<F> {
        let emb = &self.params[self.layout.embed];
        let pt = &self.params[pos_table];
        let mut x = Array2::zeros((ids.len(), self.cfg.d_model));
        for ((mut row, &id), p) in x.rows_mut().into_iter().zip(ids).zip(pos) {
            row.assign(&emb.row(id));
            row += &pt.row(p);
        }
        x
    }

    fn embed_bwd(&self, ids: &[usize], pos: impl Iterator<Item = usize>, pos_table: usize, dx: &Array2<F>, grads: &mut Grads<F>) {
        let Some(base) = grads.base.as_mut() else {
            return;
        };
        let embed = self.layout.embed;
        for ((row, &id), p) in dx.rows().into_iter().zip(ids).zip(pos) {
            let mut e = base[embed].row_mut(id);
            e += &row;
            let mut q = base[pos_table].row_mut(p);
            q += &row;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_block(
        &self,
        peft: Peft<'_, F>,
        p: &AttnIdx,
        xq: &Array2<F>,
        xkv: &Array2<F>,
        mask: Option<&Mask>,
        keep: bool,
    ) -> (Array2<F>, Option<AttnBlockCache<F>>) {
        let (q, cq) = self.linear(peft, p.q, xq, keep);
        let (k, ck) = self.linear(peft, p.k, xkv, keep);
        let (v, cv) = self.linear(peft, p.v, xkv, keep);
        let (a, ca) = ops::attention_fwd(q, k, v, self.cfg.n_heads, mask, keep);
        let (o, co) = self.linear(peft, p.o, &a, keep);
        let cache = keep.then(|| AttnBlockCache {
            q: cq.unwrap(),
            k: ck.unwrap(),
            v: cv.unwrap(),
            attn: ca.unwrap(),
            o: co.unwrap(),
        });
        (o, cache)
    }

    /// Returns `(d xq, d xkv)`.
    fn attn_block_bwd(
        &self,
        peft: Peft<'_, F>,
        p: &AttnIdx,
        c: AttnBlockCache<F>,
        dy: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> (Array2<F>, Array2<F>) {
        let da = self.linear_bwd(peft, p.o, c.o, dy, grads);
        let (dq, dk, dv) = ops::attention_bwd(c.attn, &da);
        let dxq = self.linear_bwd(peft, p.q, c.q, &dq, grads);
        let mut dxkv = self.linear_bwd(peft, p.k, c.k, &dk, grads);
        dxkv += &self.linear_bwd(peft, p.v, c.v, &dv, grads);
        (dxq, dxkv)
    }

    fn ff_block(&self, peft: Peft<'_, F>, p: &FfIdx, x: &Array2<F>, keep: bool) -> (Array2<F>, Option<FfCache<F>>) {
        let (h, cl) = self.rms(p.ln, x, keep);
        let (pre, c1) = self.linear(peft, p.ff1, &h, keep);
        let g = ops::gelu(&pre);
        let (y, c2) = self.linear(peft, p.ff2, &g, keep);
        let cache = keep.then(|| FfCache {
            ln: cl.unwrap(),
            l1: c1.unwrap(),
            pre,
            l2: c2.unwrap(),
        });
        (y, cache)
    }

    fn ff_block_bwd(&self, peft: Peft<'_, F>, p: &FfIdx, c: FfCache<F>, dy: &Array2<F>, grads: &mut Grads<F>) -> Array2<F> {
        let dg = self.linear_bwd(peft, p.ff2, c.l2, dy, grads);
        let dpre = ops::gelu_bwd(&c.pre, &dg);
        let dh = self.linear_bwd(peft, p.ff1, c.l1, &dpre, grads);
        self.rms_bwd(p.ln, c.ln, &dh, grads)
    }

    /// Run encoder and decoder. `keep` retains what [`Self::backward`] needs.
    pub(crate) fn forward(
        &self,
        peft: Peft<'_, F>,
        prompt: &[usize],
        continuations: &[Vec<usize>],
        keep: bool,
    ) -> Result<Forward<F>> {
        if continuations.is_empty() || continuations.iter().any(Vec::is_empty) {
            return Err(Error::contract("continuations must be non-empty"));
        }
        if let Some(c) = continuations.iter().find(|c| c.len() > self.cfg.max_cont_len) {
            return Err(Error::contract(format!(
                "continuation of {} tokens exceeds the {}-token limit",
                c.len(),
                self.cfg.max_cont_len
            )));
        }
        let vocab_len = self.vocab.len();
        if let Some(&bad) = prompt.iter().chain(continuations.iter().flatten()).find(|&&i| i >= vocab_len) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {vocab_len}")));
        }
        let l = &self.layout;

        let enc_ids = self.encoder_ids(prompt);
        let mut x = self.embed(&enc_ids, 0..enc_ids.len(), l.enc_pos);
        let mut enc_caches = Vec::new();
        for layer in &l.enc {
            let (h, cl) = self.rms(layer.ln, &x, keep);
            let (a, ca) = self.attn_block(peft, &layer.attn, &h, &h, None, keep);
            x += &a;
            let (f, cf) = self.ff_block(peft, &layer.ff, &x, keep);
            x += &f;
            if keep {
                enc_caches.push(EncLayerCache {
                    ln: cl.unwrap(),
                    attn: ca.unwrap(),
                    ff: cf.unwrap(),
                });
            }
        }
        let (enc_out, c_enc_ln) = self.rms(l.enc_ln, &x, keep);

        let batch = DecBatch::new(continuations);
        let mask = batch.mask();
        let mut y = self.embed(&batch.ids, batch.pos.iter().copied(), l.dec_pos);
        let mut dec_caches = Vec::new();
        for layer in &l.dec {
            let (h, c1) = self.rms(layer.ln1, &y, keep);
            let (a, ca) = self.attn_block(peft, &layer.self_attn, &h, &h, Some(&mask), keep);
            y += &a;
            let (h2, c2) = self.rms(layer.ln2, &y, keep);
            let (b, cb) = self.attn_block(peft, &layer.cross, &h2, &enc_out, None, keep);
            y += &b;
            let (f, cf) = self.ff_block(peft, &layer.ff, &y, keep);
            y += &f;
            if keep {
                dec_caches.push(DecLayerCache {
                    ln1: c1.unwrap(),
                    self_attn: ca.unwrap(),
                    ln2: c2.unwrap(),
                    cross: cb.unwrap(),
                    ff: cf.unwrap(),
                });
            }
        }
        let (hf, c_dec_ln) = self.rms(l.dec_ln, &y, keep);
        let (logits, c_head) = self.linear(peft, l.head, &hf, keep);
        let logprobs = ops::log_softmax_rows(&logits);
        let cache = keep.then(|| NetCache {
            enc_ids,
            enc: enc_caches,
            enc_ln: c_enc_ln.unwrap(),
            dec: dec_caches,
            dec_ln: c_dec_ln.unwrap(),
            head: c_head.unwrap(),
        });
        Ok(Forward { logprobs, batch, cache })
    }

    /// Accumulate gradients given `dlogits = ∂loss/∂logits`.
    pub(crate) fn backward(
        &self,
        peft: Peft<'_, F>,
        fwd: Forward<F>,
        dlogits: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Result<()> {
        let cache = fwd
            .cache
            .ok_or_else(|| Error::contract("backward needs a forward pass run with caches"))?;
        let l = &self.layout;
        let batch = fwd.batch;

        let dhf = self.linear_bwd(peft, l.head, cache.head, dlogits, grads);
        let mut dy = self.rms_bwd(l.dec_ln, cache.dec_ln, &dhf, grads);
        let enc_len = cache.enc_ids.len();
        let mut d_enc_out = Array2::zeros((enc_len, self.cfg.d_model));
        for (layer, c) in l.dec.iter().zip(cache.dec).rev() {
            dy += &self.ff_block_bwd(peft, &layer.ff, c.ff, &dy, grads);
            let (dh2, dkv) = self.attn_block_bwd(peft, &layer.cross, c.cross, &dy, grads);
            d_enc_out += &dkv;
            dy += &self.rms_bwd(layer.ln2, c.ln2, &dh2, grads);
            let (dq, dkv) = self.attn_block_bwd(peft, &layer.self_attn, c.self_attn, &dy, grads);
            let dh = dq + dkv;
            dy += &self.rms_bwd(layer.ln1, c.ln1, &dh, grads);
        }
        self.embed_bwd(&batch.ids, batch.pos.iter().copied(), l.dec_pos, &dy, grads);

        let mut dx = self.rms_bwd(l.enc_ln, cache.enc_ln, &d_enc_out, grads);
        for (layer, c) in l.enc.iter().zip(cache.enc).rev() {
            dx += &self.ff_block_bwd(peft, &layer.ff, c.ff, &dx, grads);
            let (dq, dkv) = self.attn_block_bwd(peft, &layer.attn, c.attn, &dx, grads);
            let dh = dq + dkv;
            dx += &self.rms_bwd(layer.ln, c.ln, &dh, grads);
        }
        self.embed_bwd(&cache.enc_ids, 0..enc_len, l.enc_pos, &dx, grads);
        Ok(())
    }
}
