//! Maximum-likelihood plus unlikelihood objective over answer choices.

use ndarray::Array2;

use crate::error::Result;
use crate::lm::toy::{Forward, Grads, Scalar, ToyLm};
use crate::peft_trainer::PeftParams;

/// Lower bound on `1 − p` inside the unlikelihood logarithm.
pub const UL_CLAMP: f64 = 1e-7;

/// One prompt with every class's choice tokens; `gold` indexes the label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub prompt: Vec<usize>,
    pub choices: Vec<Vec<usize>>,
    pub gold: usize,
}

/// `−mean_t log p_t`.
pub fn mle_loss(token_logprobs: &[f64]) -> f64 {
    -token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64
}

/// `−log max(1 − p, UL_CLAMP)` from `log p`; also reports clamping.
fn neg_log_one_minus(logp: f64) -> (f64, bool) {
    let one_minus = -logp.exp_m1();
    if one_minus < UL_CLAMP {
        (-UL_CLAMP.ln(), true)
    } else {
        (-one_minus.ln(), false)
    }
}

/// Mean over incorrect choices of each choice's token-mean
/// `−log(1 − p_t)`. Returns the loss and the number of clamped tokens.
pub fn unlikelihood_loss(incorrect: &[Vec<f64>]) -> (f64, usize) {
    if incorrect.is_empty() {
        return (0.0, 0);
    }
    let mut clamps = 0;
    let mut total = 0.0;
    for lps in incorrect {
        let mut s = 0.0;
        for &lp in lps {
            let (v, clamped) = neg_log_one_minus(lp);
            clamps += clamped as usize;
            s += v;
        }
        total += s / lps.len() as f64;
    }
    (total / incorrect.len() as f64, clamps)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub mle: f64,
    pub unlikelihood: f64,
    pub total: f64,
    pub clamps: usize,
}

fn item_loss<F: Scalar>(fwd: &Forward<F>, gold: usize, gamma: f64) -> LossParts {
    let per: Vec<Vec<f64>> = fwd
        .target_logprobs()
        .into_iter()
        .map(|v| v.into_iter().map(Scalar::f64).collect())
        .collect();
    let mle = mle_loss(&per[gold]);
    let incorrect: Vec<Vec<f64>> = per
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != gold)
        .map(|(_, v)| v.clone())
        .collect();
    let (ul, clamps) = unlikelihood_loss(&incorrect);
    LossParts {
        mle,
        unlikelihood: ul,
        total: mle + gamma * ul,
        clamps,
    }
}

/// `∂(scale · item loss)/∂logits`.
fn item_dlogits<F: Scalar>(fwd: &Forward<F>, gold: usize, gamma: f64, scale: f64) -> Array2<F> {
    let b = &fwd.batch;
    let probs = fwd.logprobs.mapv(|x| x.exp());
    let mut d = Array2::zeros(probs.raw_dim());
    let n_inc = (b.ranges.len() - 1) as f64;
    for (c, range) in b.ranges.iter().enumerate() {
        let len = range.len() as f64;
        for t in range.clone() {
            let v = b.targets[t];
            let mut row = d.row_mut(t);
            let p = probs.row(t);
            if c == gold {
                // ∂(−log p_v)/∂z = p − e_v
                let w = F::of(scale / len);
                row.scaled_add(w, &p);
                row[v] -= w;
            } else {
                let lp = fwd.logprobs[[t, v]].f64();
                if neg_log_one_minus(lp).1 {
                    continue;
                }
                // ∂(−log(1 − p_v))/∂z = p_v/(1 − p_v) · (e_v − p)
                let pv = lp.exp();
                let w = F::of(scale * gamma / (n_inc * len) * pv / -lp.exp_m1());
                row.scaled_add(-w, &p);
                row[v] += w;
            }
        }
    }
    d
}

/// Mean loss over `items` without gradients.
pub fn batch_loss<F: Scalar>(
    model: &ToyLm<F>,
    peft: Option<&PeftParams<F>>,
    items: &[&TrainItem],
    gamma: f64,
) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for item in items {
        let fwd = model.forward(peft, &item.prompt, &item.choices, false)?;
        add(&mut acc, item_loss(&fwd, item.gold, gamma));
    }
    Ok(mean(acc, items.len()))
}

/// Mean loss over `items`, accumulating gradients into `grads`.
pub fn batch_loss_and_grad<F: Scalar>(
    model: &ToyLm<F>,
    peft: Option<&PeftParams<F>>,
    items: &[&TrainItem],
    gamma: f64,
    grads: &mut Grads<F>,
) -> Result<LossParts> {
    let scale = 1.0 / items.len() as f64;
    let mut acc = LossParts::default();
    for item in items {
        let fwd = model.forward(peft, &item.prompt, &item.choices, true)?;
        add(&mut acc, item_loss(&fwd, item.gold, gamma));
        let d = item_dlogits(&fwd, item.gold, gamma, scale);
        model.backward(peft, fwd, &d, grads)?;
    }
    Ok(mean(acc, items.len()))
}

fn add(acc: &mut LossParts, x: LossParts) {
    acc.mle += x.mle;
    acc.unlikelihood += x.unlikelihood;
    acc.total += x.total;
    acc.clamps += x.clamps;
}

fn mean(acc: LossParts, n: usize) -> LossParts {
    let n = n.max(1) as f64;
    LossParts {
        mle: acc.mle / n,
        unlikelihood: acc.unlikelihood / n,
        total: acc.total / n,
        clamps: acc.clamps,
    }
}
