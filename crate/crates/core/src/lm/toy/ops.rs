//! Layer primitives with explicit backward passes.
//!
//! Every `*_fwd` optionally keeps a cache; the matching `*_bwd` consumes it,
//! accumulates parameter gradients in place and returns the input gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis, Zip};

use super::Scalar;
use crate::peft_trainer::{Adapter, AdapterGrad};

const RMS_EPS: f64 = 1e-6;

pub(crate) struct LinCache<F> {
    x: Array2<F>,
    /// `x W₀ᵀ + x Aᵀ Bᵀ` before rescaling (adapted layers only).
    u: Option<Array2<F>>,
    /// `x Aᵀ` (adapted layers only).
    z: Option<Array2<F>>,
}

/// `y = x Wᵀ`, or `y = λ ⊙ (x W₀ᵀ + x Aᵀ Bᵀ)` with an adapter.
pub(crate) fn linear_fwd<F: Scalar>(
    w: &Array2<F>,
    adapter: Option<&Adapter<F>>,
    x: &Array2<F>,
    keep: bool,
) -> (Array2<F>, Option<LinCache<F>>) {
    let base = x.dot(&w.t());
    match adapter {
        None => {
            let cache = keep.then(|| LinCache {
                x: x.clone(),
                u: None,
                z: None,
            });
            (base, cache)
        }
        Some(ad) => {
            let z = x.dot(&ad.a.t());
            let mut u = base;
            general_mat_mul(F::one(), &z, &ad.b.t(), F::one(), &mut u);
            let y = &u * &ad.lambda;
            let cache = keep.then(|| LinCache {
                x: x.clone(),
                u: Some(u),
                z: Some(z),
            });
            (y, cache)
        }
    }
}

/// `dw` is skipped when `None` (frozen base weights); so is `dad`.
pub(crate) fn linear_bwd<F: Scalar>(
    w: &Array2<F>,
    adapter: Option<&Adapter<F>>,
    cache: LinCache<F>,
    dy: &Array2<F>,
    dw: Option<&mut Array2<F>>,
    dad: Option<&mut AdapterGrad<F>>,
) -> Array2<F> {
    let LinCache { x, u, z } = cache;
    let Some(ad) = adapter else {
        if let Some(dw) = dw {
            general_mat_mul(F::one(), &dy.t(), &x, F::one(), dw);
        }
        return dy.dot(w);
    };
    let u = u.expect("adapted layer cache holds u");
    let z = z.expect("adapted layer cache holds z");
    let du = dy * &ad.lambda;
    if let Some(dw) = dw {
        general_mat_mul(F::one(), &du.t(), &x, F::one(), dw);
    }
    let dz = du.dot(&ad.b);
    if let Some(g) = dad {
        g.lambda += &(dy * &u).sum_axis(Axis(0));
        general_mat_mul(F::one(), &du.t(), &z, F::one(), &mut g.b);
        general_mat_mul(F::one(), &dz.t(), &x, F::one(), &mut g.a);
    }
    let mut dx = du.dot(w);
    general_mat_mul(F::one(), &dz, &ad.a, F::one(), &mut dx);
    dx
}

pub(crate) struct RmsCache<F> {
    x: Array2<F>,
    inv: Array1<F>,
}

/// `y = g ⊙ x / sqrt(mean(x²) + ε)` row-wise; `g` is `1 × d`.
pub(crate) fn rms_fwd<F: Scalar>(x: &Array2<F>, g: &Array2<F>, keep: bool) -> (Array2<F>, Option<RmsCache<F>>) {
    let d = F::of(x.ncols() as f64);
    let eps = F::of(RMS_EPS);
    let inv: Array1<F> = x
        .rows()
        .into_iter()
        .map(|r| F::one() / (r.iter().map(|&v| v * v).sum::<F>() / d + eps).sqrt())
        .collect();
    let mut y = x * &inv.view().insert_axis(Axis(1));
    y *= &g.row(0);
    let cache = keep.then(|| RmsCache { x: x.clone(), inv });
    (y, cache)
}

pub(crate) fn rms_bwd<F: Scalar>(
    g: &Array2<F>,
    cache: RmsCache<F>,
    dy: &Array2<F>,
    dg: Option<&mut Array2<F>>,
) -> Array2<F> {
    let RmsCache { x, inv } = cache;
    let inv_col = inv.view().insert_axis(Axis(1));
    let xhat = &x * &inv_col;
    if let Some(dg) = dg {
        let mut row = dg.row_mut(0);
        row += &(dy * &xhat).sum_axis(Axis(0));
    }
    let dxhat = dy * &g.row(0);
    let d = F::of(x.ncols() as f64);
    let proj: Array1<F> = (&dxhat * &xhat).sum_axis(Axis(1)).mapv(|v| v / d);
    let mut dx = &xhat * &proj.view().insert_axis(Axis(1));
    Zip::from(&mut dx).and(&dxhat).for_each(|o, &a| *o = a - *o);
    dx * inv_col
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let (c, k, half) = (F::of(GELU_C), F::of(GELU_K), F::of(0.5));
    x.mapv(|v| half * v * (F::one() + (c * (v + k * v * v * v)).tanh()))
}

pub(crate) fn gelu_bwd<F: Scalar>(pre: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let (c, k, half, three) = (F::of(GELU_C), F::of(GELU_K), F::of(0.5), F::of(3.0));
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|o, &v| {
        let t = (c * (v + k * v * v * v)).tanh();
        let dt = (F::one() - t * t) * c * (F::one() + three * k * v * v);
        *o *= half * (F::one() + t) + half * v * dt;
    });
    dx
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_rows<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// `allowed[i][j]`: may query `i` attend to key `j`.
pub(crate) type Mask = Array2<bool>;

pub(crate) struct AttnCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
}

/// Multi-head scaled dot-product attention over already projected inputs.
pub(crate) fn attention_fwd<F: Scalar>(
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    heads: usize,
    mask: Option<&Mask>,
    keep: bool,
) -> (Array2<F>, Option<AttnCache<F>>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(if keep { heads } else { 0 });
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc.mapv_inplace(|x| x * scale);
        if let Some(m) = mask {
            Zip::from(&mut sc).and(m).for_each(|x, &ok| {
                if !ok {
                    *x = F::neg_infinity();
                }
            });
        }
        for mut row in sc.rows_mut() {
            let mx = row.fold(F::neg_infinity(), |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - mx).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let mut o = out.slice_mut(cols);
        general_mat_mul(F::one(), &sc, &v.slice(cols), F::zero(), &mut o);
        if keep {
            probs.push(sc);
        }
    }
    let cache = keep.then(|| AttnCache { q, k, v, probs });
    (out, cache)
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn attention_bwd<F: Scalar>(
    cache: AttnCache<F>,
    dout: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let AttnCache { q, k, v, probs } = cache;
    let heads = probs.len();
    let d = q.ncols();
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout_h = dout.slice(cols);
        let mut dv_h = dv.slice_mut(cols);
        general_mat_mul(F::one(), &p.t(), &dout_h, F::zero(), &mut dv_h);
        let mut ds = dout_h.dot(&v.slice(cols).t());
        let dot: Array1<F> = (&ds * p).sum_axis(Axis(1));
        Zip::from(ds.rows_mut()).and(p.rows()).and(&dot).for_each(|mut r, pr, &dd| {
            Zip::from(&mut r).and(&pr).for_each(|x, &pp| *x = pp * (*x - dd) * scale);
        });
        let mut dq_h = dq.slice_mut(cols);
        general_mat_mul(F::one(), &ds, &k.slice(cols), F::zero(), &mut dq_h);
        let mut dk_h = dk.slice_mut(cols);
        general_mat_mul(F::one(), &ds.t(), &q.slice(cols), F::zero(), &mut dk_h);
    }
    (dq, dk, dv)
}
