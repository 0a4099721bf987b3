use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::toy::{truncated_normal, Scalar, ToyLm};

pub const DEFAULT_RANK: usize = 4;
pub const A_INIT_STD: f64 = 0.02;

/// Rescaling vector and low-rank update for one `d_out × d_in` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<F> {
    pub(crate) lambda: Array1<F>,
    pub(crate) a: Array2<F>,
    pub(crate) b: Array2<F>,
}

impl<F: Scalar> Adapter<F> {
    /// `lambda: d_out`, `a: r × d_in`, `b: d_out × r`.
    pub fn new(lambda: Array1<F>, a: Array2<F>, b: Array2<F>) -> Result<Self> {
        if b.nrows() != lambda.len() || b.ncols() != a.nrows() {
            return Err(Error::shape(format!(
                "adapter shapes λ {:?}, A {:?}, B {:?} disagree",
                lambda.dim(),
                a.dim(),
                b.dim()
            )));
        }
        Ok(Adapter { lambda, a, b })
    }

    /// λ = 1, B = 0, A from a seeded truncated normal.
    pub fn identity(d_out: usize, d_in: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        Adapter {
            lambda: Array1::ones(d_out),
            a: Array2::from_shape_simple_fn((rank, d_in), || F::of(truncated_normal(rng, A_INIT_STD))),
            b: Array2::zeros((d_out, rank)),
        }
    }

    pub fn lambda(&self) -> &Array1<F> {
        &self.lambda
    }

    pub fn a(&self) -> &Array2<F> {
        &self.a
    }

    pub fn b(&self) -> &Array2<F> {
        &self.b
    }

    pub fn d_out(&self) -> usize {
        self.lambda.len()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_weights(&self) -> usize {
        self.lambda.len() + self.a.len() + self.b.len()
    }

    /// Length of tensor `slot` (0 = λ, 1 = A, 2 = B).
    pub fn num_weights_of(&self, slot: usize) -> usize {
        [self.lambda.len(), self.a.len(), self.b.len()][slot]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [F]; 3] {
        [
            self.lambda.as_slice_mut().expect("contiguous"),
            self.a.as_slice_mut().expect("contiguous"),
            self.b.as_slice_mut().expect("contiguous"),
        ]
    }

    fn check_base(&self, w0: &Array2<F>) -> Result<()> {
        if w0.dim() != (self.d_out(), self.d_in()) {
            return Err(Error::shape(format!(
                "W₀ is {:?} but the adapter expects {:?}",
                w0.dim(),
                (self.d_out(), self.d_in())
            )));
        }
        Ok(())
    }
}

/// `h = λ ⊙ (W₀x + B(Ax))`.
pub fn peft_forward<F: Scalar>(w0: &Array2<F>, adapter: &Adapter<F>, x: ArrayView1<'_, F>) -> Result<Array1<F>> {
    adapter.check_base(w0)?;
    if x.len() != adapter.d_in() {
        return Err(Error::shape(format!("x has length {}, expected {}", x.len(), adapter.d_in())));
    }
    let h = w0.dot(&x) + adapter.b.dot(&adapter.a.dot(&x));
    Ok(h * &adapter.lambda)
}

/// `W' = diag(λ)(W₀ + BA)`.
pub fn merge_weights<F: Scalar>(w0: &Array2<F>, adapter: &Adapter<F>) -> Result<Array2<F>> {
    adapter.check_base(w0)?;
    let w = w0 + &adapter.b.dot(&adapter.a);
    Ok(w * adapter.lambda.view().insert_axis(Axis(1)))
}

/// Gradient buffers shaped like an [`Adapter`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad<F> {
    pub lambda: Array1<F>,
    pub a: Array2<F>,
    pub b: Array2<F>,
}

impl<F: Scalar> AdapterGrad<F> {
    pub fn zeros_like(ad: &Adapter<F>) -> Self {
        AdapterGrad {
            lambda: Array1::zeros(ad.lambda.raw_dim()),
            a: Array2::zeros(ad.a.raw_dim()),
            b: Array2::zeros(ad.b.raw_dim()),
        }
    }

    pub(crate) fn tensors(&self) -> [&[F]; 3] {
        [
            self.lambda.as_slice().expect("contiguous"),
            self.a.as_slice().expect("contiguous"),
            self.b.as_slice().expect("contiguous"),
        ]
    }
}

/// Adapters for every adaptable matrix of a [`ToyLm`].
#[derive(Debug, Clone, PartialEq)]
pub struct PeftParams<F> {
    pub adapters: Vec<Adapter<F>>,
    /// Model parameter index of each adapter's base matrix.
    pub(crate) targets: Vec<usize>,
    slots: Vec<Option<usize>>,
}

impl<F: Scalar> PeftParams<F> {
    /// Identity-initialized adapters (outputs equal the frozen model's).
    pub fn init(model: &ToyLm<F>, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Validation("adapter rank must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapters = model
            .adaptable()
            .iter()
            .map(|&i| {
                let (d_out, d_in) = model.params()[i].dim();
                Adapter::identity(d_out, d_in, rank, &mut rng)
            })
            .collect();
        Self::from_adapters(model, adapters)
    }

    /// Attach adapters to the model's adaptable matrices, in order.
    pub fn from_adapters(model: &ToyLm<F>, adapters: Vec<Adapter<F>>) -> Result<Self> {
        let targets = model.adaptable().to_vec();
        if adapters.len() != targets.len() {
            return Err(Error::shape(format!(
                "{} adapters for {} adaptable matrices",
                adapters.len(),
                targets.len()
            )));
        }
        let mut slots = vec![None; model.params().len()];
        for (s, (ad, &t)) in adapters.iter().zip(&targets).enumerate() {
            ad.check_base(&model.params()[t])?;
            slots[t] = Some(s);
        }
        Ok(PeftParams { adapters, targets, slots })
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn rank(&self) -> usize {
        self.adapters.first().map_or(0, Adapter::rank)
    }

    pub fn for_param(&self, idx: usize) -> Option<&Adapter<F>> {
        self.slot(idx).map(|s| &self.adapters[s])
    }

    pub(crate) fn slot(&self, idx: usize) -> Option<usize> {
        self.slots.get(idx).copied().flatten()
    }

    pub fn num_weights(&self) -> usize {
        self.adapters.iter().map(Adapter::num_weights).sum()
    }

    pub fn cast<G: Scalar>(&self) -> PeftParams<G> {
        let c1 = |x: &Array1<F>| x.mapv(|v| G::of(v.f64()));
        let c2 = |x: &Array2<F>| x.mapv(|v| G::of(v.f64()));
        PeftParams {
            adapters: self
                .adapters
                .iter()
                .map(|a| Adapter {
                    lambda: c1(&a.lambda),
                    a: c2(&a.a),
                    b: c2(&a.b),
                })
                .collect(),
            targets: self.targets.clone(),
            slots: self.slots.clone(),
        }
    }
}
