//! Directional-derivative engine over compositions of affine maps and
//! smooth elementwise activations.
//!
//! Two layers live here:
//!
//! - [`SmoothFn`], a small closed composition language (affine, tanh,
//!   scaling, sums, elementwise products) evaluated generically over any
//!   [`Scalar`]. Nested dual evaluation yields directional derivatives up
//!   to order three.
//! - [`AffineTanhStack`], the parameterized dense-stack primitive shared
//!   with the velocity network: a generic forward pass plus a reverse pass
//!   that runs in dual arithmetic, so parameter sensitivities of derived
//!   quantities (Jacobian-vector products, divergence gradients) come out
//!   of the same machinery.

use crate::scalar::{Dual, Dual1, Dual2, Dual3, Scalar, SeedScalar};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DerivError {
    #[error("derivative order {0} out of supported range 1..=3")]
    OrderOutOfRange(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dual tower nesting levels differ: {0} vs {1}")]
    LevelMismatch(usize, usize),
    #[error("non-finite input")]
    NonFinite,
}

/// Nested dual number with the nesting order fixed at construction.
/// Arithmetic between towers of different order is rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DualTower {
    Order1(Dual1),
    Order2(Dual2),
    Order3(Dual3),
}

impl DualTower {
    /// Seed `value` with the same directional coefficient at every nesting
    /// level, so the top coefficient of arithmetic results is the pure
    /// directional derivative of the given order.
    pub fn seeded(value: f64, direction: f64, order: usize) -> Result<Self, DerivError> {
        match order {
            1 => Ok(Self::Order1(Dual1::seeded(value, direction))),
            2 => Ok(Self::Order2(Dual2::seeded(
                Dual1::seeded(value, direction),
                Dual1::constant(direction),
            ))),
            3 => Ok(Self::Order3(Dual3::seeded(
                Dual2::seeded(Dual1::seeded(value, direction), Dual1::constant(direction)),
                Dual2::constant(Dual1::constant(direction)),
            ))),
            n => Err(DerivError::OrderOutOfRange(n)),
        }
    }

    pub fn order(&self) -> usize {
        match self {
            Self::Order1(_) => 1,
            Self::Order2(_) => 2,
            Self::Order3(_) => 3,
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Self::Order1(d) => d.primal(),
            Self::Order2(d) => d.primal(),
            Self::Order3(d) => d.primal(),
        }
    }

    /// Highest-order directional coefficient.
    pub fn derivative(&self) -> f64 {
        match self {
            Self::Order1(d) => d.top(),
            Self::Order2(d) => d.top(),
            Self::Order3(d) => d.top(),
        }
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, DerivError> {
        match (self, rhs) {
            (Self::Order1(a), Self::Order1(b)) => Ok(Self::Order1(*a + *b)),
            (Self::Order2(a), Self::Order2(b)) => Ok(Self::Order2(*a + *b)),
            (Self::Order3(a), Self::Order3(b)) => Ok(Self::Order3(*a + *b)),
            _ => Err(DerivError::LevelMismatch(self.order(), rhs.order())),
        }
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self, DerivError> {
        match (self, rhs) {
            (Self::Order1(a), Self::Order1(b)) => Ok(Self::Order1(*a * *b)),
            (Self::Order2(a), Self::Order2(b)) => Ok(Self::Order2(*a * *b)),
            (Self::Order3(a), Self::Order3(b)) => Ok(Self::Order3(*a * *b)),
            _ => Err(DerivError::LevelMismatch(self.order(), rhs.order())),
        }
    }
}

/// Composition of supported smooth primitives. Anything expressible here
/// is differentiable to third order by construction; dimension errors are
/// caught by [`SmoothFn::check`] before evaluation.
#[derive(Debug, Clone)]
pub enum SmoothFn {
    /// `x -> A x + b`; `a` is row-major with `b.len()` rows.
    Affine { a: Vec<f64>, b: Vec<f64> },
    /// Elementwise tanh.
    Tanh,
    /// Elementwise scaling by a constant.
    Scale(f64),
    /// `f_n ∘ ... ∘ f_1` (applied left to right).
    Chain(Vec<SmoothFn>),
    /// `x -> f(x) + g(x)`.
    Sum(Box<SmoothFn>, Box<SmoothFn>),
    /// `x -> f(x) ⊙ g(x)` (elementwise product).
    ElemProd(Box<SmoothFn>, Box<SmoothFn>),
}

impl SmoothFn {
    /// Validate the composition for a given input width and return the
    /// output width.
    pub fn check(&self, input_dim: usize) -> Result<usize, DerivError> {
        match self {
            Self::Affine { a, b } => {
                let rows = b.len();
                if rows == 0 || a.len() != rows * input_dim {
                    return Err(DerivError::DimensionMismatch {
                        expected: rows * input_dim,
                        got: a.len(),
                    });
                }
                Ok(rows)
            }
            Self::Tanh | Self::Scale(_) => Ok(input_dim),
            Self::Chain(parts) => {
                let mut dim = input_dim;
                for p in parts {
                    dim = p.check(dim)?;
                }
                Ok(dim)
            }
            Self::Sum(f, g) | Self::ElemProd(f, g) => {
                let df = f.check(input_dim)?;
                let dg = g.check(input_dim)?;
                if df != dg {
                    return Err(DerivError::DimensionMismatch {
                        expected: df,
                        got: dg,
                    });
                }
                Ok(df)
            }
        }
    }

    /// Evaluate over any scalar type.
    pub fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        match self {
            Self::Affine { a, b } => {
                let rows = b.len();
                let cols = x.len();
                let mut out = Vec::with_capacity(rows);
                for r in 0..rows {
                    let mut acc = S::from_f64(b[r]);
                    for c in 0..cols {
                        acc = acc + x[c].mul_f64(a[r * cols + c]);
                    }
                    out.push(acc);
                }
                out
            }
            Self::Tanh => x.iter().map(|v| v.tanh()).collect(),
            Self::Scale(c) => x.iter().map(|v| v.mul_f64(*c)).collect(),
            Self::Chain(parts) => {
                let mut cur = x.to_vec();
                for p in parts {
                    cur = p.eval(&cur);
                }
                cur
            }
            Self::Sum(f, g) => {
                let a = f.eval(x);
                let b = g.eval(x);
                a.into_iter().zip(b).map(|(u, v)| u + v).collect()
            }
            Self::ElemProd(f, g) => {
                let a = f.eval(x);
                let b = g.eval(x);
                a.into_iter().zip(b).map(|(u, v)| u * v).collect()
            }
        }
    }
}

fn check_point(fun: &SmoothFn, point: &[f64]) -> Result<usize, DerivError> {
    if point.iter().any(|v| !v.is_finite()) {
        return Err(DerivError::NonFinite);
    }
    fun.check(point.len())
}

/// `d^order/dε^order f(point + ε·direction)` at `ε = 0`, for orders 1..=3.
pub fn directional_derivative(
    fun: &SmoothFn,
    point: &[f64],
    direction: &[f64],
    order: usize,
) -> Result<Vec<f64>, DerivError> {
    check_point(fun, point)?;
    if direction.len() != point.len() {
        return Err(DerivError::DimensionMismatch {
            expected: point.len(),
            got: direction.len(),
        });
    }
    if direction.iter().any(|v| !v.is_finite()) {
        return Err(DerivError::NonFinite);
    }
    match order {
        1 => {
            let x: Vec<Dual1> = point
                .iter()
                .zip(direction)
                .map(|(&p, &u)| Dual1::seeded(p, u))
                .collect();
            Ok(fun.eval(&x).iter().map(|y| y.top()).collect())
        }
        2 => {
            let x: Vec<Dual2> = point
                .iter()
                .zip(direction)
                .map(|(&p, &u)| Dual2::seeded(Dual1::seeded(p, u), Dual1::constant(u)))
                .collect();
            Ok(fun.eval(&x).iter().map(|y| y.top()).collect())
        }
        3 => {
            let x: Vec<Dual3> = point
                .iter()
                .zip(direction)
                .map(|(&p, &u)| {
                    Dual3::seeded(
                        Dual2::seeded(Dual1::seeded(p, u), Dual1::constant(u)),
                        Dual2::constant(Dual1::constant(u)),
                    )
                })
                .collect();
            Ok(fun.eval(&x).iter().map(|y| y.top()).collect())
        }
        n => Err(DerivError::OrderOutOfRange(n)),
    }
}

/// Full Jacobian, assembled from one first-order directional pass per
/// input coordinate. Row `i`, column `j` holds `∂f_i/∂x_j`.
pub fn jacobian(fun: &SmoothFn, point: &[f64]) -> Result<Vec<Vec<f64>>, DerivError> {
    let out_dim = check_point(fun, point)?;
    let n = point.len();
    let mut jac = vec![vec![0.0; n]; out_dim];
    let mut dir = vec![0.0; n];
    for j in 0..n {
        dir[j] = 1.0;
        let col = directional_derivative(fun, point, &dir, 1)?;
        dir[j] = 0.0;
        for i in 0..out_dim {
            jac[i][j] = col[i];
        }
    }
    Ok(jac)
}

/// `∇(∇·f)` for a map `f: R^d -> R^d`, via second-order nested passes with
/// mixed coordinate directions.
pub fn grad_divergence(fun: &SmoothFn, point: &[f64]) -> Result<Vec<f64>, DerivError> {
    let out_dim = check_point(fun, point)?;
    let n = point.len();
    if out_dim != n {
        return Err(DerivError::DimensionMismatch {
            expected: n,
            got: out_dim,
        });
    }
    let mut out = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            // ∂²f_i / ∂x_i ∂x_j through a mixed-direction second-order pass
            let x: Vec<Dual2> = (0..n)
                .map(|k| {
                    Dual2::seeded(
                        Dual1::seeded(point[k], if k == i { 1.0 } else { 0.0 }),
                        Dual1::constant(if k == j { 1.0 } else { 0.0 }),
                    )
                })
                .collect();
            out[j] += fun.eval(&x)[i].top();
        }
    }
    Ok(out)
}

/// Dense affine/tanh stack over a flat parameter vector: the parameterized
/// composition the velocity network evaluates. `widths` lists layer sizes
/// from input to output; every layer but the last is followed by tanh.
/// Parameters pack per layer as row-major weights then biases.
pub struct AffineTanhStack<'a> {
    pub widths: &'a [usize],
    pub theta: &'a [f64],
}

/// Widest layer supported by the stack's fixed evaluation buffers.
pub const MAX_WIDTH: usize = 64;
/// Maximum number of width entries (input + hidden layers + output).
pub const MAX_LAYERS: usize = 12;

pub fn theta_len(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl<'a> AffineTanhStack<'a> {
    pub fn new(widths: &'a [usize], theta: &'a [f64]) -> Self {
        debug_assert!(widths.len() >= 2 && widths.len() <= MAX_LAYERS);
        debug_assert!(widths.iter().all(|&w| w >= 1 && w <= MAX_WIDTH));
        debug_assert_eq!(theta.len(), theta_len(widths));
        Self { widths, theta }
    }

    /// Forward pass; writes the outputs of the final affine layer into
    /// `out` and returns the number of outputs.
    pub fn forward<S: Scalar>(&self, input: &[S], out: &mut [S]) -> usize {
        let mut bufs = [[S::zero(); MAX_WIDTH]; 2];
        let n_in = self.widths[0];
        bufs[0][..n_in].copy_from_slice(&input[..n_in]);
        let mut off = 0;
        let last = self.widths.len() - 2;
        let mut cur_w = n_in;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (nin, nout) = (w[0], w[1]);
            let wts = &self.theta[off..off + nin * nout];
            let bias = &self.theta[off + nin * nout..off + (nin + 1) * nout];
            let (lo, hi) = bufs.split_at_mut(1);
            let (a, b) = if l % 2 == 0 {
                (&lo[0], &mut hi[0])
            } else {
                (&hi[0], &mut lo[0])
            };
            for r in 0..nout {
                let mut acc = S::from_f64(bias[r]);
                let row = &wts[r * nin..(r + 1) * nin];
                for c in 0..nin {
                    acc = acc + a[c].mul_f64(row[c]);
                }
                b[r] = if l < last { acc.tanh() } else { acc };
            }
            off += (nin + 1) * nout;
            cur_w = nout;
        }
        out[..cur_w].copy_from_slice(&bufs[(self.widths.len() - 1) % 2][..cur_w]);
        cur_w
    }

    /// Forward pass that stores every layer's post-activation values, for a
    /// subsequent reverse sweep.
    fn forward_stored<S: Scalar>(&self, input: &[S], acts: &mut [[S; MAX_WIDTH]]) {
        let n_in = self.widths[0];
        acts[0][..n_in].copy_from_slice(&input[..n_in]);
        let mut off = 0;
        let last = self.widths.len() - 2;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (nin, nout) = (w[0], w[1]);
            let wts = &self.theta[off..off + nin * nout];
            let bias = &self.theta[off + nin * nout..off + (nin + 1) * nout];
            let (lo, hi) = acts.split_at_mut(l + 1);
            let a = &lo[l];
            let b = &mut hi[0];
            for r in 0..nout {
                let mut acc = S::from_f64(bias[r]);
                let row = &wts[r * nin..(r + 1) * nin];
                for c in 0..nin {
                    acc = acc + a[c].mul_f64(row[c]);
                }
                b[r] = if l < last { acc.tanh() } else { acc };
            }
            off += (nin + 1) * nout;
        }
    }

    /// Reverse sweep in dual arithmetic. `seed` is the output cotangent
    /// (one ring element per output); for every parameter the top
    /// coefficient of `cotangent · activation` is accumulated into `grad`.
    /// With an order-k tower this yields the parameter gradient of the
    /// corresponding k-th derivative coefficient of the seeded functional.
    pub fn backward_accumulate<S: SeedScalar>(&self, input: &[S], seed: &[S], grad: &mut [f64]) {
        let n_layers = self.widths.len() - 1;
        let mut acts = [[S::zero(); MAX_WIDTH]; MAX_LAYERS];
        self.forward_stored(input, &mut acts[..self.widths.len()]);

        let mut delta = [S::zero(); MAX_WIDTH];
        let mut delta_prev = [S::zero(); MAX_WIDTH];
        let n_out = *self.widths.last().unwrap();
        delta[..n_out].copy_from_slice(&seed[..n_out]);

        // layer parameter offsets
        let mut offsets = [0usize; MAX_LAYERS];
        let mut off = 0;
        for (l, w) in self.widths.windows(2).enumerate() {
            offsets[l] = off;
            off += (w[0] + 1) * w[1];
        }

        for l in (0..n_layers).rev() {
            let (nin, nout) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let wts = &self.theta[off..off + nin * nout];
            let a = &acts[l];
            // weight and bias gradients
            for r in 0..nout {
                let d = delta[r];
                let g = &mut grad[off + r * nin..off + (r + 1) * nin];
                for c in 0..nin {
                    g[c] += d.mul_top(&a[c]);
                }
                grad[off + nin * nout + r] += d.top();
            }
            if l == 0 {
                break;
            }
            // propagate: delta_prev = W^T delta, then through tanh of layer l
            for c in 0..nin {
                let mut acc = S::zero();
                for r in 0..nout {
                    acc = acc + delta[r].mul_f64(wts[r * nin + c]);
                }
                // activation at layer l is tanh output; chain sech^2 = 1 - a^2
                let av = a[c];
                delta_prev[c] = acc * (S::one() - av * av);
            }
            delta[..nin].copy_from_slice(&delta_prev[..nin]);
        }
    }
}
