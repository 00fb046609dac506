//! The hypothesis velocity field: a dense tanh network over `(t, x)`
//! returning a `d`-vector, with every derivative query the dynamics and
//! adjoint passes need.
//!
//! Time enters as a raw input coordinate. All spatial derivative queries
//! run the shared [`AffineTanhStack`] forward pass under multi-tangent
//! scalars; parameter sensitivities of derived quantities run the same
//! stack's reverse sweep in dual arithmetic.

use crate::deriv::{theta_len, AffineTanhStack, MAX_LAYERS, MAX_WIDTH};
use crate::fsio::atomic_write;
use crate::rng::{stream_rng, Stream};
use crate::scalar::{dir3_var, grad2_var, Dir3, Dual, Dual1, Dual2, Grad2, Scalar};
use rand::Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("architecture must list at least input and output widths")]
    EmptyArch,
    #[error("layer width {0} outside supported range 1..={MAX_WIDTH}")]
    BadWidth(usize),
    #[error("architecture depth {0} exceeds supported {MAX_LAYERS} entries")]
    TooDeep(usize),
    #[error("spatial dimension {0} unsupported (expected 1..=3)")]
    BadDim(usize),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Flat parameter vector plus architecture descriptor. Input width is the
/// spatial dimension plus one (time is an input coordinate); activation is
/// tanh on every hidden layer, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    widths: Vec<usize>,
    pub theta: Vec<f64>,
}

/// Velocity value together with the spatial derivative queries used by the
/// score dynamics: Jacobian, divergence and gradient-of-divergence.
#[derive(Debug, Clone, Default)]
pub struct NetEval {
    pub value: Vec<f64>,
    /// Row-major `d x d`: `jac[i*d + j] = ∂f_i/∂x_j`.
    pub jac: Vec<f64>,
    pub div: f64,
    pub grad_div: Vec<f64>,
}

impl NetEval {
    pub fn new(d: usize) -> Self {
        Self {
            value: vec![0.0; d],
            jac: vec![0.0; d * d],
            div: 0.0,
            grad_div: vec![0.0; d],
        }
    }

    fn resize(&mut self, d: usize) {
        self.value.resize(d, 0.0);
        self.jac.resize(d * d, 0.0);
        self.grad_div.resize(d, 0.0);
    }
}

/// A [`NetEval`] differentiated once more along a fixed direction:
/// `jac_dot = d/dε J`, `grad_div_dot = d/dε ∇(∇·f)` at `x + ε·dir`.
/// Supplies the second and third spatial derivatives the adjoint contracts.
#[derive(Debug, Clone, Default)]
pub struct DirectedEval {
    pub base: NetEval,
    pub jac_dot: Vec<f64>,
    pub grad_div_dot: Vec<f64>,
}

impl DirectedEval {
    pub fn new(d: usize) -> Self {
        Self {
            base: NetEval::new(d),
            jac_dot: vec![0.0; d * d],
            grad_div_dot: vec![0.0; d],
        }
    }

    fn resize(&mut self, d: usize) {
        self.base.resize(d);
        self.jac_dot.resize(d * d, 0.0);
        self.grad_div_dot.resize(d, 0.0);
    }
}

/// Time-dependent velocity fields the transport pipeline can integrate.
/// Implemented by the network and by the closed-form reference fields.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn eval_full(&self, t: f64, x: &[f64], out: &mut NetEval);

    /// `-∇(∇·f) - J^T ξ`, the transported-score right-hand side.
    fn score_rhs(&self, t: f64, x: &[f64], xi: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut ev = NetEval::new(d);
        self.eval_full(t, x, &mut ev);
        score_rhs_from_eval(&ev, xi, out);
    }
}

/// Assemble `-grad_div - jac^T xi` from an evaluation record.
pub fn score_rhs_from_eval(ev: &NetEval, xi: &[f64], out: &mut [f64]) {
    let d = ev.value.len();
    for j in 0..d {
        let mut acc = -ev.grad_div[j];
        for i in 0..d {
            acc -= ev.jac[i * d + j] * xi[i];
        }
        out[j] = acc;
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"EINNCKP1";

impl NetParams {
    /// Glorot-uniform weights, zero biases, deterministic per seed.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self, NetError> {
        Self::validate(widths)?;
        let mut theta = vec![0.0; theta_len(widths)];
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut off = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for value in theta.iter_mut().skip(off).take(fan_in * fan_out) {
                *value = rng.gen_range(-bound..bound);
            }
            off += (fan_in + 1) * fan_out;
        }
        Ok(Self {
            widths: widths.to_vec(),
            theta,
        })
    }

    /// All-zero parameters (the zero velocity field).
    pub fn zeros(widths: &[usize]) -> Result<Self, NetError> {
        Self::validate(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            theta: vec![0.0; theta_len(widths)],
        })
    }

    fn validate(widths: &[usize]) -> Result<(), NetError> {
        if widths.len() < 2 {
            return Err(NetError::EmptyArch);
        }
        if widths.len() > MAX_LAYERS {
            return Err(NetError::TooDeep(widths.len()));
        }
        if let Some(&w) = widths.iter().find(|&&w| w == 0 || w > MAX_WIDTH) {
            return Err(NetError::BadWidth(w));
        }
        let d = widths[widths.len() - 1];
        if widths[0] != d + 1 || d == 0 || d > 3 {
            return Err(NetError::BadDim(d));
        }
        Ok(())
    }

    /// Conventional architecture: `[d+1, width x depth, d]`.
    pub fn arch(d: usize, hidden_layers: usize, hidden_width: usize) -> Vec<usize> {
        let mut widths = Vec::with_capacity(hidden_layers + 2);
        widths.push(d + 1);
        widths.extend(std::iter::repeat(hidden_width).take(hidden_layers));
        widths.push(d);
        widths
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn stack(&self) -> AffineTanhStack<'_> {
        AffineTanhStack::new(&self.widths, &self.theta)
    }

    /// FNV-1a over the architecture and raw parameter bits; pins trajectory
    /// records to the parameters that produced them.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for &w in &self.widths {
            for b in (w as u64).to_le_bytes() {
                eat(b);
            }
        }
        for &v in &self.theta {
            for b in v.to_bits().to_le_bytes() {
                eat(b);
            }
        }
        h
    }

    fn check_input(&self, t: f64, x: &[f64]) -> Result<(), NetError> {
        if x.len() != self.dim() {
            return Err(NetError::ShapeMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteInput);
        }
        Ok(())
    }

    fn velocity_d<const D: usize>(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let mut input = [0.0f64; 4];
        input[0] = t;
        input[1..1 + D].copy_from_slice(&x[..D]);
        let mut buf = [0.0f64; MAX_WIDTH];
        self.stack().forward(&input[..D + 1], &mut buf);
        out[..D].copy_from_slice(&buf[..D]);
    }

    fn eval_full_d<const D: usize>(&self, t: f64, x: &[f64], out: &mut NetEval) {
        let mut input = [Grad2::<D>::zero(); 4];
        input[0] = Grad2::from_f64(t);
        for k in 0..D {
            input[k + 1] = grad2_var::<D>(x[k], k);
        }
        let mut buf = [Grad2::<D>::zero(); MAX_WIDTH];
        self.stack().forward(&input[..D + 1], &mut buf);
        out.resize(D);
        out.div = 0.0;
        for j in 0..D {
            out.grad_div[j] = 0.0;
        }
        for i in 0..D {
            let o = &buf[i];
            out.value[i] = o.v.v;
            for j in 0..D {
                out.jac[i * D + j] = o.v.d[j];
                out.grad_div[j] += o.d[i].d[j];
            }
            out.div += o.v.d[i];
        }
    }

    fn eval_directed_d<const D: usize>(
        &self,
        t: f64,
        x: &[f64],
        dir: &[f64],
        out: &mut DirectedEval,
    ) {
        let mut input = [Dir3::<D>::zero(); 4];
        input[0] = Dir3::from_f64(t);
        for k in 0..D {
            input[k + 1] = dir3_var::<D>(x[k], k, dir[k]);
        }
        let mut buf = [Dir3::<D>::zero(); MAX_WIDTH];
        self.stack().forward(&input[..D + 1], &mut buf);
        out.resize(D);
        out.base.div = 0.0;
        for j in 0..D {
            out.base.grad_div[j] = 0.0;
            out.grad_div_dot[j] = 0.0;
        }
        for i in 0..D {
            let o = &buf[i];
            out.base.value[i] = o.v.v.v;
            for j in 0..D {
                out.base.jac[i * D + j] = o.v.v.d[j];
                out.base.grad_div[j] += o.v.d[i].d[j];
                out.jac_dot[i * D + j] = o.dv.v.d[j];
                out.grad_div_dot[j] += o.dv.d[i].d[j];
            }
            out.base.div += o.v.v.d[i];
        }
    }

    /// One evaluation differentiated along `dir`; used by the adjoint
    /// state-transpose contraction (third derivatives of the field enter
    /// through `grad_div_dot`).
    pub fn eval_directed(&self, t: f64, x: &[f64], dir: &[f64], out: &mut DirectedEval) {
        match self.dim() {
            1 => self.eval_directed_d::<1>(t, x, dir, out),
            2 => self.eval_directed_d::<2>(t, x, dir, out),
            3 => self.eval_directed_d::<3>(t, x, dir, out),
            d => unreachable!("validated dimension {d}"),
        }
    }

    /// `grad += ∂(cov^T f(t, x; θ))/∂θ` — plain reverse sweep.
    pub fn value_vjp(&self, t: f64, x: &[f64], cov: &[f64], grad: &mut [f64]) {
        let d = self.dim();
        let mut input = [0.0f64; 4];
        input[0] = t;
        input[1..1 + d].copy_from_slice(&x[..d]);
        let mut seed = [0.0f64; MAX_WIDTH];
        seed[..d].copy_from_slice(&cov[..d]);
        self.stack()
            .backward_accumulate(&input[..d + 1], &seed[..d], grad);
    }

    /// `grad += ∂(α^T f - β^T ∇(∇·f) - σ^T J β)/∂θ`, the combined
    /// parameter cotangent of one transition block contracted against the
    /// adjoint covectors `(α, β)` at a point with transported score `σ`.
    pub fn transition_vjp(
        &self,
        t: f64,
        x: &[f64],
        alpha: &[f64],
        beta: &[f64],
        sigma: &[f64],
        grad: &mut [f64],
    ) {
        let d = self.dim();
        let mut input1 = [Dual1::zero(); 4];
        input1[0] = Dual1::from_f64(t);
        for k in 0..d {
            input1[k + 1] = Dual1::seeded(x[k], beta[k]);
        }
        // top slot carries -σ^T (J β); value slot carries α^T f
        let mut seed1 = [Dual1::zero(); MAX_WIDTH];
        for i in 0..d {
            seed1[i] = Dual1::new(-sigma[i], alpha[i]);
        }
        self.stack()
            .backward_accumulate(&input1[..d + 1], &seed1[..d], grad);

        if beta.iter().all(|&b| b == 0.0) {
            return;
        }
        // -β^T ∇(∇·f) = -Σ_i ∂²f_i/∂x_i∂β, one mixed second-order pass per i
        for i in 0..d {
            let mut input2 = [Dual2::zero(); 4];
            input2[0] = Dual2::from_f64(t);
            for k in 0..d {
                input2[k + 1] = Dual2::new(
                    Dual1::seeded(x[k], if k == i { 1.0 } else { 0.0 }),
                    Dual1::new(beta[k], 0.0),
                );
            }
            let mut seed2 = [Dual2::zero(); MAX_WIDTH];
            seed2[i] = Dual2::from_f64(-1.0);
            self.stack()
                .backward_accumulate(&input2[..d + 1], &seed2[..d], grad);
        }
    }

    /// Parameter cotangent of the raw output: `cov^T ∂f/∂θ` as a fresh
    /// params-sized vector.
    pub fn param_vjp(&self, t: f64, x: &[f64], cov: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(t, x)?;
        if cov.len() != self.dim() {
            return Err(NetError::ShapeMismatch {
                expected: self.dim(),
                got: cov.len(),
            });
        }
        let mut grad = vec![0.0; self.n_params()];
        self.value_vjp(t, x, cov, &mut grad);
        Ok(grad)
    }

    /// Checked full evaluation: value, Jacobian, divergence and
    /// gradient-of-divergence in one pass.
    pub fn eval_full_checked(&self, t: f64, x: &[f64]) -> Result<NetEval, NetError> {
        self.check_input(t, x)?;
        let mut out = NetEval::new(self.dim());
        VelocityField::eval_full(self, t, x, &mut out);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut bytes = Vec::with_capacity(16 + 4 * self.widths.len() + 8 * self.theta.len());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for &w in &self.widths {
            bytes.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for &v in &self.theta {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        atomic_write(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let bytes = std::fs::read(path)?;
        let fail = |msg: &str| NetError::CorruptCheckpoint(msg.to_string());
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic"));
        }
        let n_widths = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut off = 12;
        if bytes.len() < off + 4 * n_widths {
            return Err(fail("truncated arch"));
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        Self::validate(&widths)?;
        let n_theta = theta_len(&widths);
        if bytes.len() != off + 8 * n_theta {
            return Err(fail("theta length mismatch"));
        }
        let mut theta = Vec::with_capacity(n_theta);
        for _ in 0..n_theta {
            theta.push(f64::from_bits(u64::from_le_bytes(
                bytes[off..off + 8].try_into().unwrap(),
            )));
            off += 8;
        }
        Ok(Self { widths, theta })
    }
}

impl VelocityField for NetParams {
    fn dim(&self) -> usize {
        NetParams::dim(self)
    }

    fn velocity(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self.dim() {
            1 => self.velocity_d::<1>(t, x, out),
            2 => self.velocity_d::<2>(t, x, out),
            3 => self.velocity_d::<3>(t, x, out),
            d => unreachable!("validated dimension {d}"),
        }
    }

    fn eval_full(&self, t: f64, x: &[f64], out: &mut NetEval) {
        match self.dim() {
            1 => self.eval_full_d::<1>(t, x, out),
            2 => self.eval_full_d::<2>(t, x, out),
            3 => self.eval_full_d::<3>(t, x, out),
            d => unreachable!("validated dimension {d}"),
        }
    }
}

/// `f(t, x) = A x + c t`, handy as an exactly-known field in tests and
/// transport checks.
pub struct LinearField {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub d: usize,
}

impl LinearField {
    pub fn autonomous(d: usize, a: Vec<f64>) -> Self {
        Self {
            a,
            c: vec![0.0; d],
            d,
        }
    }
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.d
    }

    fn velocity(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for i in 0..self.d {
            let mut acc = self.c[i] * t;
            for j in 0..self.d {
                acc += self.a[i * self.d + j] * x[j];
            }
            out[i] = acc;
        }
    }

    fn eval_full(&self, t: f64, x: &[f64], out: &mut NetEval) {
        out.resize(self.d);
        self.velocity(t, x, &mut out.value);
        out.jac.copy_from_slice(&self.a);
        out.div = (0..self.d).map(|i| self.a[i * self.d + i]).sum();
        out.grad_div.iter_mut().for_each(|g| *g = 0.0);
    }
}
