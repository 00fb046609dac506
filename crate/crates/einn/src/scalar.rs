//! Generic scalar arithmetic for nested forward-mode differentiation.
//!
//! Every numeric kernel in this crate (network evaluation, smooth-function
//! composition) is written once against the [`Scalar`] trait and then
//! instantiated with plain `f64` or with one of the dual types below:
//!
//! - [`Dual<S>`] carries one directional derivative; nesting it
//!   (`Dual<Dual<f64>>`, ...) yields mixed directional derivatives of
//!   order two and three.
//! - [`MDual<S, D>`] carries `D` tangents at once, so a single pass over a
//!   map produces the value together with all first partials; nesting gives
//!   the full second-derivative tensor in one pass.
//!
//! All instantiations use 64-bit floats underneath. Second and third
//! derivatives of `tanh` lose roughly eight digits in 32-bit arithmetic,
//! which is not enough accuracy for the adjoint pipeline built on top.

use num_traits::{One, Zero};
use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

/// Arithmetic closure required from every scalar type used in generic
/// numeric code: ring operations, scaling by plain constants and `tanh`.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    /// Lift a plain constant (all derivative coefficients zero).
    fn from_f64(c: f64) -> Self;
    /// Multiply by a plain constant. Much cheaper than lifting `c` first.
    fn mul_f64(self, c: f64) -> Self;
    fn tanh(self) -> Self;
    /// Value with every derivative coefficient stripped.
    fn primal(&self) -> f64;
}

/// Scalars forming a single-direction tower (`f64`, `Dual<f64>`,
/// `Dual<Dual<f64>>`, ...). These support extraction of the highest-order
/// coefficient, which is what reverse passes over dual-valued computations
/// accumulate.
pub trait SeedScalar: Scalar {
    /// Highest-order derivative coefficient.
    fn top(&self) -> f64;
    /// Highest-order coefficient of `self * other` without forming the
    /// full product.
    fn mul_top(&self, other: &Self) -> f64;
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(c: f64) -> Self {
        c
    }
    #[inline(always)]
    fn mul_f64(self, c: f64) -> Self {
        self * c
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline(always)]
    fn primal(&self) -> f64 {
        *self
    }
}

impl SeedScalar for f64 {
    #[inline(always)]
    fn top(&self) -> f64 {
        *self
    }
    #[inline(always)]
    fn mul_top(&self, other: &Self) -> f64 {
        self * other
    }
}

/// First-order dual number `v + ε·dv` over an arbitrary scalar, `ε² = 0`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Dual<S> {
    pub v: S,
    pub dv: S,
}

impl<S: Scalar> Dual<S> {
    #[inline(always)]
    pub fn new(v: S, dv: S) -> Self {
        Self { v, dv }
    }
    /// Constant: derivative coefficient zero.
    #[inline(always)]
    pub fn constant(v: S) -> Self {
        Self { v, dv: S::zero() }
    }
    /// Variable seeded with tangent `dv`.
    #[inline(always)]
    pub fn seeded(v: S, dv: S) -> Self {
        Self { v, dv }
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    #[inline(always)]
    fn add(self, rhs: Self) -> Self {
        Self::new(self.v + rhs.v, self.dv + rhs.dv)
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.v - rhs.v, self.dv - rhs.dv)
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, rhs: Self) -> Self {
        Self::new(self.v * rhs.v, self.v * rhs.dv + self.dv * rhs.v)
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        Self::new(-self.v, -self.dv)
    }
}

impl<S: Scalar> Zero for Dual<S> {
    #[inline(always)]
    fn zero() -> Self {
        Self::new(S::zero(), S::zero())
    }
    #[inline(always)]
    fn is_zero(&self) -> bool {
        self.v.is_zero() && self.dv.is_zero()
    }
}

impl<S: Scalar> One for Dual<S> {
    #[inline(always)]
    fn one() -> Self {
        Self::new(S::one(), S::zero())
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    #[inline(always)]
    fn from_f64(c: f64) -> Self {
        Self::constant(S::from_f64(c))
    }
    #[inline(always)]
    fn mul_f64(self, c: f64) -> Self {
        Self::new(self.v.mul_f64(c), self.dv.mul_f64(c))
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        // d tanh = (1 - tanh^2)
        let sech2 = S::one() - t * t;
        Self::new(t, self.dv * sech2)
    }
    #[inline(always)]
    fn primal(&self) -> f64 {
        self.v.primal()
    }
}

impl<S: SeedScalar> SeedScalar for Dual<S> {
    #[inline(always)]
    fn top(&self) -> f64 {
        self.dv.top()
    }
    #[inline(always)]
    fn mul_top(&self, other: &Self) -> f64 {
        self.v.mul_top(&other.dv) + self.dv.mul_top(&other.v)
    }
}

/// Multi-tangent dual: one value plus `D` independent first-order tangents.
/// There are no cross terms between tangents at the same level; crossed
/// derivatives come from nesting.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct MDual<S, const D: usize> {
    pub v: S,
    pub d: [S; D],
}

impl<S: Scalar, const D: usize> MDual<S, D> {
    #[inline(always)]
    pub fn constant(v: S) -> Self {
        Self {
            v,
            d: [S::zero(); D],
        }
    }
    /// Variable carrying the `k`-th coordinate tangent.
    #[inline(always)]
    pub fn variable(v: S, k: usize) -> Self {
        let mut d = [S::zero(); D];
        d[k] = S::one();
        Self { v, d }
    }
}

impl<S: Scalar, const D: usize> Add for MDual<S, D> {
    type Output = Self;
    #[inline(always)]
    fn add(self, rhs: Self) -> Self {
        let mut d = self.d;
        for k in 0..D {
            d[k] = d[k] + rhs.d[k];
        }
        Self {
            v: self.v + rhs.v,
            d,
        }
    }
}

impl<S: Scalar, const D: usize> Sub for MDual<S, D> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, rhs: Self) -> Self {
        let mut d = self.d;
        for k in 0..D {
            d[k] = d[k] - rhs.d[k];
        }
        Self {
            v: self.v - rhs.v,
            d,
        }
    }
}

impl<S: Scalar, const D: usize> Mul for MDual<S, D> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, rhs: Self) -> Self {
        let mut d = [S::zero(); D];
        for k in 0..D {
            d[k] = self.v * rhs.d[k] + self.d[k] * rhs.v;
        }
        Self {
            v: self.v * rhs.v,
            d,
        }
    }
}

impl<S: Scalar, const D: usize> Neg for MDual<S, D> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        let mut d = self.d;
        for k in 0..D {
            d[k] = -d[k];
        }
        Self { v: -self.v, d }
    }
}

impl<S: Scalar, const D: usize> Zero for MDual<S, D> {
    #[inline(always)]
    fn zero() -> Self {
        Self::constant(S::zero())
    }
    fn is_zero(&self) -> bool {
        self.v.is_zero() && self.d.iter().all(|t| t.is_zero())
    }
}

impl<S: Scalar, const D: usize> One for MDual<S, D> {
    #[inline(always)]
    fn one() -> Self {
        Self::constant(S::one())
    }
}

impl<S: Scalar, const D: usize> Scalar for MDual<S, D> {
    #[inline(always)]
    fn from_f64(c: f64) -> Self {
        Self::constant(S::from_f64(c))
    }
    #[inline(always)]
    fn mul_f64(self, c: f64) -> Self {
        let mut d = self.d;
        for k in 0..D {
            d[k] = d[k].mul_f64(c);
        }
        Self {
            v: self.v.mul_f64(c),
            d,
        }
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        let sech2 = S::one() - t * t;
        let mut d = [S::zero(); D];
        for k in 0..D {
            d[k] = self.d[k] * sech2;
        }
        Self { v: t, d }
    }
    #[inline(always)]
    fn primal(&self) -> f64 {
        self.v.primal()
    }
}

/// Single-direction dual towers used by the derivative-engine surface.
pub type Dual1 = Dual<f64>;
pub type Dual2 = Dual<Dual1>;
pub type Dual3 = Dual<Dual2>;

/// Multi-tangent first-order pass over `D` spatial coordinates.
pub type Grad1<const D: usize> = MDual<f64, D>;
/// Nested multi-tangent pass: value, gradient and full second-derivative
/// tensor of every output in one evaluation.
pub type Grad2<const D: usize> = MDual<Grad1<D>, D>;
/// A [`Grad2`] pass differentiated once more along a single direction;
/// supplies the third-order contractions the adjoint needs.
pub type Dir3<const D: usize> = Dual<Grad2<D>>;

/// Seed an input coordinate for a [`Grad2`] pass: coordinate `k` of a
/// `D`-dimensional point, tangents at both nesting levels.
#[inline(always)]
pub fn grad2_var<const D: usize>(x: f64, k: usize) -> Grad2<D> {
    let mut out = Grad2::<D>::constant(Grad1::<D>::variable(x, k));
    out.d[k] = Grad1::one();
    out
}

/// Seed an input coordinate for a [`Dir3`] pass: a [`grad2_var`] seed whose
/// outer dual tracks the derivative along `dir`.
#[inline(always)]
pub fn dir3_var<const D: usize>(x: f64, k: usize, dir_k: f64) -> Dir3<D> {
    Dual::seeded(grad2_var::<D>(x, k), Grad2::from_f64(dir_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn plain_arithmetic_recovered_when_tangents_zero() {
        let a = Dual2::from_f64(1.75);
        let b = Dual2::from_f64(-0.5);
        let c = (a * b + a).tanh();
        assert_relative_eq!(c.primal(), (1.75 * -0.5 + 1.75f64).tanh(), epsilon = 0.0);
        assert_eq!(c.top(), 0.0);
    }

    #[test]
    fn first_derivative_of_square() {
        // f(x) = x^2 at x = 3, direction 1 -> 6
        let x = Dual1::seeded(3.0, 1.0);
        let y = x * x;
        assert_relative_eq!(y.top(), 6.0, epsilon = 1e-14);
    }

    #[test]
    fn nested_duals_give_second_and_third_derivatives() {
        // f(x) = x^3: f'' = 6x, f''' = 6
        let x2 = Dual2::seeded(Dual1::seeded(2.0, 1.0), Dual1::constant(1.0));
        let y2 = x2 * x2 * x2;
        assert_relative_eq!(y2.top(), 12.0, epsilon = 1e-12);

        let x3 = Dual3::seeded(
            Dual2::seeded(Dual1::seeded(2.0, 1.0), Dual1::constant(1.0)),
            Dual2::constant(Dual1::constant(1.0)),
        );
        let y3 = x3 * x3 * x3;
        assert_relative_eq!(y3.top(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn tanh_chain_matches_closed_form() {
        // d tanh = sech^2, d2 tanh = -2 tanh sech^2
        let x = Dual2::seeded(Dual1::seeded(0.5, 1.0), Dual1::constant(1.0));
        let y = x.tanh();
        let t = 0.5f64.tanh();
        let sech2 = 1.0 - t * t;
        assert_relative_eq!(y.v.top(), sech2, epsilon = 1e-14);
        assert_relative_eq!(y.top(), -2.0 * t * sech2, epsilon = 1e-14);
    }

    #[test]
    fn grad2_pass_collects_gradient_and_hessian() {
        // f(x, y) = x^2 y at (2, 3)
        let x = grad2_var::<2>(2.0, 0);
        let y = grad2_var::<2>(3.0, 1);
        let f = x * x * y;
        assert_relative_eq!(f.primal(), 12.0, epsilon = 1e-14);
        // gradient (12, 4) on both levels
        assert_relative_eq!(f.v.d[0], 12.0, epsilon = 1e-14);
        assert_relative_eq!(f.d[1].v, 4.0, epsilon = 1e-14);
        // hessian [[6, 4], [4, 0]]
        assert_relative_eq!(f.d[0].d[0], 6.0, epsilon = 1e-14);
        assert_relative_eq!(f.d[0].d[1], 4.0, epsilon = 1e-14);
        assert_relative_eq!(f.d[1].d[0], 4.0, epsilon = 1e-14);
        assert_relative_eq!(f.d[1].d[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn dir3_pass_differentiates_hessian_entries() {
        // f(x, y) = x^3 + x y^2, third derivatives: f_xxx = 6, f_xyy = 2
        let dir = [1.0, 0.0]; // d/dx of the whole second-order pass
        let x = dir3_var::<2>(1.0, 0, dir[0]);
        let y = dir3_var::<2>(2.0, 1, dir[1]);
        let f = x * x * x + x * y * y;
        // d/dx of H[0][0] = f_xxx
        assert_relative_eq!(f.dv.d[0].d[0], 6.0, epsilon = 1e-12);
        // d/dx of H[1][1] = f_yyx
        assert_relative_eq!(f.dv.d[1].d[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn mul_top_matches_full_product() {
        let a = Dual2::seeded(Dual1::seeded(1.3, -0.7), Dual1::seeded(0.4, 2.2));
        let b = Dual2::seeded(Dual1::seeded(-0.2, 0.9), Dual1::seeded(1.1, -0.3));
        assert_relative_eq!(a.mul_top(&b), (a * b).top(), epsilon = 1e-14);
    }
}
