//! Scalar abstractions the rest of the crate is generic over.
//!
//! Two layers:
//!
//! * [`Real`] — a plain floating-point type (`f32` or `f64`). Core math is
//!   written against this so precision is a type parameter, with `f64` as the
//!   shipped default ([`crate::F`]).
//! * [`Value`] — anything that behaves like a differentiable scalar over a
//!   `Real`: the reals themselves, forward-mode dual numbers, or reverse-mode
//!   tape variables. Network layers and physics residuals are written once
//!   against this trait and evaluated in whichever mode the caller needs.

use std::fmt::{Debug, Display};
use std::ops::{Add, Div, Mul, Neg, Sub};

/// A plain floating-point scalar.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + num_traits::NumAssign + Debug + Display + Send + Sync + 'static
{
    /// Shorthand for lifting an `f64` literal into `Self`.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal must be representable in the scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Real>(x: T) -> T {
    // max(x, 0) + ln(1 + e^-|x|) avoids overflow for large |x|.
    x.max(T::zero()) + x.abs().neg().exp().ln_1p()
}

/// Numerically stable logistic function `1 / (1 + e^-x)` (= softplus').
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of [`softplus`]: the `x` with `softplus(x) = y`, for `y > 0`.
pub fn softplus_inv<T: Real>(y: T) -> T {
    // ln(e^y - 1). Below ~33, expm1 keeps small y exact (1 - e^-y would
    // cancel); above, e^-y is negligible and the correction term is exact.
    if y > T::of(33.0) {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// A differentiable scalar: closed under arithmetic and the elementary
/// functions the networks and residuals are built from.
///
/// Implementors: every [`Real`] (plain evaluation), [`crate::autodiff::Dual2`]
/// (forward-mode first and second input derivatives), and
/// [`crate::autodiff::Var`] (reverse-mode parameter gradients). Branching on
/// [`Value::primal`] is allowed; the branch is treated as locally constant by
/// differentiation, the usual convention for piecewise-stable implementations.
pub trait Value:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// The underlying floating-point type.
    type R: Real;

    /// Lift a constant into the same context as `self` (same tape for tape
    /// variables; zero tangents for duals).
    fn lift(&self, c: Self::R) -> Self;

    /// The primal (undifferentiated) value.
    fn primal(&self) -> Self::R;

    fn tanh(self) -> Self;
    fn softplus(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
}

impl<T: Real> Value for T {
    type R = T;

    fn lift(&self, c: T) -> Self {
        c
    }

    fn primal(&self) -> T {
        *self
    }

    fn tanh(self) -> Self {
        num_traits::Float::tanh(self)
    }

    fn softplus(self) -> Self {
        softplus(self)
    }

    fn exp(self) -> Self {
        num_traits::Float::exp(self)
    }

    fn ln(self) -> Self {
        num_traits::Float::ln(self)
    }

    fn sqrt(self) -> Self {
        num_traits::Float::sqrt(self)
    }

    fn powi(self, n: i32) -> Self {
        num_traits::Float::powi(self, n)
    }
}
