//! Forward-mode dual numbers carrying first derivatives along `N` seed
//! directions plus the *diagonal* second derivatives along the same
//! directions.
//!
//! The diagonal-only restriction is what makes this cheap: propagating the
//! second derivative along direction `k` needs only the first derivative
//! along `k` and the second derivative along `k` — mixed terms never enter.
//! That is exactly the shape a heat-equation residual needs (∂t, ∇, and the
//! Laplacian's ∂²/∂xᵢ², never ∂²/∂xᵢ∂xⱼ).
//!
//! Components are any [`Value`], not just floats, so a `Dual2<Var, N>` runs
//! forward-mode *over* the reverse-mode tape: the output's value, gradient,
//! and second-derivative entries are then tape nodes, and one backward sweep
//! yields parameter gradients of any expression built from them.

use std::ops::{Add, Div, Mul, Neg, Sub};

use num_traits::{One, Zero};

use crate::scalar::{Real, Value};

/// Second-order dual number over `N` seed directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual2<V, const N: usize> {
    /// Primal value.
    pub v: V,
    /// First derivatives along the `N` seed directions.
    pub g: [V; N],
    /// Diagonal second derivatives along the same directions.
    pub h: [V; N],
}

impl<V: Value, const N: usize> Dual2<V, N> {
    /// A value with zero tangents (a constant with respect to all seeds).
    pub fn constant(v: V) -> Self {
        let z = v.lift(V::R::zero());
        Dual2 { v, g: [z; N], h: [z; N] }
    }

    /// The `k`-th independent variable: unit first derivative along seed `k`.
    pub fn seed(v: V, k: usize) -> Self {
        let mut d = Self::constant(v);
        d.g[k] = v.lift(V::R::one());
        d
    }

    /// Apply a scalar function given its value and first two derivatives at
    /// `self.v`. This is the chain rule for value, gradient, and diagonal
    /// second derivative in one place; every elementary function below
    /// funnels through it.
    fn chain(self, value: V, d1: V, d2: V) -> Self {
        let mut g = self.g;
        let mut h = self.h;
        for k in 0..N {
            // d²/ds² f(x(s)) = f''·(dx/ds)² + f'·d²x/ds²
            h[k] = d2 * self.g[k] * self.g[k] + d1 * self.h[k];
            g[k] = d1 * self.g[k];
        }
        Dual2 { v: value, g, h }
    }
}

impl<V: Value, const N: usize> Add for Dual2<V, N> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut out = self;
        out.v = self.v + rhs.v;
        for k in 0..N {
            out.g[k] = self.g[k] + rhs.g[k];
            out.h[k] = self.h[k] + rhs.h[k];
        }
        out
    }
}

impl<V: Value, const N: usize> Sub for Dual2<V, N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut out = self;
        out.v = self.v - rhs.v;
        for k in 0..N {
            out.g[k] = self.g[k] - rhs.g[k];
            out.h[k] = self.h[k] - rhs.h[k];
        }
        out
    }
}

impl<V: Value, const N: usize> Neg for Dual2<V, N> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut out = self;
        out.v = -self.v;
        for k in 0..N {
            out.g[k] = -self.g[k];
            out.h[k] = -self.h[k];
        }
        out
    }
}

impl<V: Value, const N: usize> Mul for Dual2<V, N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut out = self;
        out.v = self.v * rhs.v;
        let two = self.v.lift(V::R::of(2.0));
        for k in 0..N {
            // (fg)'' = f''g + 2f'g' + fg''
            out.h[k] = self.h[k] * rhs.v + two * self.g[k] * rhs.g[k] + self.v * rhs.h[k];
            out.g[k] = self.g[k] * rhs.v + self.v * rhs.g[k];
        }
        out
    }
}

impl<V: Value, const N: usize> Div for Dual2<V, N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        // q = f/g  =>  q' = (f' - q g')/g,  q'' = (f'' - 2 q' g' - q g'')/g
        let mut out = self;
        let q = self.v / rhs.v;
        let two = self.v.lift(V::R::of(2.0));
        out.v = q;
        for k in 0..N {
            let q1 = (self.g[k] - q * rhs.g[k]) / rhs.v;
            out.h[k] = (self.h[k] - two * q1 * rhs.g[k] - q * rhs.h[k]) / rhs.v;
            out.g[k] = q1;
        }
        out
    }
}

impl<V: Value, const N: usize> Value for Dual2<V, N> {
    type R = V::R;

    fn lift(&self, c: V::R) -> Self {
        Self::constant(self.v.lift(c))
    }

    fn primal(&self) -> V::R {
        self.v.primal()
    }

    fn tanh(self) -> Self {
        let t = self.v.tanh();
        let one = self.v.lift(V::R::one());
        let two = self.v.lift(V::R::of(2.0));
        let d1 = one - t * t;
        let d2 = -two * t * d1;
        self.chain(t, d1, d2)
    }

    fn softplus(self) -> Self {
        let s = self.v.softplus();
        // σ(v) written with Value ops; saturates to the correct 0/1 limits.
        let one = self.v.lift(V::R::one());
        let d1 = (one + (-self.v).exp()).powi(-1);
        let d2 = d1 * (one - d1);
        self.chain(s, d1, d2)
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    fn ln(self) -> Self {
        let l = self.v.ln();
        let d1 = self.v.powi(-1);
        let d2 = -(self.v.powi(-2));
        self.chain(l, d1, d2)
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        let half = self.v.lift(V::R::of(0.5));
        let d1 = half / s;
        let d2 = -(half * d1) / self.v;
        self.chain(s, d1, d2)
    }

    fn powi(self, n: i32) -> Self {
        match n {
            0 => Self::constant(self.v.lift(V::R::one())),
            1 => self,
            _ => {
                let value = self.v.powi(n);
                let d1 = self.v.lift(V::R::of(f64::from(n))) * self.v.powi(n - 1);
                let d2 = self.v.lift(V::R::of(f64::from(n) * f64::from(n - 1))) * self.v.powi(n - 2);
                self.chain(value, d1, d2)
            }
        }
    }
}
