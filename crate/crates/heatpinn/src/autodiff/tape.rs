//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Each arithmetic operation records its parents and the *local partial
//! derivatives* with respect to them, evaluated immediately. A single
//! backward sweep then accumulates adjoints in reverse recording order,
//! giving the gradient of one output with respect to every recorded node in
//! time proportional to the tape length — the right tool when parameters
//! number in the thousands and outputs number one.
//!
//! [`Var`]s are `Copy` handles (tape reference + node index + cached value),
//! so expressions read like ordinary arithmetic. Tapes are reused across
//! evaluations via [`Tape::clear`], which keeps the node buffer's capacity.

use std::cell::RefCell;

use crate::scalar::{sigmoid, softplus, Real, Value};

#[derive(Debug, Clone, Copy)]
struct Node<T> {
    /// Parent node indices. Leaves point at themselves with zero partials.
    parent: [u32; 2],
    /// Local partial derivative with respect to each parent.
    partial: [T; 2],
}

/// Recording tape. Create one per differentiated evaluation, or reuse with
/// [`Tape::clear`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// A scalar variable recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    index: u32,
    value: T,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forget all recorded nodes but keep the allocation.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// Record an independent variable (gradient flows into it).
    pub fn leaf(&self, value: T) -> Var<'_, T> {
        self.push(value, [0, 0], [T::zero(), T::zero()], true)
    }

    /// Record a constant. Structurally identical to a leaf; the distinction
    /// is purely for the reader, since nothing propagates past either.
    pub fn constant(&self, value: T) -> Var<'_, T> {
        self.leaf(value)
    }

    fn push(&self, value: T, mut parent: [u32; 2], partial: [T; 2], is_leaf: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let index = u32::try_from(nodes.len()).expect("tape exceeds u32 node indices");
        if is_leaf {
            parent = [index, index];
        }
        nodes.push(Node { parent, partial });
        drop(nodes);
        Var { tape: self, index, value }
    }

    /// Compute adjoints of every node with respect to `output` and return
    /// them as a lookup structure.
    pub fn gradient(&self, output: Var<'_, T>) -> Gradients<T> {
        debug_assert!(std::ptr::eq(output.tape, self), "output recorded on a different tape");
        let nodes = self.nodes.borrow();
        let mut adjoint = vec![T::zero(); nodes.len()];
        adjoint[output.index as usize] = T::one();
        for i in (0..nodes.len()).rev() {
            let a = adjoint[i];
            if a == T::zero() {
                continue;
            }
            let node = nodes[i];
            for p in 0..2 {
                let j = node.parent[p] as usize;
                if j != i {
                    adjoint[j] += node.partial[p] * a;
                }
            }
        }
        Gradients { adjoint }
    }
}

/// Adjoints produced by [`Tape::gradient`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    adjoint: Vec<T>,
}

impl<T: Real> Gradients<T> {
    /// d(output)/d(var).
    pub fn wrt(&self, var: Var<'_, T>) -> T {
        self.adjoint[var.index as usize]
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(self) -> T {
        self.value
    }

    fn unary(self, value: T, partial: T) -> Var<'t, T> {
        self.tape.push(value, [self.index, self.index], [partial, T::zero()], false)
    }

    fn binary(self, rhs: Var<'t, T>, value: T, da: T, db: T) -> Var<'t, T> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "operands recorded on different tapes");
        self.tape.push(value, [self.index, rhs.index], [da, db], false)
    }
}

impl<'t, T: Real> std::ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        self.binary(rhs, self.value + rhs.value, T::one(), T::one())
    }
}

impl<'t, T: Real> std::ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.binary(rhs, self.value - rhs.value, T::one(), -T::one())
    }
}

impl<'t, T: Real> std::ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t, T: Real> std::ops::Div for Var<'t, T> {
    type Output = Var<'t, T>;
    fn div(self, rhs: Self) -> Self::Output {
        let inv = T::one() / rhs.value;
        self.binary(rhs, self.value * inv, inv, -self.value * inv * inv)
    }
}

impl<'t, T: Real> std::ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        self.unary(-self.value, -T::one())
    }
}

impl<T: Real> Value for Var<'_, T> {
    type R = T;

    fn lift(&self, c: T) -> Self {
        self.tape.constant(c)
    }

    fn primal(&self) -> T {
        self.value
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, T::one() - t * t)
    }

    fn softplus(self) -> Self {
        self.unary(softplus(self.value), sigmoid(self.value))
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.value.ln(), T::one() / self.value)
    }

    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.unary(s, T::of(0.5) / s)
    }

    fn powi(self, n: i32) -> Self {
        let partial = match n {
            0 => T::zero(),
            _ => T::of(f64::from(n)) * self.value.powi(n - 1),
        };
        self.unary(self.value.powi(n), partial)
    }
}
