//! Automatic differentiation: exact derivatives of the surrogate network
//! with respect to its *inputs* (forward-mode dual numbers, second order) and
//! of scalar losses with respect to its *parameters* (reverse-mode tape).
//!
//! The split follows the problem shape: inputs number 2–4, parameters number
//! thousands. Forward mode pays per input, reverse mode pays per output, so
//! each is used where it is linear-cost. For expressions that need parameter
//! gradients *of* input derivatives (every PDE-residual loss), duals are run
//! with tape variables as components — see [`Dual2`].
//!
//! Everything here is exact to floating-point roundoff; finite differences
//! appear only in tests, as the independent oracle.

mod dual;
mod tape;

pub use dual::Dual2;
pub use tape::{Gradients, Tape, Var};

use num_traits::Zero;
use thiserror::Error;

use crate::network::grad::DualEval;
use crate::network::{forward_generic, MuName, NetworkParams};
use crate::scalar::{Real, Value};

/// Errors from derivative evaluation.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("input vector has length {got}, network expects {expected}")]
    InputLen { expected: usize, got: usize },
    #[error("non-finite input component at index {index}")]
    NonFiniteInput { index: usize },
    #[error("loss evaluated to a non-finite value")]
    NonFiniteLoss,
}

/// Value and input-derivatives of the network output at one scaled point.
///
/// Layout is fixed to the 4-input convention (x̂, ŷ, ẑ, t̂): spatial
/// derivatives occupy the leading entries, the time derivative sits at
/// index 3, and unused slots (networks with fewer inputs) are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeBundle<T = crate::F> {
    /// Network output u (normalized temperature).
    pub value: T,
    /// ∂u/∂(x̂, ŷ, ẑ, t̂).
    pub grad_inputs: [T; 4],
    /// ∂²u/∂x̂², ∂²u/∂ŷ², ∂²u/∂ẑ² (no mixed terms — the heat operator never
    /// needs them).
    pub hess_diag: [T; 3],
}

/// Rearrange a raw dual bundle (seeds ordered: spatial dims then time) into
/// the fixed 4-slot layout. Components may be plain reals or tape variables.
pub fn bundle_from_dual<V: Value, const N: usize>(out: Dual2<V, N>) -> DerivativeBundle<V> {
    let zero = out.v.lift(V::R::zero());
    let mut b = DerivativeBundle {
        value: out.v,
        grad_inputs: [zero; 4],
        hess_diag: [zero; 3],
    };
    let sdim = N - 1;
    for k in 0..sdim {
        b.grad_inputs[k] = out.g[k];
        b.hess_diag[k] = out.h[k];
    }
    b.grad_inputs[3] = out.g[sdim];
    b
}

/// Evaluate the network and its exact first and (diagonal) second input
/// derivatives at one scaled point (`scaled.len() == input_dim`, spatial
/// coordinates first, time last).
pub fn eval_with_input_derivs<T: Real>(
    params: &NetworkParams<T>,
    scaled: &[T],
) -> Result<DerivativeBundle<T>, AdError> {
    let dim = params.spec.input_dim;
    if scaled.len() != dim {
        return Err(AdError::InputLen { expected: dim, got: scaled.len() });
    }
    for (index, v) in scaled.iter().enumerate() {
        if !v.is_finite() {
            return Err(AdError::NonFiniteInput { index });
        }
    }
    Ok(match dim {
        2 => bundle_from_dual(DualEval::<T, 2>::new(&params.spec).forward(params, scaled)),
        3 => bundle_from_dual(DualEval::<T, 3>::new(&params.spec).forward(params, scaled)),
        4 => bundle_from_dual(DualEval::<T, 4>::new(&params.spec).forward(params, scaled)),
        _ => unreachable!("spec validation bounds input_dim"),
    })
}

/// Network parameters seeded onto a tape: the view a loss closure uses inside
/// [`loss_param_gradient`].
pub struct TapeNet<'t, T: Real> {
    params: &'t NetworkParams<T>,
    /// Flat parameter variables: θ in layout order, then μ raw values.
    vars: Vec<Var<'t, T>>,
    tape: &'t Tape<T>,
}

impl<'t, T: Real> TapeNet<'t, T> {
    /// All flat parameter variables (θ then μ raws).
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Lift a constant onto the tape.
    pub fn constant(&self, c: T) -> Var<'t, T> {
        self.tape.constant(c)
    }

    /// The physical (softplus-mapped) value of a μ parameter, recorded on the
    /// tape so gradients flow into the raw entry.
    pub fn mu_physical(&self, name: MuName) -> Option<Var<'t, T>> {
        let idx = self.params.mu.entries().iter().position(|e| e.name == name)?;
        Some(self.vars[self.params.theta.len() + idx].softplus())
    }

    /// Plain network forward on the tape (value only).
    pub fn forward(&self, scaled: &[T]) -> Var<'t, T> {
        let input: Vec<Var<'t, T>> = scaled.iter().map(|&x| self.tape.constant(x)).collect();
        let theta = &self.vars[..self.params.theta.len()];
        forward_generic(&self.params.spec, theta, &input)
    }

    /// Network forward in dual-over-tape arithmetic: the returned bundle's
    /// components are tape nodes, so a loss may use ∂u/∂x̂ᵢ and ∂²u/∂x̂ᵢ² and
    /// still receive exact parameter gradients. `N` must equal `input_dim`.
    pub fn forward_bundle<const N: usize>(&self, scaled: &[T]) -> Dual2<Var<'t, T>, N> {
        assert_eq!(N, self.params.spec.input_dim, "seed count must equal input_dim");
        let input: Vec<Dual2<Var<'t, T>, N>> = scaled
            .iter()
            .enumerate()
            .map(|(i, &x)| Dual2::seed(self.tape.constant(x), i))
            .collect();
        let theta: Vec<Dual2<Var<'t, T>, N>> =
            self.vars[..self.params.theta.len()].iter().map(|&w| Dual2::constant(w)).collect();
        forward_generic(&self.params.spec, &theta, &input)
    }
}

/// Evaluate a scalar loss under reverse-mode differentiation and return
/// `(loss, gradient)` over the flat parameter vector (θ then μ raws).
///
/// Non-trainable μ entries receive exactly zero gradient entries; θ is always
/// trainable. The loss closure may use any mixture of [`TapeNet::forward`],
/// [`TapeNet::forward_bundle`], [`TapeNet::mu_physical`], and raw arithmetic
/// on [`TapeNet::vars`].
pub fn loss_param_gradient<T: Real, F>(
    params: &NetworkParams<T>,
    loss: F,
) -> Result<(T, Vec<T>), AdError>
where
    F: for<'t> FnOnce(&TapeNet<'t, T>) -> Var<'t, T>,
{
    let tape: Tape<T> = Tape::new();
    let vars: Vec<Var<'_, T>> = params.flat().into_iter().map(|v| tape.leaf(v)).collect();
    let net = TapeNet { params, vars, tape: &tape };
    let out = loss(&net);
    if !out.value().is_finite() {
        return Err(AdError::NonFiniteLoss);
    }
    let grads = tape.gradient(out);
    let nt = params.theta.len();
    let mut flat: Vec<T> = net.vars.iter().map(|&v| grads.wrt(v)).collect();
    for (i, e) in params.mu.entries().iter().enumerate() {
        if !e.trainable {
            flat[nt + i] = T::zero();
        }
    }
    Ok((out.value(), flat))
}
