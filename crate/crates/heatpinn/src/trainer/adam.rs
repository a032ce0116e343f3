//! Adam optimizer over a flat parameter vector.
//!
//! The state lives outside the parameters so a run can be checkpointed and
//! resumed mid-optimization: [`AdamState`] converts losslessly to and from
//! the checkpoint file's moment block, and bias corrections are recomputed
//! from the step counter, so a resumed run continues the exact trajectory
//! the uninterrupted run would have taken.

use super::TrainError;
use crate::network::checkpoint::OptMoments;
use crate::F;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    /// Step size.
    pub lr: F,
    /// First-moment (mean) decay rate.
    pub beta1: F,
    /// Second-moment (uncentered variance) decay rate.
    pub beta2: F,
    /// Denominator offset guarding against division by zero.
    pub eps: F,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(what.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be finite and positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps must be finite and positive");
        }
        Ok(())
    }
}

/// Moment estimates plus the step counter. Indexed like the flat parameter
/// vector it optimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<F>,
    v: Vec<F>,
}

impl AdamState {
    /// Fresh state (zero moments) for `len` parameters.
    pub fn new(len: usize) -> Self {
        AdamState { step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    /// Rebuild state from a checkpoint's moment block. The moment vectors
    /// must match the parameter count they will optimize.
    pub fn from_moments(moments: OptMoments, len: usize) -> Result<Self, TrainError> {
        if moments.m.len() != len || moments.v.len() != len {
            return Err(TrainError::StateShape {
                expected: len,
                got: moments.m.len().max(moments.v.len()),
            });
        }
        Ok(AdamState { step: moments.step, m: moments.m, v: moments.v })
    }

    /// The checkpoint form of this state.
    pub fn to_moments(&self) -> OptMoments {
        OptMoments { step: self.step, m: self.m.clone(), v: self.v.clone() }
    }

    /// Number of optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update in place:
///
/// m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²,
/// p ← p − lr·(m/(1−β₁ᵗ)) / (√(v/(1−β₂ᵗ)) + ε).
///
/// A non-finite gradient component is rejected before anything mutates, so
/// a failed step leaves parameters and state exactly as they were.
pub fn adam_step(
    state: &mut AdamState,
    hyper: &AdamParams,
    params: &mut [F],
    grad: &[F],
) -> Result<(), TrainError> {
    let n = state.m.len();
    if params.len() != n || grad.len() != n {
        return Err(TrainError::StateShape { expected: n, got: params.len().min(grad.len()) });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index, step: state.step + 1 });
    }
    state.step += 1;
    let t = state.step;
    // Bias corrections are pure functions of the step counter, so a resumed
    // state applies the same corrections the uninterrupted run would.
    let c1 = 1.0 - hyper.beta1.powi(t as i32);
    let c2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..n {
        let g = grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}
