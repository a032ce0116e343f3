//! Specialized MLP kernels for the training hot loop: a forward pass in
//! second-order dual arithmetic (weights stay plain scalars — they are
//! constants with respect to the *inputs*), and a hand-rolled reverse sweep
//! that backpropagates an adjoint of the whole output bundle
//! (value, ∂u/∂x̂ᵢ, ∂²u/∂x̂ᵢ²) to the weights and biases.
//!
//! Forward-mode handles the 2–4 inputs, reverse-mode handles the thousands
//! of parameters; this pairing keeps the cost per collocation point at a
//! small multiple of a plain forward pass. The generic
//! [`forward_generic`](super::forward_generic) path — duals whose components
//! are tape variables — computes the same quantities slowly; the test suite
//! holds the two (and central finite differences) together.
//!
//! Reverse rules, per layer (k ranges over seed directions):
//!
//! * activation `a = φ(z)`, with `d1..d3` the derivatives of φ at `z.v`:
//!   `z̄.h[k] = ā.h[k]·d1`,
//!   `z̄.g[k] = ā.g[k]·d1 + ā.h[k]·2·d2·z.g[k]`,
//!   `z̄.v = ā.v·d1 + Σₖ ā.g[k]·d2·z.g[k] + Σₖ ā.h[k]·(d3·z.g[k]² + d2·z.h[k])`
//! * linear `z = W a + b`: every bundle component is linear in `a` with the
//!   same `W`, so `W̄ ⊕= z̄.c ⊗ a.c` summed over components, `b̄ ⊕= z̄.v`,
//!   and `ā = Wᵀ z̄` componentwise.

use crate::autodiff::Dual2;
use crate::scalar::{sigmoid, softplus, Real};

use super::{NetworkParams, NetworkSpec};

/// φ, φ′, φ″ at `v` (forward needs the first two).
fn act_fwd<T: Real>(v: T, output: bool) -> (T, T, T) {
    if output {
        let s = sigmoid(v);
        (softplus(v), s, s * (T::one() - s))
    } else {
        let t = v.tanh();
        let d1 = T::one() - t * t;
        (t, d1, T::of(-2.0) * t * d1)
    }
}

/// φ′, φ″, φ‴ at `v` (backward needs one more order than forward).
fn act_bwd<T: Real>(v: T, output: bool) -> (T, T, T) {
    if output {
        let s = sigmoid(v);
        let d2 = s * (T::one() - s);
        (s, d2, d2 * (T::one() - T::of(2.0) * s))
    } else {
        let t = v.tanh();
        let d1 = T::one() - t * t;
        (d1, T::of(-2.0) * t * d1, d1 * (T::of(6.0) * t * t - T::of(2.0)))
    }
}

/// Reusable forward/backward workspace for one network architecture with `N`
/// seeded inputs (`N = 0` degenerates to a plain value pass, `N = input_dim`
/// gives the full derivative bundle).
#[derive(Debug, Clone)]
pub struct DualEval<T, const N: usize> {
    dims: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    input_dim: usize,
    /// Pre-activations, per layer.
    z: Vec<Vec<Dual2<T, N>>>,
    /// Activations: `a[0]` is the seeded input, `a[l+1] = φ(z[l])`.
    a: Vec<Vec<Dual2<T, N>>>,
    bar: Vec<Dual2<T, N>>,
    bar_prev: Vec<Dual2<T, N>>,
}

impl<T: Real, const N: usize> DualEval<T, N> {
    pub fn new(spec: &NetworkSpec) -> Self {
        assert!(N <= spec.input_dim, "more seed directions than network inputs");
        let dims = spec.layer_dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(r, c) in &dims {
            offsets.push(off);
            off += r * c + r;
        }
        let zero = Dual2::<T, N>::constant(T::zero());
        let mut a = Vec::with_capacity(dims.len() + 1);
        a.push(vec![zero; spec.input_dim]);
        let mut z = Vec::with_capacity(dims.len());
        for &(r, _) in &dims {
            z.push(vec![zero; r]);
            a.push(vec![zero; r]);
        }
        let w = spec.max_width();
        DualEval {
            dims,
            offsets,
            input_dim: spec.input_dim,
            z,
            a,
            bar: vec![zero; w],
            bar_prev: vec![zero; w],
        }
    }

    /// Forward pass. The first `N` inputs are seeded as independent
    /// directions; any remaining inputs are constants. Returns the output
    /// bundle and leaves the intermediate state in place for [`Self::backward`].
    pub fn forward(&mut self, params: &NetworkParams<T>, input: &[T]) -> Dual2<T, N> {
        assert_eq!(input.len(), self.input_dim, "input length mismatch");
        debug_assert_eq!(params.theta.len(), self.offsets.last().unwrap() + {
            let (r, c) = *self.dims.last().unwrap();
            r * c + r
        });
        for (i, &x) in input.iter().enumerate() {
            self.a[0][i] = if i < N { Dual2::seed(x, i) } else { Dual2::constant(x) };
        }
        let n_layers = self.dims.len();
        for l in 0..n_layers {
            let (rows, cols) = self.dims[l];
            let off = self.offsets[l];
            let w = &params.theta[off..off + rows * cols];
            let b = &params.theta[off + rows * cols..off + rows * cols + rows];
            let output = l + 1 == n_layers;
            for j in 0..rows {
                let mut acc = Dual2::<T, N>::constant(b[j]);
                let wrow = &w[j * cols..(j + 1) * cols];
                for (i, &wji) in wrow.iter().enumerate() {
                    let ai = self.a[l][i];
                    acc.v += wji * ai.v;
                    for k in 0..N {
                        acc.g[k] += wji * ai.g[k];
                        acc.h[k] += wji * ai.h[k];
                    }
                }
                self.z[l][j] = acc;
                let (val, d1, d2) = act_fwd(acc.v, output);
                let mut out = Dual2::<T, N>::constant(val);
                for k in 0..N {
                    out.g[k] = d1 * acc.g[k];
                    out.h[k] = d2 * acc.g[k] * acc.g[k] + d1 * acc.h[k];
                }
                self.a[l + 1][j] = out;
            }
        }
        self.a[n_layers][0]
    }

    /// Reverse sweep from an adjoint of the output bundle, accumulating
    /// `d⟨out_bar, output⟩/dθ` into `grad` (layout of `NetworkParams::theta`,
    /// `+=` semantics). Requires a preceding [`Self::forward`] with the same
    /// parameters.
    pub fn backward(&mut self, params: &NetworkParams<T>, out_bar: Dual2<T, N>, grad: &mut [T]) {
        let n_layers = self.dims.len();
        let zero = Dual2::<T, N>::constant(T::zero());
        self.bar[0] = out_bar;
        for l in (0..n_layers).rev() {
            let (rows, cols) = self.dims[l];
            let off = self.offsets[l];
            let output = l + 1 == n_layers;
            let w = &params.theta[off..off + rows * cols];
            if l > 0 {
                for e in self.bar_prev.iter_mut().take(cols) {
                    *e = zero;
                }
            }
            for j in 0..rows {
                let zj = self.z[l][j];
                let abar = self.bar[j];
                let (d1, d2, d3) = act_bwd(zj.v, output);
                let mut zbar = zero;
                let mut vacc = abar.v * d1;
                for k in 0..N {
                    zbar.h[k] = abar.h[k] * d1;
                    zbar.g[k] = abar.g[k] * d1 + abar.h[k] * T::of(2.0) * d2 * zj.g[k];
                    vacc += abar.g[k] * d2 * zj.g[k] + abar.h[k] * (d3 * zj.g[k] * zj.g[k] + d2 * zj.h[k]);
                }
                zbar.v = vacc;
                grad[off + rows * cols + j] += zbar.v;
                let wrow = &w[j * cols..(j + 1) * cols];
                for (i, &wji) in wrow.iter().enumerate() {
                    let ai = self.a[l][i];
                    let mut wbar = zbar.v * ai.v;
                    for k in 0..N {
                        wbar += zbar.g[k] * ai.g[k] + zbar.h[k] * ai.h[k];
                    }
                    grad[off + j * cols + i] += wbar;
                    if l > 0 {
                        let bp = &mut self.bar_prev[i];
                        bp.v += wji * zbar.v;
                        for k in 0..N {
                            bp.g[k] += wji * zbar.g[k];
                            bp.h[k] += wji * zbar.h[k];
                        }
                    }
                }
            }
            std::mem::swap(&mut self.bar, &mut self.bar_prev);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Var};
    use crate::network::{forward_generic, NetworkParams, NetworkSpec};
    use crate::scalar::Value;

    fn random_params(input_dim: usize, hidden: &[usize], seed: u64) -> NetworkParams<f64> {
        let spec = NetworkSpec::new(input_dim, hidden.to_vec(), seed).unwrap();
        let mut p = NetworkParams::init(&spec).unwrap();
        // Nonzero biases so bias gradients are exercised.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0x5eed);
        for v in p.theta.iter_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
        p
    }

    fn forward_reference<const N: usize>(p: &NetworkParams<f64>, x: &[f64]) -> Dual2<f64, N> {
        // Independent path: generic forward with dual-lifted weights.
        let theta: Vec<Dual2<f64, N>> = p.theta.iter().map(|&w| Dual2::constant(w)).collect();
        let input: Vec<Dual2<f64, N>> =
            x.iter().enumerate().map(|(i, &v)| if i < N { Dual2::seed(v, i) } else { Dual2::constant(v) }).collect();
        forward_generic(&p.spec, &theta, &input)
    }

    #[test]
    fn fused_forward_matches_generic_forward() {
        let p = random_params(4, &[8, 8], 21);
        let mut ws = DualEval::<f64, 4>::new(&p.spec);
        for trial in 0..20 {
            let s = trial as f64 / 19.0;
            let x = [2.0 * s - 1.0, s * s - 0.5, -s, 0.3 * s + 0.1];
            let got = ws.forward(&p, &x);
            let want = forward_reference::<4>(&p, &x);
            assert!((got.v - want.v).abs() <= 1e-14 * want.v.abs().max(1.0));
            for k in 0..4 {
                assert!((got.g[k] - want.g[k]).abs() <= 1e-12 * want.g[k].abs().max(1.0));
                assert!((got.h[k] - want.h[k]).abs() <= 1e-12 * want.h[k].abs().max(1.0));
            }
        }
    }

    /// Scalar functional of the full output bundle with fixed mixing
    /// coefficients — used to compare the fused backward against central
    /// finite differences and against the tape.
    fn mix<const N: usize>(out: Dual2<f64, N>, s: &[f64]) -> f64 {
        let mut acc = s[0] * out.v;
        for k in 0..N {
            acc += s[1 + k] * out.g[k] + s[1 + N + k] * out.h[k];
        }
        acc
    }

    #[test]
    fn fused_backward_matches_finite_differences_and_tape() {
        let mut p = random_params(3, &[6, 5], 33);
        let x = [0.37, -0.52, 0.81];
        let s: Vec<f64> = (0..7).map(|i| 0.3 + 0.17 * i as f64).collect();

        // Analytic gradient via the fused reverse sweep.
        let mut ws = DualEval::<f64, 3>::new(&p.spec);
        ws.forward(&p, &x);
        let mut out_bar = Dual2::<f64, 3>::constant(s[0]);
        for k in 0..3 {
            out_bar.g[k] = s[1 + k];
            out_bar.h[k] = s[4 + k];
        }
        let mut grad = vec![0.0; p.theta.len()];
        ws.backward(&p, out_bar, &mut grad);

        // Oracle 1: central finite differences of the mixed functional.
        let n = p.theta.len();
        for idx in 0..n {
            let h = 1e-5 * p.theta[idx].abs().max(1.0);
            let orig = p.theta[idx];
            p.theta[idx] = orig + h;
            let fp = mix(ws.forward(&p, &x), &s);
            p.theta[idx] = orig - h;
            let fm = mix(ws.forward(&p, &x), &s);
            p.theta[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let tol = 1e-6 * fd.abs().max(1e-4);
            assert!((grad[idx] - fd).abs() <= tol, "θ[{idx}]: fused {} vs fd {}", grad[idx], fd);
        }
        ws.forward(&p, &x); // restore stored state for clarity

        // Oracle 2: forward-over-reverse on the tape.
        let tape: Tape<f64> = Tape::new();
        let theta_vars: Vec<Var<'_, f64>> = p.theta.iter().map(|&w| tape.leaf(w)).collect();
        let theta_dual: Vec<Dual2<Var<'_, f64>, 3>> =
            theta_vars.iter().map(|&w| Dual2::constant(w)).collect();
        let input: Vec<Dual2<Var<'_, f64>, 3>> =
            x.iter().enumerate().map(|(i, &v)| Dual2::seed(tape.constant(v), i)).collect();
        let out = forward_generic(&p.spec, &theta_dual, &input);
        let mut loss = out.v.lift(0.0);
        let sv: Vec<Var<'_, f64>> = s.iter().map(|&c| tape.constant(c)).collect();
        loss = loss + sv[0] * out.v;
        for k in 0..3 {
            loss = loss + sv[1 + k] * out.g[k] + sv[4 + k] * out.h[k];
        }
        let g = tape.gradient(loss);
        for (idx, &tv) in theta_vars.iter().enumerate() {
            let want = g.wrt(tv);
            let tol = 1e-10 * want.abs().max(1e-6);
            assert!((grad[idx] - want).abs() <= tol, "θ[{idx}]: fused {} vs tape {}", grad[idx], want);
        }
    }

    #[test]
    fn value_only_pass_matches_plain_forward() {
        let p = random_params(4, &[8], 5);
        let mut ws = DualEval::<f64, 0>::new(&p.spec);
        let x = [0.2, -0.4, 0.9, -0.1];
        let got = ws.forward(&p, &x);
        let want = p.forward(&x).unwrap();
        assert_eq!(got.v, want);
    }

    #[test]
    fn value_only_backward_is_plain_backprop() {
        let mut p = random_params(2, &[5], 9);
        let x = [0.6, -0.3];
        let mut ws = DualEval::<f64, 0>::new(&p.spec);
        ws.forward(&p, &x);
        let mut grad = vec![0.0; p.theta.len()];
        ws.backward(&p, Dual2::constant(1.0), &mut grad);
        for idx in 0..p.theta.len() {
            let h = 1e-6;
            let orig = p.theta[idx];
            p.theta[idx] = orig + h;
            let fp = ws.forward(&p, &x).v;
            p.theta[idx] = orig - h;
            let fm = ws.forward(&p, &x).v;
            p.theta[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((grad[idx] - fd).abs() <= 1e-7 * fd.abs().max(1e-3), "θ[{idx}]");
        }
    }

    #[test]
    fn backward_accumulates_rather_than_overwrites() {
        let p = random_params(2, &[4], 13);
        let x = [0.25, 0.5];
        let mut ws = DualEval::<f64, 2>::new(&p.spec);
        ws.forward(&p, &x);
        let bar = Dual2::<f64, 2>::seed(1.0, 0);
        let mut once = vec![0.0; p.theta.len()];
        ws.backward(&p, bar, &mut once);
        let mut twice = vec![0.0; p.theta.len()];
        ws.backward(&p, bar, &mut twice);
        ws.backward(&p, bar, &mut twice);
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1e-12));
        }
    }
}
