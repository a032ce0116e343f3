//! Deterministic direct and iterative solvers for the implicit time stepper.
//!
//! The Crank–Nicolson step produces a symmetric positive-definite system once
//! every row is scaled by its control-volume fraction over its lagged
//! conductivity.  One-dimensional problems are tridiagonal and solved exactly
//! with the Thomas algorithm; higher-dimensional problems use a matrix-free
//! conjugate-gradient iteration with Jacobi preconditioning.  Both solvers are
//! strictly sequential so repeated runs are bit-identical.

/// Solves a tridiagonal system in place using the Thomas algorithm.
///
/// `lower[i]` couples row `i` to `i - 1` (entry `lower[0]` is ignored),
/// `diag[i]` is the main diagonal, and `upper[i]` couples row `i` to `i + 1`
/// (entry `upper[n - 1]` is ignored).  Returns the solution vector, or `None`
/// when a pivot degenerates to zero.
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    assert_eq!(lower.len(), n);
    assert_eq!(upper.len(), n);
    assert_eq!(rhs.len(), n);
    if n == 0 {
        return Some(Vec::new());
    }
    let mut scratch = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot == 0.0 || !pivot.is_finite() {
        return None;
    }
    scratch[0] = upper[0] / pivot;
    out[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * scratch[i - 1];
        if pivot == 0.0 || !pivot.is_finite() {
            return None;
        }
        scratch[i] = upper[i] / pivot;
        out[i] = (rhs[i] - lower[i] * out[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        out[i] = out[i] - scratch[i] * out[i + 1];
    }
    Some(out)
}

/// Outcome of a conjugate-gradient solve.
pub struct CgOutcome {
    /// Number of iterations performed.
    pub iterations: usize,
    /// Final relative residual `‖b − Ax‖₂ / ‖b‖₂`.
    pub relative_residual: f64,
    /// Whether the requested tolerance was reached.
    pub converged: bool,
}

/// Jacobi-preconditioned conjugate gradients on a matrix-free operator.
///
/// `apply` must implement `y = A x` for a symmetric positive-definite `A`;
/// `inv_diag` holds the reciprocal diagonal of `A`.  The solve starts from
/// `x` (used as the initial guess and overwritten with the solution) and
/// stops once the true-residual norm drops below `tol * ‖b‖₂` or after
/// `max_iter` iterations.
pub fn pcg<F>(
    apply: F,
    b: &[f64],
    x: &mut [f64],
    inv_diag: &[f64],
    tol: f64,
    max_iter: usize,
) -> CgOutcome
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    assert_eq!(x.len(), n);
    assert_eq!(inv_diag.len(), n);
    let norm_b = dot(b, b).sqrt();
    if norm_b == 0.0 {
        x.fill(0.0);
        return CgOutcome { iterations: 0, relative_residual: 0.0, converged: true };
    }
    let target = tol * norm_b;

    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];

    apply(x, &mut ap);
    for i in 0..n {
        r[i] = b[i] - ap[i];
    }
    let mut norm_r = dot(&r, &r).sqrt();
    if norm_r <= target {
        return CgOutcome { iterations: 0, relative_residual: norm_r / norm_b, converged: true };
    }
    for i in 0..n {
        z[i] = inv_diag[i] * r[i];
    }
    p.copy_from_slice(&z);
    let mut rz = dot(&r, &z);

    for iter in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return CgOutcome {
                iterations: iter,
                relative_residual: norm_r / norm_b,
                converged: false,
            };
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        norm_r = dot(&r, &r).sqrt();
        if norm_r <= target {
            return CgOutcome {
                iterations: iter,
                relative_residual: norm_r / norm_b,
                converged: true,
            };
        }
        for i in 0..n {
            z[i] = inv_diag[i] * r[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    CgOutcome { iterations: max_iter, relative_residual: norm_r / norm_b, converged: false }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    // 3x3 tridiagonal system solved by hand:
    //   [ 2 -1  0 ] [x0]   [1]
    //   [-1  2 -1 ] [x1] = [0]
    //   [ 0 -1  2 ] [x2]   [1]
    // Forward elimination gives x = (1, 1, 1).
    #[test]
    fn thomas_solves_hand_checked_system() {
        let lower = [0.0, -1.0, -1.0];
        let diag = [2.0, 2.0, 2.0];
        let upper = [-1.0, -1.0, 0.0];
        let rhs = [1.0, 0.0, 1.0];
        let x = thomas(&lower, &diag, &upper, &rhs).unwrap();
        for xi in &x {
            assert!((xi - 1.0).abs() < 1e-14, "got {xi}");
        }
    }

    #[test]
    fn thomas_rejects_zero_pivot() {
        // Row 1 pivot becomes 1 - 1*1 = 0 after elimination.
        let lower = [0.0, 1.0];
        let diag = [1.0, 1.0];
        let upper = [1.0, 0.0];
        let rhs = [1.0, 1.0];
        assert!(thomas(&lower, &diag, &upper, &rhs).is_none());
    }

    #[test]
    fn pcg_matches_thomas_on_spd_tridiagonal() {
        // Diagonally dominant tridiagonal matrix: diag 4, off-diagonals -1.
        let n = 64;
        let lower: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { -1.0 }).collect();
        let upper: Vec<f64> = (0..n).map(|i| if i == n - 1 { 0.0 } else { -1.0 }).collect();
        let diag = vec![4.0; n];
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();

        let direct = thomas(&lower, &diag, &upper, &rhs).unwrap();

        let apply = |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let mut acc = 4.0 * x[i];
                if i > 0 {
                    acc -= x[i - 1];
                }
                if i + 1 < n {
                    acc -= x[i + 1];
                }
                y[i] = acc;
            }
        };
        let inv_diag = vec![0.25; n];
        let mut x = vec![0.0; n];
        let out = pcg(apply, &rhs, &mut x, &inv_diag, 1e-13, 10 * n);
        assert!(out.converged, "residual {}", out.relative_residual);
        for i in 0..n {
            assert!((x[i] - direct[i]).abs() < 1e-11, "row {i}: {} vs {}", x[i], direct[i]);
        }
    }

    #[test]
    fn pcg_zero_rhs_returns_zero() {
        let apply = |x: &[f64], y: &mut [f64]| y.copy_from_slice(x);
        let b = [0.0; 4];
        let mut x = [1.0, 2.0, 3.0, 4.0];
        let inv_diag = [1.0; 4];
        let out = pcg(apply, &b, &mut x, &inv_diag, 1e-13, 100);
        assert!(out.converged);
        assert_eq!(x, [0.0; 4]);
    }

    #[test]
    fn pcg_reports_nonconvergence_within_budget() {
        // Identity system converges instantly; force failure with max_iter 0
        // on a nonzero residual instead.
        let apply = |x: &[f64], y: &mut [f64]| y.copy_from_slice(x);
        let b = [1.0, 1.0];
        let mut x = [0.0, 0.0];
        let inv_diag = [1.0, 1.0];
        let out = pcg(apply, &b, &mut x, &inv_diag, 1e-30, 0);
        assert!(!out.converged);
    }
}
