//! Fused loss-and-gradient evaluation over a collocation set.
//!
//! One call produces the same weighted loss breakdown as
//! [`LossProblem::assemble`] together with its gradient with respect to the
//! flat parameter vector (network weights, then μ raws). Per point, the
//! network output and its seeded input derivatives are computed once in
//! plain arithmetic; a small reverse-mode tape then differentiates only the
//! residual formula with respect to the derivative bundle and the μ raws,
//! and the bundle adjoints are pulled back through the network by the fused
//! layer-adjoint pass. The expensive network sweeps therefore run on plain
//! floats, and the tape never grows beyond one residual expression.
//!
//! Points are processed in the same canonical order as `assemble` (sorted by
//! time then position), in fixed-size chunks whose partial sums are folded
//! sequentially in chunk order, so the result is bit-identical for any input
//! point order and any worker count.

use rayon::prelude::*;

use crate::autodiff::{bundle_from_dual, Dual2, Tape, Var};
use crate::loss::{key_of, sorted_indices, LossBreakdown, LossError, LossProblem};
use crate::network::grad::DualEval;
use crate::network::{MuName, NetworkParams};
use crate::physics::MuOverrides;
use crate::sampling::CollocationSet;
use crate::scalar::Value;
use crate::F;

/// Points per parallel work item. Partial results are combined in chunk
/// order, so this fixes the floating-point summation tree independently of
/// the thread count.
const GRAD_CHUNK: usize = 128;

/// A loss breakdown plus the gradient of its weighted total with respect to
/// the flat parameter layout (θ first, then μ raws in `MuSet` order).
#[derive(Debug, Clone)]
pub struct GradientOutput {
    pub breakdown: LossBreakdown<F>,
    pub grad: Vec<F>,
}

/// Which PDE-side category a derivative-bundle pass evaluates.
#[derive(Clone, Copy)]
enum PdeKind {
    Interior,
    Boundary,
}

impl PdeKind {
    fn name(self) -> &'static str {
        match self {
            PdeKind::Interior => "interior",
            PdeKind::Boundary => "boundary",
        }
    }
}

/// Which value-fitting category a derivative-free pass evaluates.
#[derive(Clone, Copy)]
enum FitKind {
    Initial,
    Data,
}

impl FitKind {
    fn name(self) -> &'static str {
        match self {
            FitKind::Initial => "initial",
            FitKind::Data => "data",
        }
    }
}

/// Evaluate the loss and its parameter gradient in one pass.
///
/// The breakdown matches [`LossProblem::assemble`] on the same inputs up to
/// floating-point association (the two use different partial-sum widths);
/// the gradient is exact for the engine's own sums. Gradients of μ entries
/// marked non-trainable are zeroed, so their optimizer moments never move.
pub fn loss_and_gradient(
    problem: &LossProblem<F>,
    params: &NetworkParams<F>,
    colloc: &CollocationSet<F>,
) -> Result<GradientOutput, LossError> {
    problem.check_net(params)?;
    match problem.scaling.input_dim() {
        2 => run::<2>(problem, params, colloc),
        3 => run::<3>(problem, params, colloc),
        4 => run::<4>(problem, params, colloc),
        // `ScalingSpec` only produces 2–4 inputs (1–3 space dims plus time);
        // anything else would already have failed `check_net`.
        other => Err(LossError::InputDimMismatch { net: params.spec.input_dim, domain: other }),
    }
}

fn run<const N: usize>(
    problem: &LossProblem<F>,
    params: &NetworkParams<F>,
    colloc: &CollocationSet<F>,
) -> Result<GradientOutput, LossError> {
    let nt = params.theta.len();
    let flat_len = nt + params.mu.len();

    let order = sorted_indices(colloc.interior.iter().map(|p| key_of(p.pos, p.t)).collect());
    let (sum_r, grad_r) = bundle_pass::<N>(problem, params, colloc, PdeKind::Interior, &order)?;

    let order = sorted_indices(colloc.boundary.iter().map(|p| key_of(p.pos, p.t)).collect());
    let (sum_b, grad_b) = bundle_pass::<N>(problem, params, colloc, PdeKind::Boundary, &order)?;

    let order = sorted_indices(colloc.initial.iter().map(|p| key_of(p.pos, 0.0)).collect());
    let (sum_i, grad_i) = value_pass(problem, params, colloc, FitKind::Initial, &order)?;

    let order = sorted_indices(colloc.data.iter().map(|p| key_of(p.pos, p.t)).collect());
    let (sum_d, grad_d) = value_pass(problem, params, colloc, FitKind::Data, &order)?;

    let mean = |sum: F, n: usize| if n == 0 { 0.0 } else { sum / n as F };
    let l_r = mean(sum_r, colloc.interior.len());
    let l_b = mean(sum_b, colloc.boundary.len());
    let l_i = mean(sum_i, colloc.initial.len());
    let l_d = mean(sum_d, colloc.data.len());
    let breakdown =
        LossBreakdown::compose(l_b, l_i, l_r, l_d, &problem.weights, colloc.counts());

    let mut grad = vec![0.0; flat_len];
    let w = &problem.weights;
    accumulate(&mut grad, &grad_r, w.residual, colloc.interior.len());
    accumulate(&mut grad, &grad_b, w.boundary, colloc.boundary.len());
    accumulate(&mut grad, &grad_i, w.initial, colloc.initial.len());
    accumulate(&mut grad, &grad_d, w.data, colloc.data.len());
    for (slot, entry) in params.mu.entries().iter().enumerate() {
        if !entry.trainable {
            grad[nt + slot] = 0.0;
        }
    }
    Ok(GradientOutput { breakdown, grad })
}

/// grad += (weight / n) · part, the category's share of the total gradient.
fn accumulate(grad: &mut [F], part: &[F], weight: F, n: usize) {
    if n == 0 {
        return;
    }
    let scale = weight / n as F;
    for (g, p) in grad.iter_mut().zip(part) {
        *g += scale * p;
    }
}

/// Sum of squared residuals and its raw gradient for a category whose
/// residual consumes the derivative bundle (interior PDE or boundary
/// condition points).
fn bundle_pass<const N: usize>(
    problem: &LossProblem<F>,
    params: &NetworkParams<F>,
    colloc: &CollocationSet<F>,
    kind: PdeKind,
    order: &[usize],
) -> Result<(F, Vec<F>), LossError> {
    let nt = params.theta.len();
    let nm = params.mu.len();
    let flat_len = nt + nm;
    if order.is_empty() {
        return Ok((0.0, vec![0.0; flat_len]));
    }

    let partials: Result<Vec<(F, Vec<F>)>, LossError> = order
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut eval = DualEval::<F, N>::new(&params.spec);
            let tape: Tape<F> = Tape::new();
            let mut grad = vec![0.0; flat_len];
            let mut sum = 0.0;
            for &i in chunk {
                let (pos, t) = match kind {
                    PdeKind::Interior => {
                        let p = &colloc.interior[i];
                        (p.pos, p.t)
                    }
                    PdeKind::Boundary => {
                        let p = &colloc.boundary[i];
                        (p.pos, p.t)
                    }
                };
                let (input, dim) = problem.scaling.network_input(pos, t);
                let out = eval.forward(params, &input[..dim]);

                // Re-express the bundle as tape leaves and differentiate
                // only the residual formula.
                tape.clear();
                let dv: Dual2<Var<'_, F>, N> = Dual2 {
                    v: tape.leaf(out.v),
                    g: out.g.map(|x| tape.leaf(x)),
                    h: out.h.map(|x| tape.leaf(x)),
                };
                let bundle = bundle_from_dual(dv);
                let mut over = MuOverrides::none();
                let mut mu_leaves = [None::<Var<'_, F>>; 5];
                for (slot, entry) in params.mu.entries().iter().enumerate() {
                    let leaf = tape.leaf(entry.raw);
                    mu_leaves[slot] = Some(leaf);
                    let physical = Some(leaf.softplus());
                    match entry.name {
                        MuName::Eta => over.eta = physical,
                        MuName::Cp => over.cp = physical,
                        MuName::K => over.k = physical,
                        MuName::H => over.h = physical,
                        MuName::Epsilon => over.epsilon = physical,
                    }
                }
                let r = match kind {
                    PdeKind::Interior => {
                        problem.interior_residual(&colloc.interior[i], &bundle, &over)?
                    }
                    PdeKind::Boundary => {
                        problem.boundary_residual(&colloc.boundary[i], &bundle, &over)?
                    }
                };
                let rv = r.value();
                let sq = rv * rv;
                if !sq.is_finite() {
                    return Err(LossError::NonFinite {
                        category: kind.name(),
                        index: i,
                        x: pos[0],
                        y: pos[1],
                        z: pos[2],
                        t,
                    });
                }
                sum += sq;

                // d(r²)/dθ = 2r·(∂r/∂bundle)·(∂bundle/∂θ): the tape supplies
                // the bundle adjoints, the fused pass pulls them back.
                let adjoints = tape.gradient(r);
                let factor = 2.0 * rv;
                let mut bar = Dual2::<F, N>::constant(0.0);
                bar.v = factor * adjoints.wrt(dv.v);
                for k in 0..N {
                    bar.g[k] = factor * adjoints.wrt(dv.g[k]);
                    bar.h[k] = factor * adjoints.wrt(dv.h[k]);
                }
                eval.backward(params, bar, &mut grad[..nt]);
                for (slot, leaf) in mu_leaves.iter().enumerate().take(nm) {
                    if let Some(leaf) = leaf {
                        grad[nt + slot] += factor * adjoints.wrt(*leaf);
                    }
                }
            }
            Ok((sum, grad))
        })
        .collect();

    fold_partials(partials?, flat_len)
}

/// Sum of (weighted) squared residuals and its raw gradient for a category
/// whose residual is a plain output mismatch (initial or data points). No
/// input derivatives and no μ dependence, so no tape is needed.
fn value_pass(
    problem: &LossProblem<F>,
    params: &NetworkParams<F>,
    colloc: &CollocationSet<F>,
    kind: FitKind,
    order: &[usize],
) -> Result<(F, Vec<F>), LossError> {
    let nt = params.theta.len();
    let flat_len = nt + params.mu.len();
    if order.is_empty() {
        return Ok((0.0, vec![0.0; flat_len]));
    }

    let partials: Result<Vec<(F, Vec<F>)>, LossError> = order
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut eval = DualEval::<F, 0>::new(&params.spec);
            let mut grad = vec![0.0; flat_len];
            let mut sum = 0.0;
            for &i in chunk {
                let (pos, t, weight) = match kind {
                    FitKind::Initial => {
                        let p = &colloc.initial[i];
                        (p.pos, 0.0, 1.0)
                    }
                    FitKind::Data => {
                        let p = &colloc.data[i];
                        (p.pos, p.t, p.weight)
                    }
                };
                let (input, dim) = problem.scaling.network_input(pos, t);
                let out = eval.forward(params, &input[..dim]);
                let r = match kind {
                    FitKind::Initial => problem.initial_residual(&colloc.initial[i], out.v),
                    FitKind::Data => problem.data_residual(&colloc.data[i], out.v),
                };
                let sq = weight * r * r;
                if !sq.is_finite() {
                    return Err(LossError::NonFinite {
                        category: kind.name(),
                        index: i,
                        x: pos[0],
                        y: pos[1],
                        z: pos[2],
                        t,
                    });
                }
                sum += sq;
                // d(w·r²)/dθ = 2wr·∂û/∂θ, since r = û − const.
                let bar = Dual2::<F, 0>::constant(2.0 * weight * r);
                eval.backward(params, bar, &mut grad[..nt]);
            }
            Ok((sum, grad))
        })
        .collect();

    fold_partials(partials?, flat_len)
}

/// Combine chunk partials in chunk order (fixed summation tree).
fn fold_partials(partials: Vec<(F, Vec<F>)>, flat_len: usize) -> Result<(F, Vec<F>), LossError> {
    let mut sum = 0.0;
    let mut grad = vec![0.0; flat_len];
    for (s, g) in partials {
        sum += s;
        for (acc, part) in grad.iter_mut().zip(&g) {
            *acc += part;
        }
    }
    Ok((sum, grad))
}
