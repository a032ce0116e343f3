//! Loss assembly: the four mean-squared residual terms (boundary, initial,
//! interior PDE, labelled data), each nondimensionalized, combined by
//! configurable weights.
//!
//! Residual construction is generic over [`Value`], so the exact same
//! per-point code serves plain evaluation here and gradient computation in
//! the trainer. Sums run over canonically sorted points in fixed-size
//! chunks folded in order, so results are bit-identical regardless of input
//! permutation or worker count.

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{eval_with_input_derivs, AdError, DerivativeBundle};
use crate::network::{MuName, MuSet, NetError, NetworkParams};
use crate::physics::{
    boundary_residual, flux_reference, laser_center, pde_residual_3d, pde_residual_rod,
    pde_residual_thinwall, volumetric_reference, BcKind, BoundaryCtx, DomainSpec, Geometry,
    LaserSpec, MuOverrides, PhysicalParams, PhysicsError, RodSource,
};
use crate::sampling::{
    BoundaryPoint, CollocationSet, DataPoint, InitialPoint, InteriorPoint, SampleCounts,
};
use crate::scalar::{Real, Value};
use crate::scaling::{ScaleError, ScalingSpec};

/// Points per summation chunk. Chunk boundaries depend only on this
/// constant, so the ordered fold gives the same bits for any worker count.
const CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Network(#[from] NetError),
    #[error("network has {net} inputs but the domain needs {domain}")]
    InputDimMismatch { net: usize, domain: usize },
    #[error(
        "non-finite {category} residual at point ({x}, {y}, {z}) m, t = {t} s (index {index})"
    )]
    NonFinite { category: &'static str, index: usize, x: f64, y: f64, z: f64, t: f64 },
}

/// Weights of the four terms. Defaults are all 1.0 — the per-term
/// nondimensionalization, not the weights, carries the burden of balancing
/// magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T = crate::F> {
    pub boundary: T,
    pub initial: T,
    pub residual: T,
    pub data: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights { boundary: T::one(), initial: T::one(), residual: T::one(), data: T::one() }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            ("boundary", self.boundary),
            ("initial", self.initial),
            ("residual", self.residual),
            ("data", self.data),
        ];
        for (name, w) in all {
            if !(w >= T::zero()) || !w.is_finite() {
                return Err(LossError::BadWeights(format!(
                    "{name} weight must be finite and ≥ 0, got {w}"
                )));
            }
        }
        if all.iter().all(|(_, w)| *w == T::zero()) {
            return Err(LossError::BadWeights("at least one weight must be positive".into()));
        }
        Ok(())
    }
}

/// The four mean-squared terms, their weighted total, and the point counts
/// they were averaged over. `total` is exactly
/// `w_b·boundary + w_i·initial + w_r·residual + w_d·data`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T = crate::F> {
    pub boundary: T,
    pub initial: T,
    pub residual: T,
    pub data: T,
    pub total: T,
    pub counts: SampleCounts,
}

impl<T: Real> LossBreakdown<T> {
    /// Combine per-term means into the weighted total (the single place the
    /// decomposition identity is computed).
    pub fn compose(
        boundary: T,
        initial: T,
        residual: T,
        data: T,
        weights: &LossWeights<T>,
        counts: SampleCounts,
    ) -> Self {
        let total = weights.boundary * boundary
            + weights.initial * initial
            + weights.residual * residual
            + weights.data * data;
        LossBreakdown { boundary, initial, residual, data, total, counts }
    }
}

/// μ overrides from a parameter set's physical values (plain-scalar path).
pub fn mu_overrides_real<T: Real>(mu: &MuSet<T>) -> MuOverrides<T> {
    let mut over = MuOverrides::none();
    for entry in mu.entries() {
        let v = Some(entry.physical());
        match entry.name {
            MuName::Eta => over.eta = v,
            MuName::Cp => over.cp = v,
            MuName::K => over.k = v,
            MuName::H => over.h = v,
            MuName::Epsilon => over.epsilon = v,
        }
    }
    over
}

/// Everything fixed about one training problem: domain, process, scaling,
/// weights, and the normalization references. The references are frozen from
/// the *configured* parameters at construction so they cannot drift as
/// trainable μ values move.
#[derive(Debug, Clone)]
pub struct LossProblem<T = crate::F> {
    pub domain: DomainSpec<T>,
    pub laser: LaserSpec<T>,
    pub phys: PhysicalParams<T>,
    pub scaling: ScalingSpec<T>,
    pub weights: LossWeights<T>,
    /// Boundary-flux normalization, W/m².
    pub q_ref: T,
    /// Interior-residual normalization, W/m³.
    pub r_ref: T,
}

impl<T: Real> LossProblem<T> {
    pub fn new(
        domain: DomainSpec<T>,
        laser: LaserSpec<T>,
        phys: PhysicalParams<T>,
        dt_ref: T,
        weights: LossWeights<T>,
    ) -> Result<Self, LossError> {
        domain.validate()?;
        laser.validate()?;
        phys.validate(dt_ref)?;
        weights.validate()?;
        let scaling = domain.scaling(phys.t0, dt_ref)?;
        let q_ref = flux_reference(&phys, &laser, dt_ref);
        let r_ref = volumetric_reference(&phys, dt_ref, domain.t_end);
        Ok(LossProblem { domain, laser, phys, scaling, weights, q_ref, r_ref })
    }

    pub(crate) fn check_net(&self, params: &NetworkParams<T>) -> Result<(), LossError> {
        if params.spec.input_dim != self.scaling.input_dim() {
            return Err(LossError::InputDimMismatch {
                net: params.spec.input_dim,
                domain: self.scaling.input_dim(),
            });
        }
        Ok(())
    }

    /// Nondimensional PDE residual at one interior point, from the network's
    /// scaled-space derivative bundle.
    pub fn interior_residual<V: Value<R = T>>(
        &self,
        point: &InteriorPoint<T>,
        bundle: &DerivativeBundle<V>,
        mu: &MuOverrides<V>,
    ) -> Result<V, LossError> {
        let d = self.scaling.physical_derivs(bundle);
        let props = self.phys.props_at(d.temp, mu);
        let raw = match self.domain.geometry {
            Geometry::Box3 { .. } => pde_residual_3d(self.phys.rho, &props, &d),
            Geometry::ThinWall { thickness, .. } => {
                pde_residual_thinwall(self.phys.rho, thickness, self.phys.t0, &props, &d)
            }
            Geometry::Rod { source_depth, .. } => {
                let state = laser_center(point.t, &self.laser, self.domain.t_end)?;
                let src = RodSource {
                    active: state.active,
                    dist2: self.domain.geometry.laser_dist2(point.pos, state.pos),
                    power: self.laser.power,
                    beam_radius: self.laser.beam_radius,
                    depth: source_depth,
                };
                pde_residual_rod(self.phys.rho, &props, &src, &d)
            }
        };
        Ok(raw * raw.lift(T::one() / self.r_ref))
    }

    /// Nondimensional boundary residual at one boundary point: flux pieces
    /// divided by q_ref, Dirichlet pieces by ΔT_ref.
    pub fn boundary_residual<V: Value<R = T>>(
        &self,
        point: &BoundaryPoint<T>,
        bundle: &DerivativeBundle<V>,
        mu: &MuOverrides<V>,
    ) -> Result<V, LossError> {
        let geometry = &self.domain.geometry;
        let kind = geometry.bc_kind(point.surface)?;
        let state = laser_center(point.t, &self.laser, self.domain.t_end)?;
        let ctx = BoundaryCtx {
            kind,
            normal: point.normal,
            laser_active: state.active,
            laser_dist2: geometry.laser_dist2(point.pos, state.pos),
            power: self.laser.power,
            beam_radius: self.laser.beam_radius,
            h_c: geometry.substrate_film_coefficient(),
            t0: self.phys.t0,
        };
        let d = self.scaling.physical_derivs(bundle);
        let props = self.phys.props_at(d.temp, mu);
        let raw = boundary_residual(&ctx, &props, &d);
        let scale = match kind {
            BcKind::Dirichlet => self.scaling.dt_ref(),
            BcKind::Flux { .. } | BcKind::RobinBottom => self.q_ref,
        };
        Ok(raw * raw.lift(T::one() / scale))
    }

    /// Initial-condition residual in normalized-temperature units:
    /// û(x, 0) − u_target.
    pub fn initial_residual<V: Value<R = T>>(&self, point: &InitialPoint<T>, output: V) -> V {
        output - output.lift(self.scaling.scale_temperature(point.target))
    }

    /// Data residual in normalized-temperature units (unweighted; the
    /// point's weight multiplies the *squared* residual in the mean).
    pub fn data_residual<V: Value<R = T>>(&self, point: &DataPoint<T>, output: V) -> V {
        output - output.lift(self.scaling.scale_temperature(point.temp))
    }
}

pub(crate) fn key_of<T: Real>(pos: [T; 3], t: T) -> [f64; 4] {
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    [f(t), f(pos[0]), f(pos[1]), f(pos[2])]
}

pub(crate) fn sorted_indices(keys: Vec<[f64; 4]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// Mean of per-point squared residuals over canonically sorted points:
/// chunked, evaluated (possibly in parallel), folded in chunk order. Empty
/// input contributes 0.
fn ordered_mean_sq<T, G>(
    category: &'static str,
    n: usize,
    order: &[usize],
    eval: G,
) -> Result<T, LossError>
where
    T: Real + Send + Sync,
    G: Fn(usize) -> Result<(T, T, [f64; 4]), LossError> + Sync,
{
    if n == 0 {
        return Ok(T::zero());
    }
    let partials: Result<Vec<T>, LossError> = order
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut s = T::zero();
            for &i in chunk {
                let (r, w, key) = eval(i)?;
                let sq = w * r * r;
                if !sq.is_finite() {
                    return Err(LossError::NonFinite {
                        category,
                        index: i,
                        x: key[1],
                        y: key[2],
                        z: key[3],
                        t: key[0],
                    });
                }
                s += sq;
            }
            Ok(s)
        })
        .collect();
    let sum = partials?.into_iter().fold(T::zero(), |a, b| a + b);
    Ok(sum / T::of(n as f64))
}

impl<T: Real + Send + Sync> LossProblem<T> {
    /// Evaluate the full loss of a parameter set over a collocation set.
    /// Bit-identical for any point order and worker count.
    pub fn assemble(
        &self,
        params: &NetworkParams<T>,
        colloc: &CollocationSet<T>,
    ) -> Result<LossBreakdown<T>, LossError> {
        self.check_net(params)?;
        let mu = mu_overrides_real(&params.mu);
        let dim = self.scaling.input_dim();

        let keys: Vec<[f64; 4]> =
            colloc.interior.iter().map(|p| key_of(p.pos, p.t)).collect();
        let order = sorted_indices(keys);
        let l_r = ordered_mean_sq("interior", colloc.interior.len(), &order, |i| {
            let p = &colloc.interior[i];
            let (input, _) = self.scaling.network_input(p.pos, p.t);
            let bundle = eval_with_input_derivs(params, &input[..dim])?;
            let r = self.interior_residual(p, &bundle, &mu)?;
            Ok((r, T::one(), key_of(p.pos, p.t)))
        })?;

        let keys: Vec<[f64; 4]> =
            colloc.boundary.iter().map(|p| key_of(p.pos, p.t)).collect();
        let order = sorted_indices(keys);
        let l_b = ordered_mean_sq("boundary", colloc.boundary.len(), &order, |i| {
            let p = &colloc.boundary[i];
            let (input, _) = self.scaling.network_input(p.pos, p.t);
            let bundle = eval_with_input_derivs(params, &input[..dim])?;
            let r = self.boundary_residual(p, &bundle, &mu)?;
            Ok((r, T::one(), key_of(p.pos, p.t)))
        })?;

        let keys: Vec<[f64; 4]> =
            colloc.initial.iter().map(|p| key_of(p.pos, T::zero())).collect();
        let order = sorted_indices(keys);
        let l_i = ordered_mean_sq("initial", colloc.initial.len(), &order, |i| {
            let p = &colloc.initial[i];
            let (input, _) = self.scaling.network_input(p.pos, T::zero());
            let u = params.forward(&input[..dim])?;
            Ok((self.initial_residual(p, u), T::one(), key_of(p.pos, T::zero())))
        })?;

        let keys: Vec<[f64; 4]> = colloc.data.iter().map(|p| key_of(p.pos, p.t)).collect();
        let order = sorted_indices(keys);
        let l_d = ordered_mean_sq("data", colloc.data.len(), &order, |i| {
            let p = &colloc.data[i];
            let (input, _) = self.scaling.network_input(p.pos, p.t);
            let u = params.forward(&input[..dim])?;
            Ok((self.data_residual(p, u), p.weight, key_of(p.pos, p.t)))
        })?;

        Ok(LossBreakdown::compose(l_b, l_i, l_r, l_d, &self.weights, colloc.counts()))
    }

    /// Field-accuracy metrics against labelled points: normalized MSE
    /// (mean of ((T̂−T)/ΔT_ref)²) and RMSE in kelvin.
    pub fn field_metrics(
        &self,
        params: &NetworkParams<T>,
        points: &[DataPoint<T>],
    ) -> Result<(T, T), LossError> {
        self.check_net(params)?;
        let dim = self.scaling.input_dim();
        if points.is_empty() {
            return Ok((T::zero(), T::zero()));
        }
        let keys: Vec<[f64; 4]> = points.iter().map(|p| key_of(p.pos, p.t)).collect();
        let order = sorted_indices(keys);
        let nmse = ordered_mean_sq("validation", points.len(), &order, |i| {
            let p = &points[i];
            let (input, _) = self.scaling.network_input(p.pos, p.t);
            let u = params.forward(&input[..dim])?;
            Ok((u - self.scaling.scale_temperature(p.temp), T::one(), key_of(p.pos, p.t)))
        })?;
        let rmse = (nmse * self.scaling.dt_ref() * self.scaling.dt_ref()).sqrt();
        Ok((nmse, rmse))
    }
}
