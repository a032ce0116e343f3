//! Governing equations of moving-laser heat conduction: material/process
//! parameters, laser kinematics, domain geometry, and the PDE/boundary
//! residual kernels the loss is built from.
//!
//! All quantities are strict SI (m, s, kg, K, W). Residual kernels are
//! generic over [`Value`], so one definition serves plain evaluation, the
//! finite-difference reference solver, and tape-backed training where
//! material parameters may themselves be trainable.
//!
//! Sign conventions: boundary fluxes are positive *out of* the body, so the
//! laser term is negative (energy in) while convection and radiation are
//! positive above ambient. Flux boundaries satisfy (−k∇T)·n = q_total, and
//! residuals are formed as the left side minus the right.

use num_traits::One;
use thiserror::Error;

use crate::scalar::{Real, Value};
use crate::scaling::{PhysicalDerivs, ScaleError, ScalingSpec};

/// Stefan–Boltzmann constant, W/(m²·K⁴).
pub const SIGMA_SB: crate::F = 5.670374419e-8;

fn sigma_sb<T: Real>() -> T {
    T::of(SIGMA_SB)
}

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("invalid physical parameters: {0}")]
    BadParams(String),
    #[error("invalid laser spec: {0}")]
    BadLaser(String),
    #[error("invalid domain: {0}")]
    BadDomain(String),
    #[error("time {t} s outside the configured horizon [0, {t_end}] s")]
    TimeOutOfRange { t: f64, t_end: f64 },
    #[error("surface {surface:?} does not exist on this domain geometry")]
    UnknownSurface { surface: SurfaceId },
}

/// A scalar material property, either constant or affine in temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PropertyModel<T = crate::F> {
    Constant(T),
    /// `value(T) = slope·T + intercept` with `T` in kelvin.
    Affine { slope: T, intercept: T },
}

impl<T: Real> PropertyModel<T> {
    pub fn eval_real(&self, temp: T) -> T {
        match *self {
            PropertyModel::Constant(c) => c,
            PropertyModel::Affine { slope, intercept } => slope * temp + intercept,
        }
    }

    /// Evaluate at a (possibly tape-backed) local temperature.
    pub fn eval<V: Value<R = T>>(&self, temp: V) -> V {
        match *self {
            PropertyModel::Constant(c) => temp.lift(c),
            PropertyModel::Affine { slope, intercept } => {
                temp * temp.lift(slope) + temp.lift(intercept)
            }
        }
    }

    /// Minimum over `[lo, hi]` (affine models are monotone, so endpoints
    /// suffice). Used to verify positivity over the operating range.
    pub fn min_over(&self, lo: T, hi: T) -> T {
        self.eval_real(lo).min(self.eval_real(hi))
    }
}

/// Material and process constants. `cp`/`k` may be temperature-dependent;
/// in inverse runs, trainable μ values override individual entries at
/// evaluation time (see [`PhysicalParams::props_at`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams<T = crate::F> {
    /// Density, kg/m³.
    pub rho: T,
    /// Specific heat capacity, J/(kg·K).
    pub cp: PropertyModel<T>,
    /// Thermal conductivity, W/(m·K).
    pub k: PropertyModel<T>,
    /// Convection coefficient, W/(m²·K). Zero means no convective exchange
    /// (used by insulated verification problems).
    pub h: T,
    /// Surface emissivity ε ∈ [0, 1].
    pub emissivity: T,
    /// Laser absorptivity η ∈ [0, 1].
    pub absorptivity: T,
    /// Ambient temperature, K.
    pub t0: T,
}

impl<T: Real> PhysicalParams<T> {
    /// Validate ranges; `temp_span` is the modeled range above ambient
    /// (ΔT_ref), over which cp and k must stay positive.
    pub fn validate(&self, temp_span: T) -> Result<(), PhysicsError> {
        let fail = |m: String| Err(PhysicsError::BadParams(m));
        if !(self.rho > T::zero()) || !self.rho.is_finite() {
            return fail(format!("density must be positive, got {}", self.rho));
        }
        if !(self.h >= T::zero()) || !self.h.is_finite() {
            return fail(format!("convection coefficient must be ≥ 0, got {}", self.h));
        }
        for (name, v) in [("emissivity", self.emissivity), ("absorptivity", self.absorptivity)] {
            if !(v >= T::zero() && v <= T::one()) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.t0 > T::zero()) || !self.t0.is_finite() {
            return fail(format!("ambient temperature must be positive kelvin, got {}", self.t0));
        }
        let hi = self.t0 + temp_span;
        for (name, model) in [("cp", &self.cp), ("k", &self.k)] {
            let min = model.min_over(self.t0, hi);
            if !(min > T::zero()) {
                return fail(format!(
                    "{name} must be positive over [{}, {hi}] K; minimum is {min}",
                    self.t0
                ));
            }
        }
        Ok(())
    }

    /// Effective properties at a local temperature, with trainable overrides
    /// taking precedence over the configured models. Overrides are
    /// temperature-independent (the identified parameter is a constant).
    pub fn props_at<V: Value<R = T>>(&self, temp: V, mu: &MuOverrides<V>) -> PropsView<V> {
        PropsView {
            cp: mu.cp.unwrap_or_else(|| self.cp.eval(temp)),
            k: mu.k.unwrap_or_else(|| self.k.eval(temp)),
            h: mu.h.unwrap_or_else(|| temp.lift(self.h)),
            eps: mu.epsilon.unwrap_or_else(|| temp.lift(self.emissivity)),
            eta: mu.eta.unwrap_or_else(|| temp.lift(self.absorptivity)),
        }
    }
}

/// Optional per-parameter overrides sourced from the μ vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct MuOverrides<V> {
    pub eta: Option<V>,
    pub cp: Option<V>,
    pub k: Option<V>,
    pub h: Option<V>,
    pub epsilon: Option<V>,
}

impl<V> MuOverrides<V> {
    pub fn none() -> Self {
        MuOverrides { eta: None, cp: None, k: None, h: None, epsilon: None }
    }
}

/// Material coefficients resolved at one evaluation point.
#[derive(Debug, Clone, Copy)]
pub struct PropsView<V> {
    pub cp: V,
    pub k: V,
    pub h: V,
    pub eps: V,
    pub eta: V,
}

/// One straight toolpath move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment<T = crate::F> {
    pub from: [T; 3],
    pub to: [T; 3],
    /// Traverse speed, m/s.
    pub speed: T,
    /// Whether the laser fires during this move.
    pub power_on: bool,
}

impl<T: Real> Segment<T> {
    fn length(&self) -> T {
        let mut s = T::zero();
        for i in 0..3 {
            let d = self.to[i] - self.from[i];
            s += d * d;
        }
        s.sqrt()
    }

    fn duration(&self) -> T {
        self.length() / self.speed
    }
}

/// Laser power, beam, and toolpath. A dwell (laser off, position held) is
/// inserted between consecutive segments.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserSpec<T = crate::F> {
    /// Laser power, W.
    pub power: T,
    /// Beam radius (1/e² definition), m.
    pub beam_radius: T,
    pub segments: Vec<Segment<T>>,
    /// Pause between segments, s.
    pub dwell: T,
}

impl<T: Real> LaserSpec<T> {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let fail = |m: String| Err(PhysicsError::BadLaser(m));
        if !(self.power >= T::zero()) || !self.power.is_finite() {
            return fail(format!("power must be ≥ 0, got {}", self.power));
        }
        if !(self.beam_radius > T::zero()) || !self.beam_radius.is_finite() {
            return fail(format!("beam radius must be positive, got {}", self.beam_radius));
        }
        if !(self.dwell >= T::zero()) {
            return fail(format!("dwell must be ≥ 0, got {}", self.dwell));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if !(seg.speed > T::zero()) || !seg.speed.is_finite() {
                return fail(format!("segment {i}: speed must be positive, got {}", seg.speed));
            }
            if !(seg.length() > T::zero()) {
                return fail(format!("segment {i}: start and end coincide"));
            }
        }
        Ok(())
    }

    /// Peak magnitude of the beam's surface flux, 2P/(πr²) (before
    /// absorptivity), W/m².
    pub fn peak_flux(&self) -> T {
        let two = T::of(2.0);
        let pi = T::of(std::f64::consts::PI);
        two * self.power / (pi * self.beam_radius * self.beam_radius)
    }
}

/// Beam center position and firing state at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaserState<T = crate::F> {
    pub pos: [T; 3],
    pub active: bool,
}

/// Position of the laser at time `t`: linear interpolation along the active
/// segment, inactive during dwells and after the path ends (position holds at
/// the segment endpoint). `t` must lie in `[0, t_end]`.
pub fn laser_center<T: Real>(
    t: T,
    laser: &LaserSpec<T>,
    t_end: T,
) -> Result<LaserState<T>, PhysicsError> {
    if !(t >= T::zero() && t <= t_end) {
        return Err(PhysicsError::TimeOutOfRange {
            t: t.to_f64().unwrap_or(f64::NAN),
            t_end: t_end.to_f64().unwrap_or(f64::NAN),
        });
    }
    let powered = laser.power > T::zero();
    let mut cursor = T::zero();
    for (i, seg) in laser.segments.iter().enumerate() {
        let dur = seg.duration();
        if t <= cursor + dur {
            let s = (t - cursor) / dur;
            let mut pos = [T::zero(); 3];
            for a in 0..3 {
                pos[a] = seg.from[a] + s * (seg.to[a] - seg.from[a]);
            }
            return Ok(LaserState { pos, active: powered && seg.power_on });
        }
        cursor += dur;
        if i + 1 < laser.segments.len() {
            if t < cursor + laser.dwell {
                return Ok(LaserState { pos: seg.to, active: false });
            }
            cursor += laser.dwell;
        }
    }
    let pos = laser.segments.last().map(|s| s.to).unwrap_or([T::zero(); 3]);
    Ok(LaserState { pos, active: false })
}

/// How the thin wall's top edge enters the loss: constrained by measured
/// data only (the hybrid default) or by the laser-flux boundary condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopEdge {
    DataOnly,
    Flux,
}

/// Domain geometry. The box is the full 3D conduction problem; the thin wall
/// collapses through-thickness conduction into volumetric sink terms; the rod
/// is the 1D verification analog with a volumetric Gaussian source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry<T = crate::F> {
    /// `[0,lx]×[0,ly]×[0,lz]`, laser on the top face `z = lz`, base `z = 0`
    /// held at ambient.
    Box3 { lx: T, ly: T, lz: T },
    /// `[0,length]×[0,height]` wall of the given thickness; bottom edge
    /// couples to the substrate through an effective film coefficient
    /// `h_c = k_sub/substrate_height`.
    ThinWall {
        length: T,
        height: T,
        thickness: T,
        k_sub: T,
        substrate_height: T,
        top_edge: TopEdge,
    },
    /// `[0,length]`, both ends held at ambient, heated by a volumetric
    /// Gaussian source spread over `source_depth`.
    Rod { length: T, source_depth: T },
}

/// Geometry plus the simulated time horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec<T = crate::F> {
    pub geometry: Geometry<T>,
    /// Simulated interval `[0, t_end]`, s.
    pub t_end: T,
}

/// Identifier for a boundary piece. `Top`/`Bottom` are along the geometry's
/// vertical axis (z for the box, y for the wall); the wall and rod use the
/// subset that exists on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SurfaceId {
    Top,
    Bottom,
    XMin,
    XMax,
    YMin,
    YMax,
}

impl SurfaceId {
    pub fn as_str(self) -> &'static str {
        match self {
            SurfaceId::Top => "top",
            SurfaceId::Bottom => "bottom",
            SurfaceId::XMin => "xmin",
            SurfaceId::XMax => "xmax",
            SurfaceId::YMin => "ymin",
            SurfaceId::YMax => "ymax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "top" => SurfaceId::Top,
            "bottom" => SurfaceId::Bottom,
            "xmin" => SurfaceId::XMin,
            "xmax" => SurfaceId::XMax,
            "ymin" => SurfaceId::YMin,
            "ymax" => SurfaceId::YMax,
            _ => return None,
        })
    }
}

/// The kind of condition imposed on a boundary piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcKind {
    /// Temperature pinned to ambient; residual in kelvin.
    Dirichlet,
    /// Flux balance (−k∇T)·n = q_conv + q_rad (+ q_laser on the lasered
    /// surface); residual in W/m².
    Flux { lasered: bool },
    /// The wall-bottom substrate coupling k·∂T/∂y = h_c(T − T0); residual in
    /// W/m².
    RobinBottom,
}

impl<T: Real> Geometry<T> {
    /// Number of varying spatial axes.
    pub fn sdim(&self) -> usize {
        match self {
            Geometry::Box3 { .. } => 3,
            Geometry::ThinWall { .. } => 2,
            Geometry::Rod { .. } => 1,
        }
    }

    /// Network input count for this geometry (spatial + time; the wall keeps
    /// the 4-input convention with ẑ pinned to 0).
    pub fn input_dim(&self) -> usize {
        match self {
            Geometry::Box3 { .. } | Geometry::ThinWall { .. } => 4,
            Geometry::Rod { .. } => 2,
        }
    }

    /// Extents of the varying axes.
    pub fn lengths(&self) -> Vec<T> {
        match *self {
            Geometry::Box3 { lx, ly, lz } => vec![lx, ly, lz],
            Geometry::ThinWall { length, height, .. } => vec![length, height],
            Geometry::Rod { length, .. } => vec![length],
        }
    }

    /// The boundary pieces this geometry has.
    pub fn surfaces(&self) -> &'static [SurfaceId] {
        match self {
            Geometry::Box3 { .. } => &[
                SurfaceId::Top,
                SurfaceId::Bottom,
                SurfaceId::XMin,
                SurfaceId::XMax,
                SurfaceId::YMin,
                SurfaceId::YMax,
            ],
            Geometry::ThinWall { .. } => {
                &[SurfaceId::Top, SurfaceId::Bottom, SurfaceId::XMin, SurfaceId::XMax]
            }
            Geometry::Rod { .. } => &[SurfaceId::XMin, SurfaceId::XMax],
        }
    }

    /// Boundary-condition routing per surface.
    pub fn bc_kind(&self, surface: SurfaceId) -> Result<BcKind, PhysicsError> {
        let unknown = Err(PhysicsError::UnknownSurface { surface });
        match self {
            Geometry::Box3 { .. } => Ok(match surface {
                SurfaceId::Bottom => BcKind::Dirichlet,
                SurfaceId::Top => BcKind::Flux { lasered: true },
                _ => BcKind::Flux { lasered: false },
            }),
            Geometry::ThinWall { .. } => match surface {
                SurfaceId::Bottom => Ok(BcKind::RobinBottom),
                SurfaceId::Top => Ok(BcKind::Flux { lasered: true }),
                SurfaceId::XMin | SurfaceId::XMax => Ok(BcKind::Flux { lasered: false }),
                _ => unknown,
            },
            Geometry::Rod { .. } => match surface {
                SurfaceId::XMin | SurfaceId::XMax => Ok(BcKind::Dirichlet),
                _ => unknown,
            },
        }
    }

    /// Outward unit normal of a surface.
    pub fn outward_normal(&self, surface: SurfaceId) -> Result<[T; 3], PhysicsError> {
        // Valid combination check first.
        self.bc_kind(surface)?;
        let one = T::one();
        Ok(match (self, surface) {
            (Geometry::ThinWall { .. }, SurfaceId::Top) => [T::zero(), one, T::zero()],
            (Geometry::ThinWall { .. }, SurfaceId::Bottom) => [T::zero(), -one, T::zero()],
            (_, SurfaceId::Top) => [T::zero(), T::zero(), one],
            (_, SurfaceId::Bottom) => [T::zero(), T::zero(), -one],
            (_, SurfaceId::XMin) => [-one, T::zero(), T::zero()],
            (_, SurfaceId::XMax) => [one, T::zero(), T::zero()],
            (_, SurfaceId::YMin) => [T::zero(), -one, T::zero()],
            (_, SurfaceId::YMax) => [T::zero(), one, T::zero()],
        })
    }

    /// Substrate film coefficient h_c = k_sub/substrate_height (wall only).
    pub fn substrate_film_coefficient(&self) -> T {
        match *self {
            Geometry::ThinWall { k_sub, substrate_height, .. } => k_sub / substrate_height,
            _ => T::zero(),
        }
    }

    /// Whether a point lies inside or on the domain, within `tol` meters.
    pub fn contains(&self, pos: [T; 3], tol: T) -> bool {
        let inside = |x: T, l: T| x >= -tol && x <= l + tol;
        match *self {
            Geometry::Box3 { lx, ly, lz } => {
                inside(pos[0], lx) && inside(pos[1], ly) && inside(pos[2], lz)
            }
            Geometry::ThinWall { length, height, .. } => {
                inside(pos[0], length) && inside(pos[1], height)
            }
            Geometry::Rod { length, .. } => inside(pos[0], length),
        }
    }

    /// Squared in-surface distance from a point to the beam center, for the
    /// lasered (top) surface: the box top is a plane (x, y distance), the
    /// wall top edge and the rod are lines (x distance).
    pub fn laser_dist2(&self, pos: [T; 3], center: [T; 3]) -> T {
        let dx = pos[0] - center[0];
        match self {
            Geometry::Box3 { .. } => {
                let dy = pos[1] - center[1];
                dx * dx + dy * dy
            }
            Geometry::ThinWall { .. } | Geometry::Rod { .. } => dx * dx,
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        let fail = |m: String| Err(PhysicsError::BadDomain(m));
        let pos = |name: &str, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(PhysicsError::BadDomain(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            Geometry::Box3 { lx, ly, lz } => {
                pos("lx", lx)?;
                pos("ly", ly)?;
                pos("lz", lz)
            }
            Geometry::ThinWall { length, height, thickness, k_sub, substrate_height, .. } => {
                pos("length", length)?;
                pos("height", height)?;
                pos("thickness", thickness)?;
                pos("k_sub", k_sub)?;
                pos("substrate_height", substrate_height)
            }
            Geometry::Rod { length, source_depth } => {
                pos("length", length)?;
                if !(source_depth > T::zero() && source_depth.is_finite()) {
                    return fail(format!("source_depth must be positive, got {source_depth}"));
                }
                Ok(())
            }
        }
    }
}

impl<T: Real> DomainSpec<T> {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        self.geometry.validate()?;
        if !(self.t_end > T::zero()) || !self.t_end.is_finite() {
            return Err(PhysicsError::BadDomain(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        Ok(())
    }

    /// The scaling spec induced by this domain.
    pub fn scaling(&self, t0: T, dt_ref: T) -> Result<ScalingSpec<T>, ScaleError> {
        ScalingSpec::new(&self.geometry.lengths(), self.t_end, t0, dt_ref, self.geometry.input_dim())
    }
}

/// Gaussian beam surface flux −(2ηP)/(πr²)·exp(−2d²/r²), W/m² (negative:
/// energy enters the body). `dist2` is the squared in-surface distance to
/// the beam center.
pub fn q_laser<V: Value>(eta: V, power: V::R, beam_radius: V::R, dist2: V::R) -> V {
    let two = V::R::of(2.0);
    let pi = V::R::of(std::f64::consts::PI);
    let r2 = beam_radius * beam_radius;
    let coeff = -(two * power / (pi * r2)) * (-(two * dist2 / r2)).exp();
    eta * eta.lift(coeff)
}

/// Convective flux h·(T − T0), W/m².
pub fn q_conv<V: Value>(h: V, temp: V, t0: V::R) -> V {
    h * (temp - temp.lift(t0))
}

/// Radiative flux σε·(T⁴ − T0⁴), W/m².
pub fn q_rad<V: Value>(eps: V, temp: V, t0: V::R) -> V {
    let t04 = t0 * t0 * t0 * t0;
    eps * temp.lift(sigma_sb::<V::R>()) * (temp.powi(4) - temp.lift(t04))
}

/// Interior residual of the 3D heat equation,
/// ρ·cp(T)·∂T/∂t − k(T)·∇²T, W/m³.
pub fn pde_residual_3d<V: Value>(rho: V::R, props: &PropsView<V>, d: &PhysicalDerivs<V>) -> V {
    let lap = d.hess[0] + d.hess[1] + d.hess[2];
    props.cp.lift(rho) * props.cp * d.dtemp_dt - props.k * lap
}

/// Interior residual of the thin-wall (through-thickness-averaged) equation:
/// ρ·cp·∂T/∂t − k·(∂²T/∂x² + ∂²T/∂y²) + (2/w)·[q_conv + q_rad], W/m³.
pub fn pde_residual_thinwall<V: Value>(
    rho: V::R,
    thickness: V::R,
    t0: V::R,
    props: &PropsView<V>,
    d: &PhysicalDerivs<V>,
) -> V {
    let lap = d.hess[0] + d.hess[1];
    let sink_coeff = d.temp.lift(V::R::of(2.0) / thickness);
    let sinks = sink_coeff * (q_conv(props.h, d.temp, t0) + q_rad(props.eps, d.temp, t0));
    props.cp.lift(rho) * props.cp * d.dtemp_dt - props.k * lap + sinks
}

/// The rod's volumetric heating term at one point/time (laser geometry is
/// fixed per collocation point, so entries are plain reals).
#[derive(Debug, Clone, Copy)]
pub struct RodSource<T> {
    pub active: bool,
    /// Squared axial distance to the beam center, m².
    pub dist2: T,
    pub power: T,
    pub beam_radius: T,
    /// Absorption depth the surface flux is spread over, m.
    pub depth: T,
}

/// Interior residual of the 1D rod analog:
/// ρ·cp·∂T/∂t − k·∂²T/∂x² − q_vol, with the volumetric source
/// q_vol = (2ηP)/(πr²·depth)·exp(−2d²/r²), W/m³.
pub fn pde_residual_rod<V: Value>(
    rho: V::R,
    props: &PropsView<V>,
    src: &RodSource<V::R>,
    d: &PhysicalDerivs<V>,
) -> V {
    let mut res = props.cp.lift(rho) * props.cp * d.dtemp_dt - props.k * d.hess[0];
    if src.active {
        let q_vol = -q_laser(props.eta, src.power, src.beam_radius, src.dist2);
        res = res - q_vol * q_vol.lift(V::R::one() / src.depth);
    }
    res
}

/// The wall-bottom substrate coupling, k·∂T/∂y − h_c·(T − T0), W/m².
pub fn bottom_flux_residual<V: Value>(k: V, dtemp_dy: V, temp: V, h_c: V::R, t0: V::R) -> V {
    k * dtemp_dy - temp.lift(h_c) * (temp - temp.lift(t0))
}

/// Per-point boundary context: everything the residual needs that is fixed
/// by geometry and time (not differentiated).
#[derive(Debug, Clone, Copy)]
pub struct BoundaryCtx<T = crate::F> {
    pub kind: BcKind,
    pub normal: [T; 3],
    pub laser_active: bool,
    /// Squared in-surface distance to the beam center (lasered surface only).
    pub laser_dist2: T,
    pub power: T,
    pub beam_radius: T,
    /// Substrate film coefficient (wall bottom only).
    pub h_c: T,
    pub t0: T,
}

/// Boundary residual with surface routing: Dirichlet pieces return `T − T0`
/// in kelvin, flux pieces return `(−k∇T)·n − [q_laser + q_conv + q_rad]` in
/// W/m², and the wall bottom returns the substrate coupling in W/m².
pub fn boundary_residual<V: Value>(
    ctx: &BoundaryCtx<V::R>,
    props: &PropsView<V>,
    d: &PhysicalDerivs<V>,
) -> V {
    let lift = |c: V::R| d.temp.lift(c);
    match ctx.kind {
        BcKind::Dirichlet => d.temp - lift(ctx.t0),
        BcKind::RobinBottom => {
            bottom_flux_residual(props.k, d.grad[1], d.temp, ctx.h_c, ctx.t0)
        }
        BcKind::Flux { lasered } => {
            let grad_n = d.grad[0] * lift(ctx.normal[0])
                + d.grad[1] * lift(ctx.normal[1])
                + d.grad[2] * lift(ctx.normal[2]);
            let conduction = -(props.k * grad_n);
            let mut q = q_conv(props.h, d.temp, ctx.t0) + q_rad(props.eps, d.temp, ctx.t0);
            if lasered && ctx.laser_active {
                q = q + q_laser(props.eta, ctx.power, ctx.beam_radius, ctx.laser_dist2);
            }
            conduction - q
        }
    }
}

/// Reference flux for nondimensionalizing boundary residuals: the nominal
/// beam peak 2ηP/(πr²); if the laser is off, the convective scale h·ΔT_ref;
/// if that is zero too, 1. Frozen from configured (not trainable) values so
/// the normalization cannot absorb an identified parameter.
pub fn flux_reference<T: Real>(phys: &PhysicalParams<T>, laser: &LaserSpec<T>, dt_ref: T) -> T {
    let peak = phys.absorptivity * laser.peak_flux();
    if peak > T::zero() {
        return peak;
    }
    let conv = phys.h * dt_ref;
    if conv > T::zero() {
        return conv;
    }
    T::one()
}

/// Reference volumetric rate for nondimensionalizing interior residuals: the
/// transient-term scale ρ·cp(T0)·ΔT_ref/t_end.
pub fn volumetric_reference<T: Real>(phys: &PhysicalParams<T>, dt_ref: T, t_end: T) -> T {
    phys.rho * phys.cp.eval_real(phys.t0) * dt_ref / t_end
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bare-plate constants: steel-like density 8000 kg/m³, cp 500 J/(kg·K),
    /// k 10 W/(m·K), h 20, ε 0.3, η 0.4, ambient 298 K.
    fn plate_params() -> PhysicalParams<f64> {
        PhysicalParams {
            rho: 8000.0,
            cp: PropertyModel::Constant(500.0),
            k: PropertyModel::Constant(10.0),
            h: 20.0,
            emissivity: 0.3,
            absorptivity: 0.4,
            t0: 298.0,
        }
    }

    /// Thin-wall constants: ρ 8190 kg/m³, affine cp/k (nickel-alloy fits),
    /// h 20, ε 0.2, ambient 298 K.
    fn wall_params() -> PhysicalParams<f64> {
        PhysicalParams {
            rho: 8190.0,
            cp: PropertyModel::Affine { slope: 0.20465, intercept: 380.91 },
            k: PropertyModel::Affine { slope: 0.016702, intercept: 5.5228 },
            h: 20.0,
            emissivity: 0.2,
            absorptivity: 0.4,
            t0: 298.0,
        }
    }

    fn plate_laser() -> LaserSpec<f64> {
        LaserSpec {
            power: 500.0,
            beam_radius: 0.0015,
            segments: vec![Segment {
                from: [0.005, 0.005, 0.006],
                to: [0.035, 0.005, 0.006],
                speed: 0.010,
                power_on: true,
            }],
            dwell: 0.0,
        }
    }

    fn uniform_derivs(temp: f64) -> PhysicalDerivs<f64> {
        PhysicalDerivs { temp, dtemp_dt: 0.0, grad: [0.0; 3], hess: [0.0; 3] }
    }

    fn rel_close(got: f64, want: f64, tol: f64) -> bool {
        (got - want).abs() <= tol * want.abs().max(1e-300)
    }

    #[test]
    fn laser_flux_peak_and_radial_decay() {
        // −2·0.4·500/(π·0.0015²) = −5.6588424210e7 W/m².
        let q0: f64 = q_laser(0.4, 500.0, 0.0015, 0.0);
        assert!(rel_close(q0, -56_588_424.210_451_68, 1e-12), "{q0}");
        // One beam radius out: ×e⁻².
        let qr: f64 = q_laser(0.4, 500.0, 0.0015, 0.0015 * 0.0015);
        assert!(rel_close(qr, -7_658_410.418_435_07, 1e-12), "{qr}");
        assert!(rel_close(qr / q0, (-2.0f64).exp(), 1e-13));
        // No power, no flux.
        assert_eq!(q_laser(0.4, 0.0, 0.0015, 0.0), 0.0);
    }

    #[test]
    fn convection_and_radiation_fluxes() {
        assert_eq!(q_conv(20.0, 298.0, 298.0), 0.0);
        assert_eq!(q_rad(0.3, 298.0, 298.0), 0.0);
        // h=20, T=1000, T0=298 → 20·702.
        assert_eq!(q_conv(20.0, 1000.0, 298.0), 14_040.0);
        // σ·0.3·(1000⁴ − 298⁴).
        let qr: f64 = q_rad(0.3, 1000.0, 298.0);
        assert!(rel_close(qr, 16_876.970_980_250_182, 1e-13), "{qr}");
        // Below ambient, both fluxes change sign (energy in).
        assert!(q_conv(20.0, 200.0, 298.0) < 0.0);
        assert!(q_rad(0.3, 200.0, 298.0) < 0.0);
    }

    #[test]
    fn interior_residual_manufactured_fields() {
        let p = plate_params();
        // Steady uniform state solves the equation.
        let props = p.props_at(298.0, &MuOverrides::none());
        assert_eq!(pde_residual_3d(p.rho, &props, &uniform_derivs(298.0)), 0.0);

        // T = T0 + 100·t (K/s): residual = ρ·cp·100 = 8000·500·100 = 4e8.
        let d = PhysicalDerivs { temp: 400.0, dtemp_dt: 100.0, grad: [0.0; 3], hess: [0.0; 3] };
        let props = p.props_at(d.temp, &MuOverrides::none());
        assert_eq!(pde_residual_3d(p.rho, &props, &d), 4e8);

        // Steady T = T0 + b·x², b = 1000 K/m²: residual = −2bk = −20 000.
        let d = PhysicalDerivs { temp: 350.0, dtemp_dt: 0.0, grad: [104.0, 0.0, 0.0], hess: [2000.0, 0.0, 0.0] };
        let props = p.props_at(d.temp, &MuOverrides::none());
        assert_eq!(pde_residual_3d(p.rho, &props, &d), -20_000.0);
    }

    #[test]
    fn affine_property_models_reproduce_tabulated_values() {
        let p = wall_params();
        // cp(298 K) = 0.20465·298 + 380.91 = 441.8957 J/(kg·K).
        assert!(rel_close(p.cp.eval_real(298.0), 441.8957, 1e-13));
        // k(1000 K) = 0.016702·1000 + 5.5228 = 22.2248 W/(m·K).
        assert!(rel_close(p.k.eval_real(1000.0), 22.2248, 1e-13));
        // Generic evaluation agrees with the real-path evaluation.
        assert_eq!(p.cp.eval(650.0_f64), p.cp.eval_real(650.0));
    }

    #[test]
    fn thinwall_residual_sink_terms() {
        // Uniform steady 1000 K, w = 2.5 mm: residual is the sinks alone,
        // (2·20/0.0025)·702 + (2σ·0.2/0.0025)·(1000⁴−298⁴)
        //   = 11 232 000 + 9 001 051.189466765.
        let p = wall_params();
        let d = uniform_derivs(1000.0);
        let props = p.props_at(d.temp, &MuOverrides::none());
        let got = pde_residual_thinwall(p.rho, 0.0025, p.t0, &props, &d);
        assert!(rel_close(got, 20_233_051.189_466_767, 1e-12), "{got}");

        // Sink terms vanish as the wall thickens.
        let got = pde_residual_thinwall(p.rho, 1e12, p.t0, &props, &d);
        assert!(got.abs() < 1e-4, "{got}");

        assert_eq!(
            pde_residual_thinwall(p.rho, 0.0025, p.t0, &p.props_at(298.0, &MuOverrides::none()), &uniform_derivs(298.0)),
            0.0
        );
    }

    #[test]
    fn rod_residual_volumetric_source() {
        let p = plate_params();
        let props = p.props_at(500.0, &MuOverrides::none());
        let src = RodSource { active: true, dist2: 0.0, power: 500.0, beam_radius: 0.0015, depth: 0.001 };
        // Uniform steady field: residual = −q_vol = −5.6588424210e7/0.001.
        let got = pde_residual_rod(p.rho, &props, &src, &uniform_derivs(500.0));
        assert!(rel_close(got, -56_588_424_210.451_675, 1e-12), "{got}");
        // Source off → plain conduction residual (zero here).
        let src_off = RodSource { active: false, ..src };
        assert_eq!(pde_residual_rod(p.rho, &props, &src_off, &uniform_derivs(500.0)), 0.0);
    }

    #[test]
    fn bottom_coupling_residual() {
        // h_c = 51.9/0.015 = 3460 W/(m²·K).
        let geom = Geometry::ThinWall {
            length: 0.04,
            height: 0.02,
            thickness: 0.0025,
            k_sub: 51.9,
            substrate_height: 0.015,
            top_edge: TopEdge::DataOnly,
        };
        let h_c = geom.substrate_film_coefficient();
        assert!(rel_close(h_c, 3460.0, 1e-14));
        // T = 500 K, ∂T/∂y = 0 → −3460·202 = −698 920 W/m².
        assert_eq!(bottom_flux_residual(10.0, 0.0, 500.0, h_c, 298.0), -698_920.0);
        assert_eq!(bottom_flux_residual(10.0, 0.0, 298.0, h_c, 298.0), 0.0);
    }

    #[test]
    fn boundary_routing_and_signs() {
        let p = plate_params();
        let geom = Geometry::Box3 { lx: 0.04, ly: 0.01, lz: 0.006 };
        let mk_ctx = |surface: SurfaceId, active: bool| BoundaryCtx {
            kind: geom.bc_kind(surface).unwrap(),
            normal: geom.outward_normal(surface).unwrap(),
            laser_active: active,
            laser_dist2: 0.0,
            power: 500.0,
            beam_radius: 0.0015,
            h_c: 0.0,
            t0: p.t0,
        };
        let props = p.props_at(298.0, &MuOverrides::none());
        let eq = uniform_derivs(298.0);

        // Equilibrium, laser off: every flux surface balances.
        for s in [SurfaceId::Top, SurfaceId::XMin, SurfaceId::XMax, SurfaceId::YMin, SurfaceId::YMax] {
            assert_eq!(boundary_residual(&mk_ctx(s, false), &props, &eq), 0.0, "{s:?}");
        }
        // Base at ambient: Dirichlet residual 0.
        assert_eq!(boundary_residual(&mk_ctx(SurfaceId::Bottom, false), &props, &eq), 0.0);
        // Base 10 K hot: residual is in kelvin.
        assert_eq!(
            boundary_residual(&mk_ctx(SurfaceId::Bottom, false), &props, &uniform_derivs(308.0)),
            10.0
        );
        // Beam center with ∇T = 0: residual = −q_laser > 0 (energy flowing in
        // is unbalanced by conduction).
        let got = boundary_residual(&mk_ctx(SurfaceId::Top, true), &props, &eq);
        assert!(rel_close(got, 56_588_424.210_451_68, 1e-12), "{got}");
        // The same beam does not fire on side surfaces.
        assert_eq!(boundary_residual(&mk_ctx(SurfaceId::XMin, true), &props, &eq), 0.0);

        // Conduction term: T uniform but ∂T/∂x ≠ 0 on x-max (outward normal
        // +x): residual = −k·∂T/∂x − q_out.
        let d = PhysicalDerivs { temp: 298.0, dtemp_dt: 0.0, grad: [50.0, 0.0, 0.0], hess: [0.0; 3] };
        let got = boundary_residual(&mk_ctx(SurfaceId::XMax, false), &props, &d);
        assert_eq!(got, -10.0 * 50.0);
        // Opposite face flips the sign with the normal.
        let got = boundary_residual(&mk_ctx(SurfaceId::XMin, false), &props, &d);
        assert_eq!(got, 10.0 * 50.0);
    }

    #[test]
    fn surface_routing_rejects_missing_pieces() {
        let wall = Geometry::ThinWall {
            length: 0.04,
            height: 0.02,
            thickness: 0.0025,
            k_sub: 51.9,
            substrate_height: 0.015,
            top_edge: TopEdge::DataOnly,
        };
        assert!(matches!(
            wall.bc_kind(SurfaceId::YMin),
            Err(PhysicsError::UnknownSurface { surface: SurfaceId::YMin })
        ));
        let rod = Geometry::Rod { length: 0.1, source_depth: 0.001 };
        assert!(rod.bc_kind(SurfaceId::Top).is_err());
        assert!(matches!(rod.bc_kind(SurfaceId::XMin), Ok(BcKind::Dirichlet)));
        assert_eq!(SurfaceId::parse("top"), Some(SurfaceId::Top));
        assert_eq!(SurfaceId::parse("sideways"), None);
    }

    #[test]
    fn laser_kinematics() {
        let laser = plate_laser();
        // t = 0: at the segment start.
        let s = laser_center(0.0, &laser, 3.0).unwrap();
        assert_eq!(s.pos, [0.005, 0.005, 0.006]);
        assert!(s.active);
        // 10 mm/s for 1 s → 10 mm along x.
        let s = laser_center(1.0, &laser, 3.0).unwrap();
        assert!((s.pos[0] - 0.015).abs() < 1e-15);
        assert!(s.active);
        // Path ends at t = 3 s exactly; still on-segment there.
        assert!(laser_center(3.0, &laser, 3.0).unwrap().active);
        // Outside the horizon.
        assert!(matches!(
            laser_center(3.5, &laser, 3.0),
            Err(PhysicsError::TimeOutOfRange { .. })
        ));
        assert!(laser_center(-0.1, &laser, 3.0).is_err());
    }

    #[test]
    fn bidirectional_path_with_dwell() {
        let seg = |from: f64, to: f64| Segment {
            from: [from, 0.0, 0.0],
            to: [to, 0.0, 0.0],
            speed: 0.007,
            power_on: true,
        };
        let laser = LaserSpec {
            power: 500.0,
            beam_radius: 0.00112,
            segments: vec![seg(0.0, 0.021), seg(0.021, 0.0)],
            dwell: 0.5,
        };
        let t_end = 7.0;
        let leg = 0.021 / 0.007; // 3 s per leg
        // Mid-dwell: held at the turnaround, inactive.
        let s = laser_center(leg + 0.25, &laser, t_end).unwrap();
        assert_eq!(s.pos, [0.021, 0.0, 0.0]);
        assert!(!s.active);
        // Second leg runs backward.
        let s = laser_center(leg + 0.5 + 1.0, &laser, t_end).unwrap();
        assert!((s.pos[0] - 0.014).abs() < 1e-15);
        assert!(s.active);
        // After the path: parked at the final point, inactive.
        let s = laser_center(7.0, &laser, t_end).unwrap();
        assert_eq!(s.pos, [0.0, 0.0, 0.0]);
        assert!(!s.active);
        // Powered-off spec is never active.
        let cold = LaserSpec { power: 0.0, ..laser.clone() };
        assert!(!laser_center(1.0, &cold, t_end).unwrap().active);
    }

    #[test]
    fn mu_overrides_take_precedence() {
        let p = plate_params();
        let over = MuOverrides { eta: Some(0.75), k: Some(42.0), ..MuOverrides::none() };
        let props = p.props_at(500.0, &over);
        assert_eq!(props.eta, 0.75);
        assert_eq!(props.k, 42.0);
        // Untouched entries come from the configured models.
        assert_eq!(props.cp, 500.0);
        assert_eq!(props.h, 20.0);
    }

    #[test]
    fn parameter_validation() {
        let mut p = plate_params();
        assert!(p.validate(2702.0).is_ok());
        p.emissivity = 1.5;
        assert!(p.validate(2702.0).is_err());
        let mut p = plate_params();
        p.rho = 0.0;
        assert!(p.validate(2702.0).is_err());
        // Affine k that crosses zero inside the operating range.
        let mut p = plate_params();
        p.k = PropertyModel::Affine { slope: -0.01, intercept: 5.0 };
        assert!(p.validate(2702.0).is_err());
        // h = 0 is legal (insulated verification problems).
        let mut p = plate_params();
        p.h = 0.0;
        assert!(p.validate(2702.0).is_ok());

        let laser = LaserSpec::<f64> { power: -1.0, ..plate_laser() };
        assert!(laser.validate().is_err());
        let mut laser = plate_laser();
        laser.segments[0].to = laser.segments[0].from;
        assert!(laser.validate().is_err());

        assert!(Geometry::Box3 { lx: 0.0, ly: 1.0, lz: 1.0 }.validate().is_err());
        assert!(DomainSpec { geometry: Geometry::Rod { length: 0.1, source_depth: 0.001 }, t_end: 0.0 }
            .validate()
            .is_err());
    }

    #[test]
    fn normalization_references() {
        let p = plate_params();
        let laser = plate_laser();
        // 0.4·2·500/(π·0.0015²) = 5.6588424210e7.
        let q_ref = flux_reference(&p, &laser, 2702.0);
        assert!(rel_close(q_ref, 56_588_424.210_451_68, 1e-12));
        // Laser off → convective scale h·ΔT_ref.
        let cold = LaserSpec { power: 0.0, ..laser.clone() };
        assert_eq!(flux_reference(&p, &cold, 2702.0), 20.0 * 2702.0);
        // Fully insulated → unit reference.
        let mut ins = p;
        ins.h = 0.0;
        assert_eq!(flux_reference(&ins, &cold, 2702.0), 1.0);
        // Transient scale ρ·cp(T0)·ΔT_ref/t_end.
        let r_ref = volumetric_reference(&p, 2702.0, 3.0);
        assert!(rel_close(r_ref, 8000.0 * 500.0 * 2702.0 / 3.0, 1e-14));
    }

    #[test]
    fn geometry_helpers() {
        let boxg = Geometry::Box3 { lx: 0.04, ly: 0.01, lz: 0.006 };
        assert_eq!(boxg.sdim(), 3);
        assert_eq!(boxg.input_dim(), 4);
        assert!(boxg.contains([0.04, 0.01, 0.0], 0.0));
        assert!(!boxg.contains([0.041, 0.0, 0.0], 1e-9));
        assert_eq!(boxg.laser_dist2([0.003, 0.004, 0.006], [0.0, 0.0, 0.006]), 0.003f64.powi(2) + 0.004f64.powi(2));

        let rod = Geometry::Rod { length: 0.1, source_depth: 0.001 };
        assert_eq!(rod.sdim(), 1);
        assert_eq!(rod.input_dim(), 2);
        assert_eq!(rod.surfaces(), &[SurfaceId::XMin, SurfaceId::XMax]);
        // 0.03 − 0.01 rounds once, so compare to the same rounded square.
        let dx = 0.03f64 - 0.01f64;
        assert_eq!(rod.laser_dist2([0.03, 0.0, 0.0], [0.01, 0.0, 0.0]), dx * dx);

        let wall = Geometry::ThinWall {
            length: 0.04,
            height: 0.02,
            thickness: 0.0025,
            k_sub: 51.9,
            substrate_height: 0.015,
            top_edge: TopEdge::Flux,
        };
        assert_eq!(wall.sdim(), 2);
        assert_eq!(wall.input_dim(), 4);
        assert_eq!(wall.outward_normal(SurfaceId::Top).unwrap(), [0.0, 1.0, 0.0]);
        assert_eq!(wall.outward_normal(SurfaceId::Bottom).unwrap(), [0.0, -1.0, 0.0]);
        assert!(matches!(wall.bc_kind(SurfaceId::Bottom), Ok(BcKind::RobinBottom)));
    }

    proptest! {
        /// Polynomial fields (degree ≤ 2 in space, ≤ 1 in time) with constant
        /// properties close against the hand-derived residual
        /// ρ·cp·a − 2k·(c₀+c₁+c₂).
        #[test]
        fn manufactured_polynomial_closure(
            a in -500.0f64..500.0,
            b in proptest::array::uniform3(-2000.0f64..2000.0),
            c in proptest::array::uniform3(-5000.0f64..5000.0),
            x in proptest::array::uniform3(0.0f64..0.04),
        ) {
            let p = plate_params();
            let props = p.props_at(400.0, &MuOverrides::none());
            let d = PhysicalDerivs {
                temp: 400.0,
                dtemp_dt: a,
                grad: [b[0] + 2.0*c[0]*x[0], b[1] + 2.0*c[1]*x[1], b[2] + 2.0*c[2]*x[2]],
                hess: [2.0*c[0], 2.0*c[1], 2.0*c[2]],
            };
            let got = pde_residual_3d(p.rho, &props, &d);
            let want = p.rho * 500.0 * a - 10.0 * 2.0 * (c[0] + c[1] + c[2]);
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }
}
