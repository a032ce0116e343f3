//! Finite-difference reference solver for the moving-laser heat problem.
//!
//! This module produces trusted temperature fields on the same geometries the
//! network is trained on: the 3-D plate, the thin wall (2-D with through-
//! thickness exchange sinks), and the 1-D rod.  Space is discretized with
//! second-order central differences on a vertex-centred grid that includes
//! the boundary nodes; flux conditions are imposed through ghost-node
//! elimination so boundary rows stay second-order accurate.  The absorbed
//! laser flux is integrated exactly over each node's face patch (a product of
//! error functions), which makes the total injected power match the beam
//! power to machine precision while the beam is inside the domain.
//!
//! Two integrators are available.  Explicit Euler refuses to run when the
//! requested step exceeds the conduction stability limit computed from the
//! ambient-temperature diffusivity.  Crank–Nicolson freezes the
//! temperature-dependent conductivity and heat capacity at the previous step
//! and linearizes the radiation law around the previous temperature, so every
//! step solves one linear system.  Scaling each row by its control-volume
//! fraction over its frozen conductivity makes that system symmetric positive
//! definite; it is solved matrix-free with Jacobi-preconditioned conjugate
//! gradients (Thomas algorithm for the tridiagonal rod systems).  All loops
//! are sequential, so repeated runs are bit-identical.

mod linsolve;

use crate::physics::{
    laser_center, q_conv, q_rad, DomainSpec, Geometry, LaserSpec, LaserState, PhysicalParams,
    PhysicsError, SIGMA_SB,
};
use crate::sampling::{subsample_data, DataPoint, SampleError};
use crate::F;
use thiserror::Error;

/// Temperature span (above ambient) over which material properties are
/// required to stay positive when a solve starts.
const PROPERTY_SPAN: F = 3000.0;

/// Relative slack accepted when checking that a spacing divides its side
/// length (and the time step the horizon).
const DIVIDE_TOL: F = 1e-9;

/// Convergence target for the conjugate-gradient solver, relative to ‖b‖₂.
const CG_TOL: F = 1e-13;

/// Iteration budget for one conjugate-gradient solve.
const CG_MAX_ITER: usize = 5000;

/// Snapshots flag any temperature this far (K) below ambient; the slack
/// absorbs the small dips a Crank–Nicolson step may produce near sharp
/// gradients.
const AMBIENT_SLACK: F = 1.0;

/// Errors raised while configuring or running the reference solver.
#[derive(Debug, Error)]
pub enum FdmError {
    /// The grid or stepping configuration is unusable.
    #[error("bad grid: {0}")]
    BadGrid(String),
    /// Explicit Euler was asked to run above its stability limit.
    #[error(
        "explicit Euler is unstable at dt = {dt} s; the conduction limit for this \
         grid is {limit} s — shrink the step or switch to Crank–Nicolson"
    )]
    Unstable {
        /// Requested time step, s.
        dt: F,
        /// Largest stable step for this grid at ambient-temperature
        /// diffusivity, s.
        limit: F,
    },
    /// A non-finite temperature appeared after a step.
    #[error("temperature field became non-finite at step {step} (t = {time} s)")]
    NonFinite {
        /// Step index (1-based) that produced the bad value.
        step: usize,
        /// Physical time of that step, s.
        time: F,
    },
    /// The implicit solve stalled before reaching its tolerance.
    #[error(
        "conjugate gradients stalled at step {step}: relative residual {relative_residual:e} \
         after {iterations} iterations"
    )]
    NoConvergence {
        /// Step index (1-based) of the failed solve.
        step: usize,
        /// Residual reached, relative to the right-hand side norm.
        relative_residual: F,
        /// Iterations spent.
        iterations: usize,
    },
    /// Domain, material, or laser description failed validation.
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// Time integrator used by [`solve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    /// Forward Euler; cheap per step but bound by the conduction stability
    /// limit, which [`solve`] enforces.
    ExplicitEuler,
    /// Crank–Nicolson with coefficients frozen at the previous step and
    /// radiation linearized around the previous temperature; stable for any
    /// step size.
    CrankNicolson,
}

impl Integrator {
    /// Canonical lowercase name, as accepted by [`Integrator::parse`].
    pub fn as_str(&self) -> &'static str {
        match self {
            Integrator::ExplicitEuler => "explicit-euler",
            Integrator::CrankNicolson => "crank-nicolson",
        }
    }

    /// Parses a case-insensitive integrator name.
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "explicit-euler" => Some(Integrator::ExplicitEuler),
            "crank-nicolson" => Some(Integrator::CrankNicolson),
            _ => None,
        }
    }
}

/// Spatial and temporal resolution of a reference solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Node spacing per axis, m.  Entries for axes a geometry does not use
    /// are ignored.  Each active spacing must divide its side length.
    pub spacing: [F; 3],
    /// Time step, s; must divide the domain's time horizon.
    pub dt: F,
    /// Time integrator.
    pub integrator: Integrator,
}

impl GridSpec {
    /// A grid with the same spacing on every axis.
    pub fn uniform(h: F, dt: F, integrator: Integrator) -> Self {
        GridSpec { spacing: [h, h, h], dt, integrator }
    }
}

/// One stored temperature field.
///
/// Temperatures are row-major with the x index fastest: the entry for node
/// `(i, j, k)` lives at `(k * dims[1] + j) * dims[0] + i`.
#[derive(Debug, Clone)]
pub struct FieldSnapshot {
    /// Physical time of the field, s.
    pub time: F,
    /// Position of node `(0, 0, 0)`, m.
    pub origin: [F; 3],
    /// Node spacing per axis, m (zero on axes the geometry does not use).
    pub spacing: [F; 3],
    /// Node counts per axis (one on unused axes).
    pub dims: [usize; 3],
    /// Node temperatures, K, row-major with x fastest.
    pub temps: Vec<F>,
    /// Set when any node sits more than 1 K below ambient, which a physical
    /// heating problem never produces.
    pub undershoot: bool,
}

impl FieldSnapshot {
    /// Flat index of node `(i, j, k)`.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    /// Temperature at node `(i, j, k)`, K.
    pub fn temp_at(&self, i: usize, j: usize, k: usize) -> F {
        self.temps[self.index(i, j, k)]
    }

    /// Physical position of node `(i, j, k)`, m.
    pub fn node_pos(&self, i: usize, j: usize, k: usize) -> [F; 3] {
        [
            self.origin[0] + i as F * self.spacing[0],
            self.origin[1] + j as F * self.spacing[1],
            self.origin[2] + k as F * self.spacing[2],
        ]
    }

    /// Smallest temperature in the field, K.
    pub fn min_temp(&self) -> F {
        self.temps.iter().copied().fold(F::INFINITY, F::min)
    }

    /// Largest temperature in the field, K.
    pub fn max_temp(&self) -> F {
        self.temps.iter().copied().fold(F::NEG_INFINITY, F::max)
    }
}

/// Snapshots plus non-fatal observations from a solve.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    /// Stored fields, oldest first; the initial state and the final step are
    /// always included.
    pub snapshots: Vec<FieldSnapshot>,
    /// Human-readable notes (for example an ambient-undershoot report).
    pub warnings: Vec<String>,
}

/// How [`export_dataset`] turns snapshots into training records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportMode {
    /// Every node of every snapshot.
    Full,
    /// A reproducible random subset of the full export.
    Random {
        /// Number of records to keep.
        count: usize,
        /// Seed for the subset draw.
        seed: u64,
    },
}

/// Runs the reference solver from a uniform ambient start.
pub fn solve(
    domain: &DomainSpec<F>,
    phys: &PhysicalParams<F>,
    laser: &LaserSpec<F>,
    grid: &GridSpec,
    snapshot_every: usize,
) -> Result<SolveOutput, FdmError> {
    let ambient = phys.t0;
    solve_from(domain, phys, laser, grid, snapshot_every, |_| ambient)
}

/// Runs the reference solver from a caller-supplied initial temperature
/// profile (evaluated at node positions).
///
/// `snapshot_every` stores every n-th step; the initial state and the final
/// step are always stored.  Nodes on essential boundaries (the plate base,
/// the rod ends) are pinned to ambient throughout, including at `t = 0`.
pub fn solve_from(
    domain: &DomainSpec<F>,
    phys: &PhysicalParams<F>,
    laser: &LaserSpec<F>,
    grid: &GridSpec,
    snapshot_every: usize,
    initial: impl Fn([F; 3]) -> F,
) -> Result<SolveOutput, FdmError> {
    domain.validate()?;
    phys.validate(PROPERTY_SPAN)?;
    laser.validate()?;
    if snapshot_every == 0 {
        return Err(FdmError::BadGrid("snapshot interval must be at least one step".into()));
    }
    let mesh = Mesh::build(&domain.geometry, grid)?;
    let n_steps = checked_steps(domain.t_end, grid.dt)?;
    if grid.integrator == Integrator::ExplicitEuler {
        let limit = explicit_limit(&mesh, phys);
        if grid.dt > limit * (1.0 + 1e-12) {
            return Err(FdmError::Unstable { dt: grid.dt, limit });
        }
    }

    let mut field: Vec<F> = (0..mesh.n)
        .map(|p| {
            if mesh.dirichlet[p] {
                phys.t0
            } else {
                initial(mesh.node_pos(p))
            }
        })
        .collect();
    if let Some(bad) = field.iter().position(|v| !v.is_finite()) {
        let pos = mesh.node_pos(bad);
        return Err(FdmError::BadGrid(format!(
            "initial profile is non-finite at ({}, {}, {}) m",
            pos[0], pos[1], pos[2]
        )));
    }

    let mut snapshots = Vec::new();
    let mut undershoot: Option<(F, F)> = None; // (worst temperature, time)
    let mut record = |field: &[F], time: F, undershoot: &mut Option<(F, F)>| {
        let min = field.iter().copied().fold(F::INFINITY, F::min);
        let low = min < phys.t0 - AMBIENT_SLACK;
        if low && undershoot.map_or(true, |(worst, _)| min < worst) {
            *undershoot = Some((min, time));
        }
        snapshots.push(mesh.snapshot(field, time, low));
    };
    record(&field, 0.0, &mut undershoot);

    let mut scratch = Workspace::new(mesh.n);
    for step in 1..=n_steps {
        let t_old = (step - 1) as F * grid.dt;
        let t_new = step as F * grid.dt;
        match grid.integrator {
            Integrator::ExplicitEuler => {
                explicit_step(&mesh, phys, laser, domain.t_end, t_old, grid.dt, &mut field)?
            }
            Integrator::CrankNicolson => cn_step(
                &mesh,
                phys,
                laser,
                domain.t_end,
                t_old,
                t_new,
                grid.dt,
                &mut field,
                &mut scratch,
                step,
            )?,
        }
        if field.iter().any(|v| !v.is_finite()) {
            return Err(FdmError::NonFinite { step, time: t_new });
        }
        if step % snapshot_every == 0 || step == n_steps {
            record(&field, t_new, &mut undershoot);
        }
    }

    let mut warnings = Vec::new();
    if let Some((worst, time)) = undershoot {
        warnings.push(format!(
            "field dipped to {worst:.3} K ({:.3} K below ambient) at t = {time:.6} s; \
             affected snapshots are flagged",
            phys.t0 - worst,
        ));
    }
    Ok(SolveOutput { snapshots, warnings })
}

/// Flattens snapshots into training records.
///
/// `Full` emits one record per node per snapshot in storage order;
/// `Random` draws a reproducible subset of that list and returns it sorted by
/// time, then position.
pub fn export_dataset(
    snapshots: &[FieldSnapshot],
    mode: ExportMode,
) -> Result<Vec<DataPoint<F>>, SampleError> {
    let mut full = Vec::new();
    for snap in snapshots {
        for k in 0..snap.dims[2] {
            for j in 0..snap.dims[1] {
                for i in 0..snap.dims[0] {
                    full.push(DataPoint {
                        pos: snap.node_pos(i, j, k),
                        t: snap.time,
                        temp: snap.temp_at(i, j, k),
                        weight: 1.0,
                    });
                }
            }
        }
    }
    match mode {
        ExportMode::Full => Ok(full),
        ExportMode::Random { count, seed } => subsample_data(&full, count, seed),
    }
}

/// Largest stable explicit-Euler step for this grid, s.
///
/// Uses the conduction bound `1 / (2 α Σ 1/hᵢ²)` with the diffusivity
/// evaluated at ambient temperature; temperature-dependent properties that
/// raise the diffusivity during a run are caught by the non-finite abort
/// rather than up front.
fn explicit_limit(mesh: &Mesh<'_>, phys: &PhysicalParams<F>) -> F {
    let alpha = phys.k.eval_real(phys.t0) / (phys.rho * phys.cp.eval_real(phys.t0));
    let mut inv = 0.0;
    for axis in 0..3 {
        if mesh.active[axis] {
            inv += 1.0 / (mesh.spacing[axis] * mesh.spacing[axis]);
        }
    }
    1.0 / (2.0 * alpha * inv)
}

fn checked_steps(t_end: F, dt: F) -> Result<usize, FdmError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(FdmError::BadGrid(format!("time step must be positive, got {dt}")));
    }
    let n = (t_end / dt).round();
    if n < 1.0 || (n * dt - t_end).abs() > DIVIDE_TOL * t_end.max(1.0) {
        return Err(FdmError::BadGrid(format!(
            "time step {dt} s must divide the horizon {t_end} s a whole number of times"
        )));
    }
    Ok(n as usize)
}

/// Boundary handling of one mesh face.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Face {
    /// Convection and radiation exchange; `lasered` faces also receive the
    /// beam flux.
    Exchange { lasered: bool },
    /// Conduction into the substrate through a film coefficient.
    SubstrateRobin,
    /// Pinned to ambient.
    Pinned,
}

/// Uniform structured grid over one geometry.
struct Mesh<'a> {
    geometry: &'a Geometry<F>,
    /// Node counts per axis (1 on unused axes).
    dims: [usize; 3],
    /// Node spacing per axis (0 on unused axes).
    spacing: [F; 3],
    active: [bool; 3],
    /// Position of node (0, 0, 0); lifts the wall mid-plane and keeps the
    /// rod on the x axis.
    origin: [F; 3],
    /// Total node count.
    n: usize,
    /// Nodes pinned to ambient.
    dirichlet: Vec<bool>,
    /// Boundary behaviour per axis and side (`[axis][0]` = low side).
    faces: [[Option<Face>; 2]; 3],
    /// Exchange-sink prefactor 2/w for the thin wall, else zero.
    sink_factor: F,
    /// Volumetric source depth for the rod, else zero.
    source_depth: F,
    /// Substrate film coefficient for the wall's base, else zero.
    h_substrate: F,
}

impl<'a> Mesh<'a> {
    fn build(geometry: &'a Geometry<F>, grid: &GridSpec) -> Result<Self, FdmError> {
        geometry.validate()?;
        let (lengths, active, origin): ([F; 3], [bool; 3], [F; 3]) = match geometry {
            Geometry::Box3 { lx, ly, lz } => {
                ([*lx, *ly, *lz], [true, true, true], [0.0, 0.0, 0.0])
            }
            Geometry::ThinWall { length, height, thickness, .. } => (
                [*length, *height, 0.0],
                [true, true, false],
                [0.0, 0.0, *thickness / 2.0],
            ),
            Geometry::Rod { length, .. } => ([*length, 0.0, 0.0], [true, false, false], [0.0; 3]),
        };

        let mut dims = [1usize; 3];
        let mut spacing = [0.0; 3];
        for axis in 0..3 {
            if !active[axis] {
                continue;
            }
            let h = grid.spacing[axis];
            if !(h > 0.0) || !h.is_finite() {
                return Err(FdmError::BadGrid(format!(
                    "axis {axis}: spacing must be positive, got {h}"
                )));
            }
            let cells = (lengths[axis] / h).round();
            if cells < 2.0 || (cells * h - lengths[axis]).abs() > DIVIDE_TOL * lengths[axis] {
                return Err(FdmError::BadGrid(format!(
                    "axis {axis}: spacing {h} m must divide the side length {} m into at \
                     least two cells",
                    lengths[axis]
                )));
            }
            dims[axis] = cells as usize + 1;
            spacing[axis] = lengths[axis] / cells;
        }

        let faces: [[Option<Face>; 2]; 3] = match geometry {
            Geometry::Box3 { .. } => [
                [Some(Face::Exchange { lasered: false }); 2],
                [Some(Face::Exchange { lasered: false }); 2],
                [Some(Face::Pinned), Some(Face::Exchange { lasered: true })],
            ],
            Geometry::ThinWall { .. } => [
                [Some(Face::Exchange { lasered: false }); 2],
                [Some(Face::SubstrateRobin), Some(Face::Exchange { lasered: true })],
                [None, None],
            ],
            Geometry::Rod { .. } => [[Some(Face::Pinned); 2], [None, None], [None, None]],
        };

        let n = dims[0] * dims[1] * dims[2];
        let mut mesh = Mesh {
            geometry,
            dims,
            spacing,
            active,
            origin,
            n,
            dirichlet: vec![false; n],
            faces,
            sink_factor: 0.0,
            source_depth: 0.0,
            h_substrate: 0.0,
        };
        match geometry {
            Geometry::ThinWall { thickness, .. } => {
                mesh.sink_factor = 2.0 / *thickness;
                mesh.h_substrate = geometry.substrate_film_coefficient();
            }
            Geometry::Rod { source_depth, .. } => mesh.source_depth = *source_depth,
            Geometry::Box3 { .. } => {}
        }
        for p in 0..n {
            let idx = mesh.unravel(p);
            for axis in 0..3 {
                if !mesh.active[axis] {
                    continue;
                }
                let side = if idx[axis] == 0 {
                    0
                } else if idx[axis] == mesh.dims[axis] - 1 {
                    1
                } else {
                    continue;
                };
                if mesh.faces[axis][side] == Some(Face::Pinned) {
                    mesh.dirichlet[p] = true;
                }
            }
        }
        Ok(mesh)
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    fn unravel(&self, p: usize) -> [usize; 3] {
        let i = p % self.dims[0];
        let j = (p / self.dims[0]) % self.dims[1];
        let k = p / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    fn node_pos(&self, p: usize) -> [F; 3] {
        let idx = self.unravel(p);
        [
            self.origin[0] + idx[0] as F * self.spacing[0],
            self.origin[1] + idx[1] as F * self.spacing[1],
            self.origin[2] + idx[2] as F * self.spacing[2],
        ]
    }

    /// Per-axis control-volume weight: boundary nodes own half a cell.
    fn weight(&self, axis: usize, idx: usize) -> F {
        if !self.active[axis] || (idx > 0 && idx < self.dims[axis] - 1) {
            1.0
        } else {
            0.5
        }
    }

    /// Control-volume fraction of a node (product of per-axis weights).
    fn vfrac(&self, idx: [usize; 3]) -> F {
        let mut v = 1.0;
        for axis in 0..3 {
            v *= self.weight(axis, idx[axis]);
        }
        v
    }

    fn snapshot(&self, field: &[F], time: F, undershoot: bool) -> FieldSnapshot {
        FieldSnapshot {
            time,
            origin: self.origin,
            spacing: self.spacing,
            dims: self.dims,
            temps: field.to_vec(),
            undershoot,
        }
    }

    /// Mean absorbed beam flux over each top-face node patch (W/m² for the
    /// plate and wall) or mean volumetric source (W/m³ for the rod), as a
    /// full-length vector that is zero away from the heated surface.
    fn laser_means(&self, state: &LaserState<F>, laser: &LaserSpec<F>, eta: F) -> Vec<F> {
        let mut out = vec![0.0; self.n];
        if !state.active {
            return out;
        }
        let peak = eta * laser.peak_flux();
        let r = laser.beam_radius;
        match self.geometry {
            Geometry::Box3 { lx, ly, .. } => {
                let k_top = self.dims[2] - 1;
                for j in 0..self.dims[1] {
                    let my = patch_mean(
                        j as F * self.spacing[1],
                        self.spacing[1],
                        *ly,
                        state.pos[1],
                        r,
                    );
                    for i in 0..self.dims[0] {
                        let mx = patch_mean(
                            i as F * self.spacing[0],
                            self.spacing[0],
                            *lx,
                            state.pos[0],
                            r,
                        );
                        out[self.index(i, j, k_top)] = peak * mx * my;
                    }
                }
            }
            Geometry::ThinWall { length, .. } => {
                let j_top = self.dims[1] - 1;
                for i in 0..self.dims[0] {
                    let mx = patch_mean(
                        i as F * self.spacing[0],
                        self.spacing[0],
                        *length,
                        state.pos[0],
                        r,
                    );
                    out[self.index(i, j_top, 0)] = peak * mx;
                }
            }
            Geometry::Rod { length, source_depth } => {
                for i in 0..self.dims[0] {
                    let mx = patch_mean(
                        i as F * self.spacing[0],
                        self.spacing[0],
                        *length,
                        state.pos[0],
                        r,
                    );
                    out[self.index(i, 0, 0)] = peak * mx / source_depth;
                }
            }
        }
        out
    }
}

/// ∫ₐᵇ exp(−2 (x − c)² / r²) dx, the beam profile's exact line integral.
fn gauss_interval(a: F, b: F, center: F, radius: F) -> F {
    let s = std::f64::consts::SQRT_2 / radius;
    let half = (std::f64::consts::PI / 2.0).sqrt() * radius / 2.0;
    half * (libm::erf(s * (b - center)) - libm::erf(s * (a - center)))
}

/// Mean of the beam profile over the node patch `[x − h/2, x + h/2]` clipped
/// to `[0, len]`.
fn patch_mean(x: F, h: F, len: F, center: F, radius: F) -> F {
    let a = (x - h / 2.0).max(0.0);
    let b = (x + h / 2.0).min(len);
    gauss_interval(a, b, center, radius) / (b - a)
}

/// One forward-Euler step, in place.  Radiation is evaluated exactly at the
/// current temperature.
fn explicit_step(
    mesh: &Mesh<'_>,
    phys: &PhysicalParams<F>,
    laser: &LaserSpec<F>,
    t_end: F,
    t_old: F,
    dt: F,
    field: &mut Vec<F>,
) -> Result<(), FdmError> {
    let state = laser_center(t_old, laser, t_end)?;
    let laser_in = mesh.laser_means(&state, laser, phys.absorptivity);
    let t0 = phys.t0;
    let mut next = vec![0.0; mesh.n];
    for p in 0..mesh.n {
        if mesh.dirichlet[p] {
            next[p] = t0;
            continue;
        }
        let idx = mesh.unravel(p);
        let temp = field[p];
        let k_p = phys.k.eval_real(temp);
        let cp_p = phys.cp.eval_real(temp);
        let mut acc = 0.0;
        for axis in 0..3 {
            if !mesh.active[axis] {
                continue;
            }
            let h = mesh.spacing[axis];
            let last = mesh.dims[axis] - 1;
            let stride = match axis {
                0 => 1,
                1 => mesh.dims[0],
                _ => mesh.dims[0] * mesh.dims[1],
            };
            if idx[axis] > 0 && idx[axis] < last {
                acc += k_p * (field[p - stride] - 2.0 * temp + field[p + stride]) / (h * h);
            } else {
                let (inner, side) =
                    if idx[axis] == 0 { (field[p + stride], 0) } else { (field[p - stride], 1) };
                acc += k_p * (2.0 * inner - 2.0 * temp) / (h * h);
                let face = mesh.faces[axis][side].expect("active axis boundary has a face");
                let q_out = match face {
                    Face::Exchange { lasered } => {
                        let mut q = q_conv(phys.h, temp, t0) + q_rad(phys.emissivity, temp, t0);
                        if lasered {
                            q -= laser_in[p];
                        }
                        q
                    }
                    Face::SubstrateRobin => mesh.h_substrate * (temp - t0),
                    Face::Pinned => unreachable!("pinned nodes are skipped"),
                };
                acc -= 2.0 / h * q_out;
            }
        }
        if mesh.sink_factor > 0.0 {
            acc -= mesh.sink_factor
                * (q_conv(phys.h, temp, t0) + q_rad(phys.emissivity, temp, t0));
        }
        if mesh.source_depth > 0.0 {
            acc += laser_in[p];
        }
        next[p] = temp + dt * acc / (phys.rho * cp_p);
    }
    *field = next;
    Ok(())
}

/// Reusable buffers for the implicit step.
struct Workspace {
    mass: Vec<F>,
    face_diag: Vec<F>,
    cbar: Vec<F>,
    lap_diag: Vec<F>,
    rhs: Vec<F>,
    sol: Vec<F>,
    tmp: Vec<F>,
    inv_diag: Vec<F>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Workspace {
            mass: vec![0.0; n],
            face_diag: vec![0.0; n],
            cbar: vec![0.0; n],
            lap_diag: vec![0.0; n],
            rhs: vec![0.0; n],
            sol: vec![0.0; n],
            tmp: vec![0.0; n],
            inv_diag: vec![0.0; n],
        }
    }
}

/// Adds `scale · L x` to `out`, where `L` is the control-volume-scaled graph
/// Laplacian of the conduction stencil (symmetric positive semidefinite).
fn lap_apply(mesh: &Mesh<'_>, x: &[F], out: &mut [F], scale: F) {
    for axis in 0..3 {
        if !mesh.active[axis] {
            continue;
        }
        let h2 = mesh.spacing[axis] * mesh.spacing[axis];
        let stride = match axis {
            0 => 1,
            1 => mesh.dims[0],
            _ => mesh.dims[0] * mesh.dims[1],
        };
        for p in 0..mesh.n {
            let idx = mesh.unravel(p);
            if idx[axis] + 1 >= mesh.dims[axis] {
                continue;
            }
            let q = p + stride;
            let mut w_orth = 1.0;
            for other in 0..3 {
                if other != axis {
                    w_orth *= mesh.weight(other, idx[other]);
                }
            }
            let c = w_orth / h2;
            let d = scale * c * (x[p] - x[q]);
            out[p] += d;
            out[q] -= d;
        }
    }
}

/// Accumulates each node's incident edge-weight sum (the Laplacian
/// diagonal) into `out`.
fn lap_diag(mesh: &Mesh<'_>, out: &mut [F]) {
    out.fill(0.0);
    for axis in 0..3 {
        if !mesh.active[axis] {
            continue;
        }
        let h2 = mesh.spacing[axis] * mesh.spacing[axis];
        let stride = match axis {
            0 => 1,
            1 => mesh.dims[0],
            _ => mesh.dims[0] * mesh.dims[1],
        };
        for p in 0..mesh.n {
            let idx = mesh.unravel(p);
            if idx[axis] + 1 >= mesh.dims[axis] {
                continue;
            }
            let q = p + stride;
            let mut w_orth = 1.0;
            for other in 0..3 {
                if other != axis {
                    w_orth *= mesh.weight(other, idx[other]);
                }
            }
            let c = w_orth / h2;
            out[p] += c;
            out[q] += c;
        }
    }
}

/// One Crank–Nicolson step, in place.
///
/// Conductivity and heat capacity are frozen at the previous temperature;
/// radiation is replaced by its tangent at the previous temperature.  Rows
/// are scaled by `V_p / k_p` so the system matrix is symmetric positive
/// definite, then solved with the Thomas algorithm (one active axis) or
/// Jacobi-preconditioned conjugate gradients.
fn cn_step(
    mesh: &Mesh<'_>,
    phys: &PhysicalParams<F>,
    laser: &LaserSpec<F>,
    t_end: F,
    t_old: F,
    t_new: F,
    dt: F,
    field: &mut Vec<F>,
    ws: &mut Workspace,
    step: usize,
) -> Result<(), FdmError> {
    let state_old = laser_center(t_old, laser, t_end)?;
    let state_new = laser_center(t_new, laser, t_end)?;
    let in_old = mesh.laser_means(&state_old, laser, phys.absorptivity);
    let in_new = mesh.laser_means(&state_new, laser, phys.absorptivity);
    let t0 = phys.t0;
    let eps = phys.emissivity;

    for p in 0..mesh.n {
        let idx = mesh.unravel(p);
        let temp = field[p];
        let k_p = phys.k.eval_real(temp);
        let cp_p = phys.cp.eval_real(temp);
        let vk = mesh.vfrac(idx) / k_p;
        ws.mass[p] = vk * phys.rho * cp_p / dt;

        // Tangent of the radiation law at the previous temperature:
        // q ≈ a + b (T − T_prev) with a = σε(T_prev⁴ − T0⁴), b = 4σεT_prev³.
        let a_rad = q_rad(eps, temp, t0);
        let b_rad = 4.0 * SIGMA_SB * eps * temp * temp * temp;

        let mut fd = 0.0;
        let mut cb = 0.0;
        for axis in 0..3 {
            if !mesh.active[axis] {
                continue;
            }
            let last = mesh.dims[axis] - 1;
            let side = if idx[axis] == 0 {
                0
            } else if idx[axis] == last {
                1
            } else {
                continue;
            };
            let face = mesh.faces[axis][side].expect("active axis boundary has a face");
            let two_h = 2.0 / mesh.spacing[axis];
            match face {
                Face::Exchange { lasered } => {
                    fd += two_h * (phys.h + b_rad);
                    let mut c = phys.h * t0 - a_rad + b_rad * temp;
                    if lasered {
                        c += 0.5 * (in_old[p] + in_new[p]);
                    }
                    cb += two_h * c;
                }
                Face::SubstrateRobin => {
                    fd += two_h * mesh.h_substrate;
                    cb += two_h * mesh.h_substrate * t0;
                }
                Face::Pinned => {}
            }
        }
        if mesh.sink_factor > 0.0 {
            fd += mesh.sink_factor * (phys.h + b_rad);
            cb += mesh.sink_factor * (phys.h * t0 - a_rad + b_rad * temp);
        }
        if mesh.source_depth > 0.0 {
            cb += 0.5 * (in_old[p] + in_new[p]);
        }
        ws.face_diag[p] = vk * fd;
        ws.cbar[p] = vk * cb;
    }

    // rhs = mass ⊙ T − ½ L T − ½ face_diag ⊙ T + cbar.
    for p in 0..mesh.n {
        ws.rhs[p] = ws.mass[p] * field[p] - 0.5 * ws.face_diag[p] * field[p] + ws.cbar[p];
    }
    lap_apply(mesh, field, &mut ws.rhs, -0.5);

    lap_diag(mesh, &mut ws.lap_diag);

    if mesh.active.iter().filter(|a| **a).count() == 1 {
        // Tridiagonal system: solve directly.  Pinned rows become identity
        // rows so no elimination step is needed.
        let n = mesh.n;
        let h2 = mesh.spacing[0] * mesh.spacing[0];
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for p in 0..n {
            if mesh.dirichlet[p] {
                diag[p] = 1.0;
                rhs[p] = t0;
            } else {
                diag[p] = ws.mass[p] + 0.5 * (ws.lap_diag[p] + ws.face_diag[p]);
                rhs[p] = ws.rhs[p];
                if p > 0 && !mesh.dirichlet[p - 1] {
                    lower[p] = -0.5 / h2;
                } else if p > 0 {
                    // Coupling to a pinned neighbour moves to the right-hand
                    // side.
                    rhs[p] += 0.5 / h2 * t0;
                }
                if p + 1 < n && !mesh.dirichlet[p + 1] {
                    upper[p] = -0.5 / h2;
                } else if p + 1 < n {
                    rhs[p] += 0.5 / h2 * t0;
                }
            }
        }
        let sol = thomas_or_err(&lower, &diag, &upper, &rhs, step)?;
        *field = sol;
        return Ok(());
    }

    // Split the unknown as x = x0 + z with x0 carrying the pinned values and
    // z zero on pinned nodes, so the free-node operator stays symmetric.
    for p in 0..mesh.n {
        ws.tmp[p] = if mesh.dirichlet[p] { t0 } else { 0.0 };
    }
    // rhs_free = P (rhs − A x0).
    let mut ax0 = vec![0.0; mesh.n];
    for p in 0..mesh.n {
        ax0[p] = (ws.mass[p] + 0.5 * ws.face_diag[p]) * ws.tmp[p];
    }
    lap_apply(mesh, &ws.tmp, &mut ax0, 0.5);
    for p in 0..mesh.n {
        ws.rhs[p] = if mesh.dirichlet[p] { 0.0 } else { ws.rhs[p] - ax0[p] };
    }

    for p in 0..mesh.n {
        ws.inv_diag[p] = if mesh.dirichlet[p] {
            1.0
        } else {
            1.0 / (ws.mass[p] + 0.5 * (ws.lap_diag[p] + ws.face_diag[p]))
        };
        ws.sol[p] = if mesh.dirichlet[p] { 0.0 } else { field[p] };
    }

    let apply = |x: &[F], y: &mut [F]| {
        // y = P A P x + (I − P) x, evaluated without materializing P.
        let mut masked = x.to_vec();
        for p in 0..mesh.n {
            if mesh.dirichlet[p] {
                masked[p] = 0.0;
            }
        }
        for p in 0..mesh.n {
            y[p] = (ws.mass[p] + 0.5 * ws.face_diag[p]) * masked[p];
        }
        lap_apply(mesh, &masked, y, 0.5);
        for p in 0..mesh.n {
            if mesh.dirichlet[p] {
                y[p] = x[p];
            }
        }
    };
    let outcome = linsolve::pcg(apply, &ws.rhs, &mut ws.sol, &ws.inv_diag, CG_TOL, CG_MAX_ITER);
    if !outcome.converged {
        return Err(FdmError::NoConvergence {
            step,
            relative_residual: outcome.relative_residual,
            iterations: outcome.iterations,
        });
    }
    for p in 0..mesh.n {
        field[p] = if mesh.dirichlet[p] { t0 } else { ws.sol[p] };
    }
    Ok(())
}

fn thomas_or_err(
    lower: &[F],
    diag: &[F],
    upper: &[F],
    rhs: &[F],
    step: usize,
) -> Result<Vec<F>, FdmError> {
    linsolve::thomas(lower, diag, upper, rhs).ok_or(FdmError::NoConvergence {
        step,
        relative_residual: F::INFINITY,
        iterations: 0,
    })
}
