//! Collocation-point generation: boundary grids with laser-tracking
//! refinement, two-band interior grids, initial-condition points, and seeded
//! subsampling of labelled data.
//!
//! Points come from fixed closed grids (both endpoints included on every
//! axis), swept over uniform time slices, so counts are deterministic
//! functions of the configuration. The only randomness is the explicit
//! seeded draw in [`subsample_data`].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::physics::{
    laser_center, DomainSpec, Geometry, LaserSpec, PhysicsError, SurfaceId, TopEdge,
};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sampling config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Domain(#[from] PhysicsError),
    #[error("requested {n} data points but only {available} are available")]
    Subsample { n: usize, available: usize },
}

/// Grid spacings and the time-slice step. All lengths in meters, times in
/// seconds. Defaults match the bare-plate study: 0.05 s slices, 1 mm surface
/// grids refined to 0.25 mm in a 6 mm laser window, and a 0.5 mm interior
/// grid in the top 1 mm band over a 2 mm grid below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig<T = crate::F> {
    /// Time between collocation slices, s.
    pub dt_slice: T,
    /// Coarse spacing of every surface grid, m.
    pub coarse_spacing: T,
    /// Fine spacing inside the laser-tracking window, m.
    pub fine_spacing: T,
    /// Full side length of the square laser-tracking window, m.
    pub fine_window: T,
    /// Interior spacing inside the top band, m.
    pub interior_top_spacing: T,
    /// Thickness of the refined interior band under the lasered surface, m.
    pub interior_top_band: T,
    /// Interior spacing below the band, m.
    pub interior_lower_spacing: T,
}

impl<T: Real> Default for SamplingConfig<T> {
    fn default() -> Self {
        SamplingConfig {
            dt_slice: T::of(0.05),
            coarse_spacing: T::of(1.0e-3),
            fine_spacing: T::of(0.25e-3),
            fine_window: T::of(6.0e-3),
            interior_top_spacing: T::of(0.5e-3),
            interior_top_band: T::of(1.0e-3),
            interior_lower_spacing: T::of(2.0e-3),
        }
    }
}

impl<T: Real> SamplingConfig<T> {
    pub fn validate(&self) -> Result<(), SampleError> {
        for (name, v) in [
            ("dt_slice", self.dt_slice),
            ("coarse_spacing", self.coarse_spacing),
            ("fine_spacing", self.fine_spacing),
            ("fine_window", self.fine_window),
            ("interior_top_spacing", self.interior_top_spacing),
            ("interior_top_band", self.interior_top_band),
            ("interior_lower_spacing", self.interior_lower_spacing),
        ] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(SampleError::BadConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A PDE-residual point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteriorPoint<T = crate::F> {
    pub pos: [T; 3],
    pub t: T,
}

/// A boundary-residual point with its surface routing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint<T = crate::F> {
    pub pos: [T; 3],
    pub t: T,
    /// Outward unit normal of the surface the point lies on.
    pub normal: [T; 3],
    pub surface: SurfaceId,
}

/// An initial-condition point at t = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialPoint<T = crate::F> {
    pub pos: [T; 3],
    /// Target temperature, K.
    pub target: T,
}

/// A labelled measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataPoint<T = crate::F> {
    pub pos: [T; 3],
    pub t: T,
    /// Measured temperature, K.
    pub temp: T,
    /// Per-point weight inside the data loss (1.0 unless downweighted).
    pub weight: T,
}

/// Sizes of the four collocation categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleCounts {
    pub interior: usize,
    pub boundary: usize,
    pub initial: usize,
    pub data: usize,
}

/// The full set of points one training run evaluates its loss over.
#[derive(Debug, Clone, Default)]
pub struct CollocationSet<T = crate::F> {
    pub interior: Vec<InteriorPoint<T>>,
    pub boundary: Vec<BoundaryPoint<T>>,
    pub initial: Vec<InitialPoint<T>>,
    pub data: Vec<DataPoint<T>>,
    /// Non-fatal generation notes (e.g. the fine window being clipped).
    pub warnings: Vec<String>,
}

impl<T: Real> CollocationSet<T> {
    /// Generate interior, boundary, and initial points for a domain. Labelled
    /// data is attached separately (it comes from a solver or sensor, not
    /// from the geometry).
    pub fn generate(
        domain: &DomainSpec<T>,
        laser: &LaserSpec<T>,
        ambient: T,
        cfg: &SamplingConfig<T>,
    ) -> Result<Self, SampleError> {
        domain.validate()?;
        laser.validate()?;
        cfg.validate()?;
        let interior = sample_interior(domain, cfg)?;
        let (boundary, warnings) = sample_boundary(domain, laser, cfg)?;
        let initial = sample_initial(domain, cfg, ambient)?;
        Ok(CollocationSet { interior, boundary, initial, data: Vec::new(), warnings })
    }

    pub fn counts(&self) -> SampleCounts {
        SampleCounts {
            interior: self.interior.len(),
            boundary: self.boundary.len(),
            initial: self.initial.len(),
            data: self.data.len(),
        }
    }
}

/// Uniform time slices k·Δt for k·Δt ≤ t_end, always including t = 0 and
/// clamped so roundoff never pushes the last slice past the horizon. A
/// horizon shorter than Δt degenerates to the single slice t = 0.
pub fn time_slices<T: Real>(t_end: T, dt: T) -> Vec<T> {
    // The 1e-6 guard absorbs division roundoff when Δt divides t_end
    // (3.0/0.05 evaluates below 60 in binary).
    let n = ((t_end / dt).to_f64().unwrap_or(0.0) + 1e-6).floor().max(0.0) as usize;
    (0..=n).map(|k| (T::of(k as f64) * dt).min(t_end)).collect()
}

/// Closed 1D grid over `[0, len]`: multiples of `spacing` strictly inside,
/// plus both endpoints.
fn axis_grid<T: Real>(len: T, spacing: T) -> Vec<T> {
    let n = ((len / spacing).to_f64().unwrap_or(0.0) + 1e-6).floor().max(0.0) as usize;
    let interior_cap = len * T::of(1.0 - 1e-12);
    let mut g = Vec::with_capacity(n + 2);
    g.push(T::zero());
    for k in 1..=n {
        let x = T::of(k as f64) * spacing;
        if x < interior_cap {
            g.push(x);
        }
    }
    g.push(len);
    g
}

/// Multiples of `spacing` in `[0, cap)` — the lower interior band, open at
/// the top so it never overlaps the refined band above it.
fn open_grid<T: Real>(cap: T, spacing: T) -> Vec<T> {
    let limit = cap * T::of(1.0 - 1e-12);
    let mut g = Vec::new();
    let mut k = 0usize;
    loop {
        let x = T::of(k as f64) * spacing;
        if x >= limit {
            return g;
        }
        g.push(x);
        k += 1;
    }
}

/// Tolerance-based point dedup (1e-9 m): a hash grid over quantized
/// coordinates, checking the 3×3×3 neighborhood on insert.
struct DedupSet {
    cells: HashMap<(i64, i64, i64), Vec<[f64; 3]>>,
}

const DEDUP_TOL: f64 = 1e-9;

impl DedupSet {
    fn new() -> Self {
        DedupSet { cells: HashMap::new() }
    }

    fn cell(p: [f64; 3]) -> (i64, i64, i64) {
        let q = |x: f64| (x / DEDUP_TOL).floor() as i64;
        (q(p[0]), q(p[1]), q(p[2]))
    }

    /// Insert if no existing point lies within the tolerance; report whether
    /// the point was new.
    fn insert<T: Real>(&mut self, pos: [T; 3]) -> bool {
        let p = [
            pos[0].to_f64().unwrap_or(f64::NAN),
            pos[1].to_f64().unwrap_or(f64::NAN),
            pos[2].to_f64().unwrap_or(f64::NAN),
        ];
        let (cx, cy, cz) = Self::cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(v) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for q in v {
                            let d2 = (p[0] - q[0]).powi(2)
                                + (p[1] - q[1]).powi(2)
                                + (p[2] - q[2]).powi(2);
                            if d2 < DEDUP_TOL * DEDUP_TOL {
                                return false;
                            }
                        }
                    }
                }
            }
        }
        self.cells.entry((cx, cy, cz)).or_default().push(p);
        true
    }
}

/// Closed coarse grid covering one surface.
fn face_grid<T: Real>(geometry: &Geometry<T>, surface: SurfaceId, spacing: T) -> Vec<[T; 3]> {
    match *geometry {
        Geometry::Box3 { lx, ly, lz } => {
            let (xs, ys, zs) = (axis_grid(lx, spacing), axis_grid(ly, spacing), axis_grid(lz, spacing));
            let mut out = Vec::new();
            match surface {
                SurfaceId::Top | SurfaceId::Bottom => {
                    let z = if surface == SurfaceId::Top { lz } else { T::zero() };
                    for &y in &ys {
                        for &x in &xs {
                            out.push([x, y, z]);
                        }
                    }
                }
                SurfaceId::XMin | SurfaceId::XMax => {
                    let x = if surface == SurfaceId::XMax { lx } else { T::zero() };
                    for &z in &zs {
                        for &y in &ys {
                            out.push([x, y, z]);
                        }
                    }
                }
                SurfaceId::YMin | SurfaceId::YMax => {
                    let y = if surface == SurfaceId::YMax { ly } else { T::zero() };
                    for &z in &zs {
                        for &x in &xs {
                            out.push([x, y, z]);
                        }
                    }
                }
            }
            out
        }
        Geometry::ThinWall { length, height, .. } => {
            let (xs, ys) = (axis_grid(length, spacing), axis_grid(height, spacing));
            match surface {
                SurfaceId::Top => xs.iter().map(|&x| [x, height, T::zero()]).collect(),
                SurfaceId::Bottom => xs.iter().map(|&x| [x, T::zero(), T::zero()]).collect(),
                SurfaceId::XMin => ys.iter().map(|&y| [T::zero(), y, T::zero()]).collect(),
                SurfaceId::XMax => ys.iter().map(|&y| [length, y, T::zero()]).collect(),
                _ => Vec::new(),
            }
        }
        Geometry::Rod { length, .. } => match surface {
            SurfaceId::XMin => vec![[T::zero(); 3]],
            SurfaceId::XMax => vec![[length, T::zero(), T::zero()]],
            _ => Vec::new(),
        },
    }
}

/// Fine-grid candidates in the window centered on the beam, clipped to the
/// lasered surface. Returns the kept points and whether clipping dropped any.
fn fine_candidates<T: Real>(
    geometry: &Geometry<T>,
    center: [T; 3],
    cfg: &SamplingConfig<T>,
) -> (Vec<[T; 3]>, bool) {
    let half = cfg.fine_window * T::of(0.5);
    let n = ((cfg.fine_window / cfg.fine_spacing).to_f64().unwrap_or(0.0) + 1e-6).floor() as usize;
    let offsets: Vec<T> = (0..=n).map(|k| T::of(k as f64) * cfg.fine_spacing - half).collect();
    let tol = T::of(1e-12);
    let mut out = Vec::new();
    let mut clipped = false;
    match *geometry {
        Geometry::Box3 { lx, ly, lz } => {
            for &dy in &offsets {
                let y = center[1] + dy;
                if y < -tol || y > ly + tol {
                    clipped = true;
                    continue;
                }
                for &dx in &offsets {
                    let x = center[0] + dx;
                    if x < -tol || x > lx + tol {
                        clipped = true;
                        continue;
                    }
                    out.push([x.max(T::zero()).min(lx), y.max(T::zero()).min(ly), lz]);
                }
            }
        }
        Geometry::ThinWall { length, height, .. } => {
            for &dx in &offsets {
                let x = center[0] + dx;
                if x < -tol || x > length + tol {
                    clipped = true;
                    continue;
                }
                out.push([x.max(T::zero()).min(length), height, T::zero()]);
            }
        }
        // The rod's heating is volumetric; its two Dirichlet end points get
        // no refinement.
        Geometry::Rod { .. } => {}
    }
    (out, clipped)
}

/// Whether this geometry carries a lasered surface to refine (the wall only
/// when its top edge is flux-constrained).
fn refined_top(geometry: &Geometry<impl Real>) -> Option<SurfaceId> {
    match geometry {
        Geometry::Box3 { .. } => Some(SurfaceId::Top),
        Geometry::ThinWall { top_edge: TopEdge::Flux, .. } => Some(SurfaceId::Top),
        Geometry::ThinWall { top_edge: TopEdge::DataOnly, .. } | Geometry::Rod { .. } => None,
    }
}

/// Boundary points over all time slices: the coarse grid on every surface
/// plus the fine laser-tracking window on the lasered surface, deduplicated
/// within each slice (faces are visited in a fixed order; a point shared by
/// two faces keeps the first face's normal).
pub fn sample_boundary<T: Real>(
    domain: &DomainSpec<T>,
    laser: &LaserSpec<T>,
    cfg: &SamplingConfig<T>,
) -> Result<(Vec<BoundaryPoint<T>>, Vec<String>), SampleError> {
    domain.validate()?;
    laser.validate()?;
    cfg.validate()?;
    let geometry = &domain.geometry;
    let skip_top = matches!(
        geometry,
        Geometry::ThinWall { top_edge: TopEdge::DataOnly, .. }
    );
    let slices = time_slices(domain.t_end, cfg.dt_slice);
    let mut out = Vec::new();
    let mut clipped_slices = 0usize;
    for &t in &slices {
        let mut dedup = DedupSet::new();
        for &surface in geometry.surfaces() {
            if skip_top && surface == SurfaceId::Top {
                continue;
            }
            let normal = geometry.outward_normal(surface)?;
            for pos in face_grid(geometry, surface, cfg.coarse_spacing) {
                if dedup.insert(pos) {
                    out.push(BoundaryPoint { pos, t, normal, surface });
                }
            }
        }
        if let Some(surface) = refined_top(geometry) {
            let state = laser_center(t, laser, domain.t_end)?;
            let (cands, clipped) = fine_candidates(geometry, state.pos, cfg);
            if clipped {
                clipped_slices += 1;
            }
            let normal = geometry.outward_normal(surface)?;
            for pos in cands {
                if dedup.insert(pos) {
                    out.push(BoundaryPoint { pos, t, normal, surface });
                }
            }
        }
    }
    let mut warnings = Vec::new();
    if clipped_slices > 0 {
        warnings.push(format!(
            "laser-tracking window extends past the domain and was clipped on {clipped_slices} of {} time slices",
            slices.len()
        ));
    }
    Ok((out, warnings))
}

/// Spatial interior grid of one time slice: the refined band under the
/// lasered surface plus the coarser grid below it. The rod (no lasered
/// surface) uses a single uniform grid at the refined spacing.
fn interior_slice_grid<T: Real>(geometry: &Geometry<T>, cfg: &SamplingConfig<T>) -> Vec<[T; 3]> {
    let mut out = Vec::new();
    match *geometry {
        Geometry::Box3 { lx, ly, lz } => {
            let band_lo = (lz - cfg.interior_top_band).max(T::zero());
            let xs = axis_grid(lx, cfg.interior_top_spacing);
            let ys = axis_grid(ly, cfg.interior_top_spacing);
            for &dz in &axis_grid(lz - band_lo, cfg.interior_top_spacing) {
                let z = band_lo + dz;
                for &y in &ys {
                    for &x in &xs {
                        out.push([x, y, z]);
                    }
                }
            }
            let xs = axis_grid(lx, cfg.interior_lower_spacing);
            let ys = axis_grid(ly, cfg.interior_lower_spacing);
            for &z in &open_grid(band_lo, cfg.interior_lower_spacing) {
                for &y in &ys {
                    for &x in &xs {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        Geometry::ThinWall { length, height, .. } => {
            let band_lo = (height - cfg.interior_top_band).max(T::zero());
            let xs = axis_grid(length, cfg.interior_top_spacing);
            for &dy in &axis_grid(height - band_lo, cfg.interior_top_spacing) {
                let y = band_lo + dy;
                for &x in &xs {
                    out.push([x, y, T::zero()]);
                }
            }
            let xs = axis_grid(length, cfg.interior_lower_spacing);
            for &y in &open_grid(band_lo, cfg.interior_lower_spacing) {
                for &x in &xs {
                    out.push([x, y, T::zero()]);
                }
            }
        }
        Geometry::Rod { length, .. } => {
            for &x in &axis_grid(length, cfg.interior_top_spacing) {
                out.push([x, T::zero(), T::zero()]);
            }
        }
    }
    out
}

/// PDE-residual points: the two-band spatial grid swept over all time
/// slices.
pub fn sample_interior<T: Real>(
    domain: &DomainSpec<T>,
    cfg: &SamplingConfig<T>,
) -> Result<Vec<InteriorPoint<T>>, SampleError> {
    domain.validate()?;
    cfg.validate()?;
    let grid = interior_slice_grid(&domain.geometry, cfg);
    let slices = time_slices(domain.t_end, cfg.dt_slice);
    let mut out = Vec::with_capacity(grid.len() * slices.len());
    for &t in &slices {
        out.extend(grid.iter().map(|&pos| InteriorPoint { pos, t }));
    }
    Ok(out)
}

/// Initial-condition points: the interior spatial grid at t = 0 with a
/// uniform ambient target.
pub fn sample_initial<T: Real>(
    domain: &DomainSpec<T>,
    cfg: &SamplingConfig<T>,
    ambient: T,
) -> Result<Vec<InitialPoint<T>>, SampleError> {
    domain.validate()?;
    cfg.validate()?;
    Ok(interior_slice_grid(&domain.geometry, cfg)
        .into_iter()
        .map(|pos| InitialPoint { pos, target: ambient })
        .collect())
}

/// Draw `n` points uniformly without replacement, reproducibly by seed. The
/// result is in canonical (t, x, y, z) order so downstream sums are
/// independent of the draw order.
pub fn subsample_data<T: Real>(
    data: &[DataPoint<T>],
    n: usize,
    seed: u64,
) -> Result<Vec<DataPoint<T>>, SampleError> {
    if n > data.len() {
        return Err(SampleError::Subsample { n, available: data.len() });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let idx = rand::seq::index::sample(&mut rng, data.len(), n);
    let mut out: Vec<DataPoint<T>> = idx.into_iter().map(|i| data[i]).collect();
    out.sort_by(|a, b| {
        let ka = [a.t, a.pos[0], a.pos[1], a.pos[2]];
        let kb = [b.t, b.pos[0], b.pos[1], b.pos[2]];
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::Segment;
    use proptest::prelude::*;

    fn plate() -> DomainSpec<f64> {
        DomainSpec { geometry: Geometry::Box3 { lx: 0.040, ly: 0.010, lz: 0.006 }, t_end: 3.0 }
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

    fn wall(top_edge: TopEdge) -> DomainSpec<f64> {
        DomainSpec {
            geometry: Geometry::ThinWall {
                length: 0.030,
                height: 0.020,
                thickness: 0.0025,
                k_sub: 51.9,
                substrate_height: 0.015,
                top_edge,
            },
            t_end: 1.0,
        }
    }

    fn wall_laser() -> LaserSpec<f64> {
        LaserSpec {
            power: 500.0,
            beam_radius: 0.00112,
            segments: vec![Segment {
                from: [0.015, 0.020, 0.0],
                to: [0.0150001, 0.020, 0.0],
                speed: 0.0000001,
                power_on: true,
            }],
            dwell: 0.0,
        }
    }

    #[test]
    fn time_slicing_counts() {
        // 3 s at 0.05 s → 61 slices including both ends.
        let ts = time_slices(3.0f64, 0.05);
        assert_eq!(ts.len(), 61);
        assert_eq!(ts[0], 0.0);
        assert_eq!(*ts.last().unwrap(), 3.0);
        for w in ts.windows(2) {
            assert!((w[1] - w[0] - 0.05).abs() < 1e-12);
        }
        // Horizon shorter than the step degenerates to t = 0 alone.
        assert_eq!(time_slices(2.0, 5.0), vec![0.0]);
    }

    #[test]
    fn closed_axis_grids() {
        // 40 mm at 1 mm → 41 points, both endpoints included.
        let g = axis_grid(0.040, 0.001);
        assert_eq!(g.len(), 41);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 0.040);
        // Non-dividing spacing keeps every interior multiple plus the end.
        let g = axis_grid(0.0105, 0.001);
        assert_eq!(g.len(), 12);
        assert_eq!(*g.last().unwrap(), 0.0105);
        // Spacing larger than the axis: just the two endpoints.
        assert_eq!(axis_grid(0.5, 2.0), vec![0.0, 0.5]);
    }

    #[test]
    fn top_surface_coarse_grid_is_451_points() {
        // 41 × 11 for the 40 × 10 mm plate at 1 mm.
        let g = face_grid(&plate().geometry, SurfaceId::Top, 0.001);
        assert_eq!(g.len(), 451);
        assert!(g.iter().all(|p| p[2] == 0.006));
    }

    #[test]
    fn boundary_slice_composition_default_plate() {
        let domain = plate();
        let (pts, warnings) =
            sample_boundary(&domain, &plate_laser(), &SamplingConfig::default()).unwrap();
        assert!(warnings.is_empty());
        // 61 slices.
        let slice0: Vec<_> = pts.iter().filter(|p| p.t == 0.0).collect();
        // Closed 41×11×7 lattice has 1402 distinct surface points; the fine
        // window at (5, 5) mm is fully interior and aligned to the coarse
        // grid, so 49 of its 625 candidates are duplicates: 1402 + 576.
        assert_eq!(slice0.len(), 1978);
        // The beam advances 0.5 mm per slice, so the window alternates
        // between aligned (7 integer-mm columns → 49 duplicates) and
        // half-offset (6 columns → 42): 31 slices of 1978 + 30 of 1985.
        let mut ts: Vec<f64> = pts.iter().map(|p| p.t).collect();
        ts.dedup();
        assert_eq!(ts.len(), 61);
        assert_eq!(pts.len(), 31 * 1978 + 30 * 1985);
        let slice1 = pts.iter().filter(|p| p.t == 0.05).count();
        assert_eq!(slice1, 1985);

        // Per-face composition of the coarse part: faces are visited
        // top, bottom, xmin, xmax, ymin, ymax; later faces lose shared edges.
        let count = |s: SurfaceId| slice0.iter().filter(|p| p.surface == s).count();
        assert_eq!(count(SurfaceId::Bottom), 451);
        assert_eq!(count(SurfaceId::XMin), 55); // 11×7 −  shared edges
        assert_eq!(count(SurfaceId::XMax), 55);
        assert_eq!(count(SurfaceId::YMin), 195); // 41×7 − shared edges
        assert_eq!(count(SurfaceId::YMax), 195);
        assert_eq!(count(SurfaceId::Top), 451 + 576);
    }

    #[test]
    fn boundary_points_sit_on_their_surface_with_outward_normals() {
        let domain = plate();
        let (pts, _) =
            sample_boundary(&domain, &plate_laser(), &SamplingConfig::default()).unwrap();
        let geometry = &domain.geometry;
        for p in pts.iter().filter(|p| p.t == 0.0) {
            assert!(geometry.contains(p.pos, 1e-12), "{:?}", p.pos);
            assert_eq!(p.normal, geometry.outward_normal(p.surface).unwrap());
            let norm: f64 = p.normal.iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-15);
            // The face coordinate matches the surface.
            match p.surface {
                SurfaceId::Top => assert_eq!(p.pos[2], 0.006),
                SurfaceId::Bottom => assert_eq!(p.pos[2], 0.0),
                SurfaceId::XMin => assert_eq!(p.pos[0], 0.0),
                SurfaceId::XMax => assert_eq!(p.pos[0], 0.040),
                SurfaceId::YMin => assert_eq!(p.pos[1], 0.0),
                SurfaceId::YMax => assert_eq!(p.pos[1], 0.010),
            }
        }
    }

    #[test]
    fn no_two_boundary_points_closer_than_tolerance() {
        let domain = plate();
        let (pts, _) =
            sample_boundary(&domain, &plate_laser(), &SamplingConfig::default()).unwrap();
        let slice0: Vec<_> = pts.iter().filter(|p| p.t == 0.0).collect();
        for (i, a) in slice0.iter().enumerate() {
            for b in &slice0[i + 1..] {
                let d2: f64 = a
                    .pos
                    .iter()
                    .zip(&b.pos)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                assert!(d2 >= DEDUP_TOL * DEDUP_TOL, "{:?} vs {:?}", a.pos, b.pos);
            }
        }
    }

    #[test]
    fn fine_window_tracks_the_moving_beam() {
        let domain = plate();
        let laser = plate_laser();
        let cfg = SamplingConfig::default();
        // At t = 1.5 s the beam sits at x = 20 mm; every fine candidate must
        // lie within the half-diagonal 3√2 mm of the center.
        let state = laser_center(1.5, &laser, domain.t_end).unwrap();
        let (cands, clipped) = fine_candidates(&domain.geometry, state.pos, &cfg);
        assert!(!clipped);
        assert_eq!(cands.len(), 625);
        let max_r = 0.003 * std::f64::consts::SQRT_2 + 1e-12;
        for c in cands {
            let d = ((c[0] - state.pos[0]).powi(2) + (c[1] - state.pos[1]).powi(2)).sqrt();
            assert!(d <= max_r, "{d}");
        }
    }

    #[test]
    fn fine_window_clipping_is_reported() {
        // A 4 × 4 mm plate cannot hold the 6 mm window.
        let domain = DomainSpec {
            geometry: Geometry::Box3 { lx: 0.004, ly: 0.004, lz: 0.002 },
            t_end: 0.1,
        };
        let laser = LaserSpec {
            power: 100.0,
            beam_radius: 0.001,
            segments: vec![Segment {
                from: [0.002, 0.002, 0.002],
                to: [0.003, 0.002, 0.002],
                speed: 0.010,
                power_on: true,
            }],
            dwell: 0.0,
        };
        let (pts, warnings) = sample_boundary(&domain, &laser, &SamplingConfig::default()).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("clipped"), "{}", warnings[0]);
        for p in &pts {
            assert!(domain.geometry.contains(p.pos, 1e-12));
        }
    }

    #[test]
    fn interior_two_band_counts_default_plate() {
        let domain = plate();
        let pts = sample_interior(&domain, &SamplingConfig::default()).unwrap();
        let slice0: Vec<_> = pts.iter().filter(|p| p.t == 0.0).collect();
        // Top band 40×10×1 mm at 0.5 mm: 81·21·3 = 5103; below at 2 mm with
        // z ∈ {0, 2, 4} mm: 21·6·3 = 378.
        assert_eq!(slice0.len(), 5103 + 378);
        assert_eq!(pts.len(), 61 * 5481);
        let band = slice0.iter().filter(|p| p.pos[2] >= 0.005 - 1e-12).count();
        assert_eq!(band, 5103);
        // The open lower band never reaches the refined slab.
        assert!(slice0
            .iter()
            .filter(|p| p.pos[2] < 0.005 - 1e-12)
            .all(|p| p.pos[2] < 0.0045));
    }

    #[test]
    fn initial_points_match_interior_slice_with_ambient_target() {
        let domain = plate();
        let cfg = SamplingConfig::default();
        let init = sample_initial(&domain, &cfg, 298.0).unwrap();
        let interior = sample_interior(&domain, &cfg).unwrap();
        let per_slice = interior.iter().filter(|p| p.t == 0.0).count();
        assert_eq!(init.len(), per_slice);
        assert!(init.iter().all(|p| p.target == 298.0));
        // Degenerate domain is rejected before any points are produced.
        let empty = DomainSpec { geometry: Geometry::Box3 { lx: 0.0, ly: 0.01, lz: 0.01 }, t_end: 1.0 };
        assert!(sample_initial(&empty, &cfg, 298.0).is_err());
    }

    #[test]
    fn wall_boundary_counts_by_top_edge_mode() {
        let cfg = SamplingConfig::default();
        // Flux mode, 30×20 mm at 1 mm: top 31 + bottom 31 + sides 2×19
        // (corners deduplicated) = 100, plus the fine window at x = 15 mm:
        // 25 candidates − 7 coarse duplicates = 18. Total 118.
        let (pts, _) = sample_boundary(&wall(TopEdge::Flux), &wall_laser(), &cfg).unwrap();
        let slice0 = pts.iter().filter(|p| p.t == 0.0).count();
        assert_eq!(slice0, 118);
        // Data-only mode drops the whole top edge (and its refinement):
        // bottom 31 + sides 2×20 = 71.
        let (pts, _) = sample_boundary(&wall(TopEdge::DataOnly), &wall_laser(), &cfg).unwrap();
        let slice0: Vec<_> = pts.iter().filter(|p| p.t == 0.0).collect();
        assert_eq!(slice0.len(), 71);
        assert!(slice0.iter().all(|p| p.surface != SurfaceId::Top));
    }

    #[test]
    fn wall_interior_two_band_counts() {
        let pts = sample_interior(&wall(TopEdge::Flux), &SamplingConfig::default()).unwrap();
        let slice0 = pts.iter().filter(|p| p.t == 0.0).count();
        // Band 30×1 mm at 0.5 mm: 61·3 = 183; below at 2 mm with
        // y ∈ {0,…,18}: 16·10 = 160.
        assert_eq!(slice0, 183 + 160);
    }

    #[test]
    fn rod_sampling_is_one_dimensional() {
        let domain = DomainSpec { geometry: Geometry::Rod { length: 0.040, source_depth: 0.001 }, t_end: 1.0 };
        let laser = LaserSpec {
            power: 100.0,
            beam_radius: 0.0015,
            segments: vec![Segment {
                from: [0.010, 0.0, 0.0],
                to: [0.030, 0.0, 0.0],
                speed: 0.020,
                power_on: true,
            }],
            dwell: 0.0,
        };
        let cfg = SamplingConfig::default();
        let (pts, warnings) = sample_boundary(&domain, &laser, &cfg).unwrap();
        assert!(warnings.is_empty());
        let n_slices = time_slices(domain.t_end, cfg.dt_slice).len();
        // Two Dirichlet end points per slice, nothing else.
        assert_eq!(pts.len(), 2 * n_slices);
        assert!(pts.iter().all(|p| p.pos[0] == 0.0 || p.pos[0] == 0.040));
        // 40 mm at the refined 0.5 mm spacing → 81 per slice.
        let interior = sample_interior(&domain, &cfg).unwrap();
        assert_eq!(interior.iter().filter(|p| p.t == 0.0).count(), 81);
    }

    #[test]
    fn generate_assembles_all_categories() {
        let set =
            CollocationSet::generate(&plate(), &plate_laser(), 298.0, &SamplingConfig::default())
                .unwrap();
        let c = set.counts();
        assert_eq!(c.interior, 61 * 5481);
        assert_eq!(c.boundary, 31 * 1978 + 30 * 1985);
        assert_eq!(c.initial, 5481);
        assert_eq!(c.data, 0);
        assert!(set.warnings.is_empty());
    }

    #[test]
    fn subsampling_is_seeded_and_without_replacement() {
        let data: Vec<DataPoint<f64>> = (0..100)
            .map(|i| DataPoint {
                pos: [i as f64 * 1e-3, 0.0, 0.0],
                t: 0.0,
                temp: 300.0 + i as f64,
                weight: 1.0,
            })
            .collect();
        let a = subsample_data(&data, 10, 7).unwrap();
        let b = subsample_data(&data, 10, 7).unwrap();
        assert_eq!(a, b);
        let c = subsample_data(&data, 10, 8).unwrap();
        assert_ne!(a, c);
        // Without replacement: all temps distinct.
        let mut temps: Vec<f64> = a.iter().map(|p| p.temp).collect();
        temps.dedup();
        assert_eq!(temps.len(), 10);
        // n = size returns everything; n = 0 nothing; n > size is an error.
        assert_eq!(subsample_data(&data, 100, 1).unwrap().len(), 100);
        assert!(subsample_data(&data, 0, 1).unwrap().is_empty());
        assert!(matches!(
            subsample_data(&data, 101, 1),
            Err(SampleError::Subsample { n: 101, available: 100 })
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = SamplingConfig::<f64>::default();
        cfg.dt_slice = 0.0;
        assert!(matches!(
            sample_interior(&plate(), &cfg),
            Err(SampleError::BadConfig(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Every emitted point lies in the domain with t in the horizon,
        /// over randomized geometry and beam placement.
        #[test]
        fn all_points_stay_inside_random_domains(
            lx in 0.005f64..0.030,
            ly in 0.004f64..0.015,
            lz in 0.002f64..0.008,
            fx in 0.1f64..0.9,
            fy in 0.1f64..0.9,
        ) {
            let domain = DomainSpec { geometry: Geometry::Box3 { lx, ly, lz }, t_end: 0.1 };
            let laser = LaserSpec {
                power: 300.0,
                beam_radius: 0.001,
                segments: vec![Segment {
                    from: [fx * lx, fy * ly, lz],
                    to: [fx.min(0.8) * lx + 0.1 * lx, fy * ly, lz],
                    speed: 0.010,
                    power_on: true,
                }],
                dwell: 0.0,
            };
            let cfg = SamplingConfig { coarse_spacing: 2e-3, fine_spacing: 1e-3, ..SamplingConfig::default() };
            let set = CollocationSet::generate(&domain, &laser, 298.0, &cfg).unwrap();
            for p in &set.interior {
                prop_assert!(domain.geometry.contains(p.pos, 1e-12));
                prop_assert!(p.t >= 0.0 && p.t <= domain.t_end);
            }
            for p in &set.boundary {
                prop_assert!(domain.geometry.contains(p.pos, 1e-12));
                prop_assert!(p.t >= 0.0 && p.t <= domain.t_end);
            }
            for p in &set.initial {
                prop_assert!(domain.geometry.contains(p.pos, 1e-12));
            }
        }

        /// Fine candidates always stay within the window half-diagonal of
        /// the beam center, wherever the beam is.
        #[test]
        fn fine_candidates_stay_near_the_center(
            cx in 0.0f64..0.040,
            cy in 0.0f64..0.010,
        ) {
            let geometry = Geometry::Box3 { lx: 0.040, ly: 0.010, lz: 0.006 };
            let cfg = SamplingConfig::default();
            let (cands, _) = fine_candidates(&geometry, [cx, cy, 0.006], &cfg);
            let max_r = 0.003 * std::f64::consts::SQRT_2 + 1e-9;
            for c in cands {
                let d = ((c[0] - cx).powi(2) + (c[1] - cy).powi(2)).sqrt();
                prop_assert!(d <= max_r, "{d} at center ({cx}, {cy})");
            }
        }
    }
}
