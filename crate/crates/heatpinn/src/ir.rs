//! Thermal-camera frame stacks: synthetic generation from solver fields,
//! a portable on-disk format, crop/down-sample preprocessing, and
//! conversion into labelled training data.
//!
//! A frame is a square-pitch pixel grid in a planar camera coordinate
//! system `(u, v)`: pixel `(row r, col c)` is the cell centered at
//! `origin + ((c + ½)·pitch, (r + ½)·pitch)`. Pixels are `Option<F>` —
//! `None` carries no temperature at all (outside the part, saturated, or
//! averaged away), and every transform preserves that absence rather than
//! inventing values.
//!
//! [`gen_synthetic_ir`] imitates a melt-pool camera: it samples a solver
//! field bilinearly on a window (following the laser or fixed), removes —
//! not clamps — pixels above the saturation threshold, then adds seeded
//! Gaussian noise to the survivors, in that order, exactly as a detector
//! saturates on the true radiance before read noise enters.
//!
//! [`read_irstack`]/[`write_irstack`] exchange stacks as plain text
//! (`IRSTACK v1`), hardware-agnostic and diff-friendly. [`crop_downsample`]
//! reduces measured frames by mask-aware block averaging, and
//! [`frames_to_data`] places pixels into the simulation domain as weighted
//! data points, reporting how many fell outside.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::fdm::FieldSnapshot;
use crate::physics::{laser_center, DomainSpec, Geometry, LaserSpec, PhysicsError};
use crate::sampling::DataPoint;
use crate::F;

/// Relative slack for grid-divisibility and edge checks.
const REL_TOL: F = 1e-9;

#[derive(Debug, Error)]
pub enum IrError {
    #[error("invalid camera window: {0}")]
    BadSpec(String),
    #[error("no snapshot matches frame time {time} s (field cadence must cover the frame rate)")]
    MissingSnapshot { time: F },
    #[error("frame stack cannot be built from this field: {0}")]
    Unsupported(String),
    #[error("bad crop/down-sample request: {0}")]
    BadCrop(String),
    #[error("line {line}: {what}")]
    Format { line: usize, what: String },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Virtual thermal camera: a square sampling window, its pixel pitch and
/// frame rate, and the detector's saturation/noise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IRWindowSpec {
    /// Side length of the square window, m.
    pub window: F,
    /// Pixel pitch, m. Must divide the window side.
    pub pitch: F,
    /// Frames per second.
    pub frame_rate: F,
    /// Pixels whose clean sampled temperature exceeds this are removed, K.
    pub saturation: F,
    /// Standard deviation of the additive Gaussian read noise, K.
    pub noise_sigma: F,
    /// Seed for the noise stream.
    pub seed: u64,
    /// Fixed window center in the camera plane, m. `None` keeps the window
    /// centered on the laser spot.
    pub center: Option<[F; 2]>,
}

impl Default for IRWindowSpec {
    fn default() -> Self {
        IRWindowSpec {
            window: 6e-3,
            pitch: 0.25e-3,
            frame_rate: 10.0,
            saturation: 2000.0,
            noise_sigma: 100.0,
            seed: 0,
            center: None,
        }
    }
}

impl IRWindowSpec {
    pub fn validate(&self, ambient: F) -> Result<(), IrError> {
        let bad = |what: String| Err(IrError::BadSpec(what));
        if !(self.window.is_finite() && self.window > 0.0) {
            return bad(format!("window side must be positive, got {}", self.window));
        }
        if !(self.pitch.is_finite() && self.pitch > 0.0) {
            return bad(format!("pixel pitch must be positive, got {}", self.pitch));
        }
        let n = self.window / self.pitch;
        if (n - n.round()).abs() > REL_TOL * n.max(1.0) || n.round() < 1.0 {
            return bad(format!(
                "pixel pitch {} m must divide the window side {} m",
                self.pitch, self.window
            ));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return bad(format!("frame rate must be positive, got {}", self.frame_rate));
        }
        if !(self.saturation > ambient) {
            return bad(format!(
                "saturation threshold {} K must exceed ambient {} K",
                self.saturation, ambient
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        if let Some(c) = self.center {
            if !(c[0].is_finite() && c[1].is_finite()) {
                return bad("window center must be finite".to_string());
            }
        }
        Ok(())
    }

    /// Pixels per window side.
    pub fn pixels_per_side(&self) -> usize {
        (self.window / self.pitch).round() as usize
    }
}

/// One camera frame: a time stamp, the window's corner in the camera plane,
/// and the pixel grid (row-major; `None` = no temperature).
#[derive(Debug, Clone, PartialEq)]
pub struct IRFrame {
    pub time: F,
    /// Camera-plane position of the window corner; pixel `(r, c)` is
    /// centered at `origin + ((c + ½)·pitch, (r + ½)·pitch)`.
    pub origin: [F; 2],
    pub pixels: Vec<Option<F>>,
}

/// A time-ordered stack of equally shaped frames.
#[derive(Debug, Clone, PartialEq)]
pub struct IRFrameStack {
    pub rows: usize,
    pub cols: usize,
    /// Pixel pitch shared by every frame, m.
    pub pitch: F,
    pub frames: Vec<IRFrame>,
}

impl IRFrameStack {
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Camera-plane center of a pixel.
    pub fn pixel_center(&self, frame: &IRFrame, row: usize, col: usize) -> [F; 2] {
        [
            frame.origin[0] + (col as F + 0.5) * self.pitch,
            frame.origin[1] + (row as F + 0.5) * self.pitch,
        ]
    }

    /// Number of pixels carrying a temperature, over all frames.
    pub fn valid_count(&self) -> usize {
        self.frames.iter().map(|f| f.pixels.iter().flatten().count()).sum()
    }
}

/// Render synthetic camera frames from solver snapshots.
///
/// The frame clock starts at the first snapshot and ticks at the spec's
/// frame rate for as long as snapshots last; every tick must land on a
/// snapshot time (the field must be stored at least as often as the camera
/// frames). Each frame samples the field's top plane bilinearly on the
/// window grid — centered on the laser spot, or on `spec.center` when set —
/// masks pixels outside the stored field or above the saturation threshold,
/// then adds seeded Gaussian noise to the surviving pixels in row-major
/// order, one stream across the whole stack.
pub fn gen_synthetic_ir(
    snapshots: &[FieldSnapshot],
    laser: &LaserSpec<F>,
    spec: &IRWindowSpec,
    ambient: F,
) -> Result<IRFrameStack, IrError> {
    spec.validate(ambient)?;
    if snapshots.is_empty() {
        return Err(IrError::BadSpec("no snapshots to sample".to_string()));
    }
    if snapshots.windows(2).any(|w| w[1].time <= w[0].time) {
        return Err(IrError::BadSpec("snapshot times must be strictly increasing".to_string()));
    }
    if snapshots[0].dims[0] < 2 || snapshots[0].dims[1] < 2 {
        return Err(IrError::Unsupported(
            "the field has no camera plane (needs at least 2 nodes along x and y)".to_string(),
        ));
    }

    let n = spec.pixels_per_side();
    let t_first = snapshots[0].time;
    let t_last = snapshots[snapshots.len() - 1].time;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).expect("validated sigma"))
    } else {
        None
    };

    let mut frames = Vec::new();
    for k in 0.. {
        let t = t_first + k as F / spec.frame_rate;
        if t > t_last + REL_TOL * t_last.max(1.0) {
            break;
        }
        let snap = snapshots
            .iter()
            .find(|s| (s.time - t).abs() <= REL_TOL * t.max(1.0))
            .ok_or(IrError::MissingSnapshot { time: t })?;
        let center = match spec.center {
            Some(c) => c,
            None => {
                let state = laser_center(t, laser, t_last)?;
                [state.pos[0], state.pos[1]]
            }
        };
        let origin = [center[0] - spec.window / 2.0, center[1] - spec.window / 2.0];
        let mut pixels = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let u = origin[0] + (c as F + 0.5) * spec.pitch;
                let v = origin[1] + (r as F + 0.5) * spec.pitch;
                // Saturation acts on the clean sample; noise comes after.
                let clean = sample_plane(snap, u, v).filter(|&temp| temp <= spec.saturation);
                pixels.push(clean);
            }
        }
        if let Some(normal) = &noise {
            for p in pixels.iter_mut().flatten() {
                *p += normal.sample(&mut rng);
            }
        }
        frames.push(IRFrame { time: t, origin, pixels });
    }
    Ok(IRFrameStack { rows: n, cols: n, pitch: spec.pitch, frames })
}

/// Bilinear sample of a snapshot's top plane at camera coordinates
/// `(u, v) = (x, y)`. `None` outside the stored node rectangle.
fn sample_plane(snap: &FieldSnapshot, u: F, v: F) -> Option<F> {
    let k = snap.dims[2] - 1;
    let nx = snap.dims[0];
    let ny = snap.dims[1];
    let mut fx = (u - snap.origin[0]) / snap.spacing[0];
    let mut fy = (v - snap.origin[1]) / snap.spacing[1];
    let slack = REL_TOL * (nx.max(ny) as F);
    if fx < 0.0 && fx > -slack {
        fx = 0.0;
    }
    if fy < 0.0 && fy > -slack {
        fy = 0.0;
    }
    if !(0.0..=(nx - 1) as F + slack).contains(&fx) || !(0.0..=(ny - 1) as F + slack).contains(&fy)
    {
        return None;
    }
    let i0 = (fx as usize).min(nx - 2);
    let j0 = (fy as usize).min(ny - 2);
    let tx = fx - i0 as F;
    let ty = fy - j0 as F;
    let t00 = snap.temp_at(i0, j0, k);
    let t10 = snap.temp_at(i0 + 1, j0, k);
    let t01 = snap.temp_at(i0, j0 + 1, k);
    let t11 = snap.temp_at(i0 + 1, j0 + 1, k);
    Some((1.0 - ty) * ((1.0 - tx) * t00 + tx * t10) + ty * ((1.0 - tx) * t01 + tx * t11))
}

/// Pixel rectangle kept by [`crop_downsample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Crop every frame to `crop`, then average `factor`×`factor` pixel blocks.
///
/// A block's output is the mean of its pixels that carry a temperature;
/// a block with none stays masked — absence is preserved, never filled in.
/// On fully valid frames block averaging is mean-preserving. The output
/// pitch is `factor` times the input pitch and origins shift to the crop
/// corner, so pixel centers keep their camera-plane positions.
pub fn crop_downsample(
    stack: &IRFrameStack,
    crop: CropRect,
    factor: usize,
) -> Result<IRFrameStack, IrError> {
    if factor == 0 {
        return Err(IrError::BadCrop("down-sample factor must be at least 1".to_string()));
    }
    if crop.rows == 0 || crop.cols == 0 {
        return Err(IrError::BadCrop("crop must keep at least one pixel".to_string()));
    }
    if crop.row0 + crop.rows > stack.rows || crop.col0 + crop.cols > stack.cols {
        return Err(IrError::BadCrop(format!(
            "crop {}+{} x {}+{} exceeds the {}x{} frame",
            crop.row0, crop.rows, crop.col0, crop.cols, stack.rows, stack.cols
        )));
    }
    if crop.rows % factor != 0 || crop.cols % factor != 0 {
        return Err(IrError::BadCrop(format!(
            "factor {} must divide the cropped {}x{} shape",
            factor, crop.rows, crop.cols
        )));
    }

    let out_rows = crop.rows / factor;
    let out_cols = crop.cols / factor;
    let frames = stack
        .frames
        .iter()
        .map(|frame| {
            let mut pixels = Vec::with_capacity(out_rows * out_cols);
            for br in 0..out_rows {
                for bc in 0..out_cols {
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for dr in 0..factor {
                        for dc in 0..factor {
                            let r = crop.row0 + br * factor + dr;
                            let c = crop.col0 + bc * factor + dc;
                            if let Some(temp) = frame.pixels[stack.index(r, c)] {
                                sum += temp;
                                count += 1;
                            }
                        }
                    }
                    pixels.push((count > 0).then(|| sum / count as F));
                }
            }
            IRFrame {
                time: frame.time,
                origin: [
                    frame.origin[0] + crop.col0 as F * stack.pitch,
                    frame.origin[1] + crop.row0 as F * stack.pitch,
                ],
                pixels,
            }
        })
        .collect();
    Ok(IRFrameStack {
        rows: out_rows,
        cols: out_cols,
        pitch: stack.pitch * factor as F,
        frames,
    })
}

/// Read and preprocess a measured stack in one step.
pub fn ingest_ir(path: &Path, crop: CropRect, factor: usize) -> Result<IRFrameStack, IrError> {
    let stack = read_irstack(path)?;
    crop_downsample(&stack, crop, factor)
}

/// Maps camera-plane coordinates `(u, v)` into the simulation domain:
/// `x = anchor_x + u`, `y = anchor_y ± v` (minus when image rows run
/// downward, the usual camera convention), at a fixed third coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePlacement {
    /// Domain position of the camera plane's `(0, 0)`, m.
    pub anchor: [F; 2],
    /// Set when increasing image row means decreasing domain y.
    pub rows_run_down: bool,
    /// The plane's fixed out-of-plane coordinate, m (the lasered face height
    /// for a top view; 0 for a wall seen from the side).
    pub plane_z: F,
}

impl FramePlacement {
    pub fn position(&self, u: F, v: F) -> [F; 3] {
        let sign = if self.rows_run_down { -1.0 } else { 1.0 };
        [self.anchor[0] + u, self.anchor[1] + sign * v, self.plane_z]
    }
}

/// Turn every temperature-carrying pixel into a labelled data point.
///
/// `band`, when set, keeps only points whose domain `y` lies inside the
/// closed interval — a deliberate region-of-interest restriction that does
/// not count as data loss. Points placed outside the domain or the time
/// horizon are dropped and tallied in the returned count.
pub fn frames_to_data(
    stack: &IRFrameStack,
    placement: &FramePlacement,
    domain: &DomainSpec<F>,
    band: Option<[F; 2]>,
    weight: F,
) -> (Vec<DataPoint<F>>, usize) {
    let mut points = Vec::new();
    let mut dropped = 0usize;
    for frame in &stack.frames {
        let in_horizon =
            frame.time >= 0.0 && frame.time <= domain.t_end * (1.0 + REL_TOL);
        for r in 0..stack.rows {
            for c in 0..stack.cols {
                let Some(temp) = frame.pixels[stack.index(r, c)] else { continue };
                let [u, v] = stack.pixel_center(frame, r, c);
                let pos = placement.position(u, v);
                if let Some([lo, hi]) = band {
                    if pos[1] < lo || pos[1] > hi {
                        continue;
                    }
                }
                if !in_horizon || !contains(&domain.geometry, pos) {
                    dropped += 1;
                    continue;
                }
                points.push(DataPoint { pos, t: frame.time, temp, weight });
            }
        }
    }
    (points, dropped)
}

/// Whether a point lies inside the geometry, with relative edge slack.
fn contains(geometry: &Geometry<F>, pos: [F; 3]) -> bool {
    let inside = |x: F, len: F| x >= -REL_TOL * len && x <= len * (1.0 + REL_TOL);
    match *geometry {
        Geometry::Box3 { lx, ly, lz } => {
            inside(pos[0], lx) && inside(pos[1], ly) && inside(pos[2], lz)
        }
        Geometry::ThinWall { length, height, thickness, .. } => {
            inside(pos[0], length)
                && inside(pos[1], height)
                && pos[2].abs() <= thickness / 2.0 + REL_TOL * thickness
        }
        Geometry::Rod { length, .. } => {
            inside(pos[0], length) && pos[1].abs() <= 1e-12 && pos[2].abs() <= 1e-12
        }
    }
}

/// Write a stack as `IRSTACK v1` text: a header line
/// `IRSTACK v1, rows, cols, pitch_m, t0_s, dt_s`, then each frame as `rows`
/// lines of `cols` space-separated kelvin values, `NaN` marking pixels that
/// carry no temperature. Frame times must be uniformly spaced (the format
/// stores only `t0` and `dt`); window origins are not stored — placement is
/// supplied at ingestion.
pub fn write_irstack(stack: &IRFrameStack, path: &Path) -> Result<(), IrError> {
    if stack.frames.is_empty() {
        return Err(IrError::BadSpec("cannot write an empty stack".to_string()));
    }
    let t0 = stack.frames[0].time;
    let dt = if stack.frames.len() >= 2 { stack.frames[1].time - t0 } else { 0.0 };
    for (i, pair) in stack.frames.windows(2).enumerate() {
        let step = pair[1].time - pair[0].time;
        if (step - dt).abs() > REL_TOL * dt.abs().max(1e-12) {
            return Err(IrError::BadSpec(format!(
                "frame times are not uniform: step {} differs from {} at frame {}",
                step,
                dt,
                i + 1
            )));
        }
    }

    let mut text = format!(
        "IRSTACK v1, {}, {}, {}, {}, {}\n",
        stack.rows, stack.cols, stack.pitch, t0, dt
    );
    for frame in &stack.frames {
        for r in 0..stack.rows {
            for c in 0..stack.cols {
                if c > 0 {
                    text.push(' ');
                }
                match frame.pixels[stack.index(r, c)] {
                    Some(temp) => text.push_str(&format!("{temp}")),
                    None => text.push_str("NaN"),
                }
            }
            text.push('\n');
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Parse an `IRSTACK v1` file (see [`write_irstack`] for the layout). Blank
/// lines between frames are ignored. Errors carry the offending line number.
pub fn read_irstack(path: &Path) -> Result<IRFrameStack, IrError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or(IrError::Format { line: 1, what: "empty file".to_string() })?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    let head_err = |what: String| IrError::Format { line: 1, what };
    if fields.first() != Some(&"IRSTACK v1") {
        return Err(head_err(format!("expected 'IRSTACK v1' header, got '{header}'")));
    }
    if fields.len() != 6 {
        return Err(head_err(format!("header needs 6 comma-separated fields, got {}", fields.len())));
    }
    let rows: usize =
        fields[1].parse().map_err(|_| head_err(format!("bad row count '{}'", fields[1])))?;
    let cols: usize =
        fields[2].parse().map_err(|_| head_err(format!("bad column count '{}'", fields[2])))?;
    let pitch: F =
        fields[3].parse().map_err(|_| head_err(format!("bad pitch '{}'", fields[3])))?;
    let t0: F = fields[4].parse().map_err(|_| head_err(format!("bad t0 '{}'", fields[4])))?;
    let dt: F = fields[5].parse().map_err(|_| head_err(format!("bad dt '{}'", fields[5])))?;
    if rows == 0 || cols == 0 {
        return Err(head_err("frame shape must be at least 1x1".to_string()));
    }
    if !(pitch.is_finite() && pitch > 0.0) {
        return Err(head_err(format!("pitch must be positive, got {pitch}")));
    }
    if !t0.is_finite() || !dt.is_finite() || dt < 0.0 {
        return Err(head_err("t0 must be finite and dt non-negative".to_string()));
    }

    let mut frames: Vec<IRFrame> = Vec::new();
    let mut current: Vec<Option<F>> = Vec::new();
    let mut rows_read = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != cols {
            return Err(IrError::Format {
                line: line_no,
                what: format!("expected {} values, got {}", cols, tokens.len()),
            });
        }
        for token in tokens {
            let value: F = token.parse().map_err(|_| IrError::Format {
                line: line_no,
                what: format!("bad temperature '{token}'"),
            })?;
            if value.is_nan() {
                current.push(None);
            } else if value.is_finite() {
                current.push(Some(value));
            } else {
                return Err(IrError::Format {
                    line: line_no,
                    what: format!("non-finite temperature '{token}' (only NaN marks masked pixels)"),
                });
            }
        }
        rows_read += 1;
        if rows_read == rows {
            let k = frames.len();
            frames.push(IRFrame {
                time: t0 + k as F * dt,
                origin: [0.0, 0.0],
                pixels: std::mem::take(&mut current),
            });
            rows_read = 0;
        }
    }
    if rows_read != 0 {
        return Err(IrError::Format {
            line: text.lines().count(),
            what: format!("truncated frame: {rows_read} of {rows} rows"),
        });
    }
    if frames.is_empty() {
        return Err(IrError::Format { line: 1, what: "file holds no frames".to_string() });
    }
    if frames.len() >= 2 && dt <= 0.0 {
        return Err(head_err("dt must be positive for multi-frame stacks".to_string()));
    }
    Ok(IRFrameStack { rows, cols, pitch, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdm::{solve, GridSpec, Integrator};
    use crate::physics::{PhysicalParams, PropertyModel, Segment};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Single-layer plane field over [0,lx]×[0,ly] with the given node grid.
    fn plane_snapshot(lx: F, ly: F, nx: usize, ny: usize, temp: impl Fn(F, F) -> F) -> FieldSnapshot {
        let hx = lx / (nx - 1) as F;
        let hy = ly / (ny - 1) as F;
        let mut temps = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                temps.push(temp(i as F * hx, j as F * hy));
            }
        }
        FieldSnapshot {
            time: 0.0,
            origin: [0.0, 0.0, 0.0],
            spacing: [hx, hy, 0.0],
            dims: [nx, ny, 1],
            temps,
            undershoot: false,
        }
    }

    fn parked_laser() -> LaserSpec<f64> {
        LaserSpec { power: 0.0, beam_radius: 1.5e-3, segments: vec![], dwell: 0.0 }
    }

    fn static_spec(center: [F; 2]) -> IRWindowSpec {
        IRWindowSpec { center: Some(center), ..IRWindowSpec::default() }
    }

    #[test]
    fn window_spec_validation_rejects_bad_fields() {
        let ok = IRWindowSpec::default();
        assert!(ok.validate(298.0).is_ok());
        assert_eq!(ok.pixels_per_side(), 24);
        let cases = [
            IRWindowSpec { pitch: 0.26e-3, ..ok },     // does not divide 6 mm
            IRWindowSpec { pitch: -1.0, ..ok },
            IRWindowSpec { window: 0.0, ..ok },
            IRWindowSpec { frame_rate: 0.0, ..ok },
            IRWindowSpec { saturation: 298.0, ..ok },  // not above ambient
            IRWindowSpec { noise_sigma: -5.0, ..ok },
            IRWindowSpec { center: Some([f64::NAN, 0.0]), ..ok },
        ];
        for bad in cases {
            assert!(matches!(bad.validate(298.0), Err(IrError::BadSpec(_))), "{bad:?}");
        }
    }

    #[test]
    fn uniform_field_gives_unmasked_pixels_with_the_requested_noise() {
        let snap = plane_snapshot(0.03, 0.03, 31, 31, |_, _| 298.0);
        let spec = IRWindowSpec { seed: 5, ..static_spec([0.015, 0.015]) };
        let stack = gen_synthetic_ir(&[snap], &parked_laser(), &spec, 298.0).unwrap();
        assert_eq!((stack.rows, stack.cols), (24, 24));
        assert_eq!(stack.frames.len(), 1);
        assert_eq!(stack.valid_count(), 576);

        let values: Vec<f64> = stack.frames[0].pixels.iter().flatten().copied().collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (values.len() - 1) as f64;
        // 576 draws of N(0, 100²): the sample mean stays within ~5 standard
        // errors (100/24 ≈ 4.2 K) and the sample sigma within ~5 of its own
        // standard error (≈ 3 K).
        assert!((mean - 298.0).abs() < 21.0, "mean {mean}");
        let sigma = var.sqrt();
        assert!((85.0..115.0).contains(&sigma), "sigma {sigma}");
    }

    #[test]
    fn zero_sigma_reproduces_a_linear_field_exactly() {
        // Bilinear interpolation is exact on fields linear in x and y.
        let snap = plane_snapshot(0.03, 0.03, 31, 31, |x, y| 300.0 + 1.0e4 * x + 2.0e4 * y);
        let spec = IRWindowSpec {
            noise_sigma: 0.0,
            saturation: 5000.0,
            ..static_spec([0.015, 0.015])
        };
        let stack = gen_synthetic_ir(&[snap], &parked_laser(), &spec, 298.0).unwrap();
        let frame = &stack.frames[0];
        for r in 0..stack.rows {
            for c in 0..stack.cols {
                let [u, v] = stack.pixel_center(frame, r, c);
                let expected = 300.0 + 1.0e4 * u + 2.0e4 * v;
                let got = frame.pixels[stack.index(r, c)].unwrap();
                assert_relative_eq!(got, expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn hot_spot_pixels_are_removed_not_clamped() {
        // One 2500 K node exactly under one pixel center, grid spacing equal
        // to the pitch: that single pixel samples 2500 K and is removed;
        // every neighbor lands on a 400 K node and survives.
        let nx = 121; // 30 mm at 0.25 mm spacing
        let hot = [0.015, 0.015];
        let snap = plane_snapshot(0.03, 0.03, nx, nx, |x, y| {
            if (x - hot[0]).abs() < 1e-7 && (y - hot[1]).abs() < 1e-7 {
                2500.0
            } else {
                400.0
            }
        });
        // Window corner at 11.875 mm puts pixel centers on grid nodes.
        let spec = IRWindowSpec {
            noise_sigma: 0.0,
            ..static_spec([0.015 - 0.125e-3, 0.015 - 0.125e-3])
        };
        let stack = gen_synthetic_ir(&[snap], &parked_laser(), &spec, 298.0).unwrap();
        let masked: Vec<usize> = (0..576)
            .filter(|&i| stack.frames[0].pixels[i].is_none())
            .collect();
        assert_eq!(masked.len(), 1);
        // The hot node sits at the window center: pixel (12, 12).
        assert_eq!(masked[0], stack.index(12, 12));
    }

    #[test]
    fn saturation_is_decided_before_noise() {
        // A 1990 K field with 100 K read noise: many noisy pixels exceed
        // 2000 K, yet none are masked, because the detector saturates on the
        // clean radiance, not on the noise.
        let snap = plane_snapshot(0.03, 0.03, 31, 31, |_, _| 1990.0);
        let spec = IRWindowSpec { seed: 9, ..static_spec([0.015, 0.015]) };
        let stack = gen_synthetic_ir(&[snap], &parked_laser(), &spec, 298.0).unwrap();
        assert_eq!(stack.valid_count(), 576);
        let over: usize = stack.frames[0]
            .pixels
            .iter()
            .flatten()
            .filter(|&&v| v > 2000.0)
            .count();
        assert!(over > 100, "noise should push many pixels past 2000 K, got {over}");
    }

    #[test]
    fn the_noise_stream_is_a_pure_function_of_the_seed() {
        let snap = plane_snapshot(0.03, 0.03, 31, 31, |x, _| 400.0 + 1e3 * x);
        let spec = IRWindowSpec { seed: 42, ..static_spec([0.015, 0.015]) };
        let a = gen_synthetic_ir(&[snap.clone()], &parked_laser(), &spec, 298.0).unwrap();
        let b = gen_synthetic_ir(&[snap.clone()], &parked_laser(), &spec, 298.0).unwrap();
        assert_eq!(a, b);
        let other = IRWindowSpec { seed: 43, ..spec };
        let c = gen_synthetic_ir(&[snap], &parked_laser(), &other, 298.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pixels_outside_the_stored_field_are_masked() {
        // Window centered 2 mm from the corner of a 30 mm plane: pixel
        // centers at u < 0 or v < 0 fall outside. The window corner is at
        // −1 mm, so columns 0–3 (centers −0.875…−0.125 mm) are outside:
        // 24² − 20² = 176 masked pixels.
        let snap = plane_snapshot(0.03, 0.03, 31, 31, |_, _| 500.0);
        let spec = IRWindowSpec { noise_sigma: 0.0, ..static_spec([0.002, 0.002]) };
        let stack = gen_synthetic_ir(&[snap], &parked_laser(), &spec, 298.0).unwrap();
        assert_eq!(stack.valid_count(), 400);
        let frame = &stack.frames[0];
        assert!(frame.pixels[stack.index(0, 0)].is_none());
        assert!(frame.pixels[stack.index(4, 4)].is_some());
    }

    #[test]
    fn frames_tick_at_the_requested_rate_and_follow_the_laser() {
        let mut snaps = Vec::new();
        for k in 0..5 {
            let mut s = plane_snapshot(0.03, 0.03, 31, 31, |_, _| 350.0);
            s.time = k as f64 * 0.05; // 20 Hz field cadence
            snaps.push(s);
        }
        let laser = LaserSpec {
            power: 100.0,
            beam_radius: 1.5e-3,
            segments: vec![Segment {
                from: [0.005, 0.015, 0.0],
                to: [0.025, 0.015, 0.0],
                speed: 0.1,
                power_on: true,
            }],
            dwell: 0.0,
        };
        let spec = IRWindowSpec { noise_sigma: 0.0, ..IRWindowSpec::default() };
        let stack = gen_synthetic_ir(&snaps, &laser, &spec, 298.0).unwrap();
        // 10 Hz camera over 0.2 s of field: frames at 0, 0.1, 0.2.
        assert_eq!(stack.frames.len(), 3);
        for (k, frame) in stack.frames.iter().enumerate() {
            let t = k as f64 * 0.1;
            assert_relative_eq!(frame.time, t, epsilon = 1e-12);
            let state = laser_center(t, &laser, 0.2).unwrap();
            assert_relative_eq!(frame.origin[0], state.pos[0] - 3e-3, epsilon = 1e-12);
            assert_relative_eq!(frame.origin[1], state.pos[1] - 3e-3, epsilon = 1e-12);
        }
    }

    #[test]
    fn a_frame_time_without_a_snapshot_is_an_error() {
        let mut snaps = Vec::new();
        for k in 0..3 {
            let mut s = plane_snapshot(0.03, 0.03, 31, 31, |_, _| 350.0);
            s.time = k as f64 * 0.15; // 6.67 Hz cadence cannot feed 10 Hz frames
            snaps.push(s);
        }
        let spec = static_spec([0.015, 0.015]);
        match gen_synthetic_ir(&snaps, &parked_laser(), &spec, 298.0) {
            Err(IrError::MissingSnapshot { time }) => assert_relative_eq!(time, 0.1),
            other => panic!("expected MissingSnapshot, got {other:?}"),
        }
    }

    #[test]
    fn irstack_files_round_trip() {
        let snap0 = plane_snapshot(0.03, 0.03, 31, 31, |x, y| 300.0 + 2e4 * x + 1e4 * y);
        let mut snap1 = plane_snapshot(0.03, 0.03, 31, 31, |x, y| 320.0 + 2e4 * x + 1e4 * y);
        snap1.time = 0.1;
        // Saturate the far corner so the file carries real NaN pixels.
        let spec = IRWindowSpec {
            seed: 3,
            saturation: 800.0,
            ..static_spec([0.015, 0.015])
        };
        let stack =
            gen_synthetic_ir(&[snap0, snap1], &parked_laser(), &spec, 298.0).unwrap();
        assert!(stack.valid_count() < 2 * 576, "some pixels should saturate");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.irstack");
        write_irstack(&stack, &path).unwrap();
        let back = read_irstack(&path).unwrap();
        assert_eq!((back.rows, back.cols), (stack.rows, stack.cols));
        assert_eq!(back.pitch, stack.pitch);
        assert_eq!(back.frames.len(), stack.frames.len());
        for (a, b) in stack.frames.iter().zip(&back.frames) {
            assert_relative_eq!(a.time, b.time, epsilon = 1e-12);
            assert_eq!(a.pixels, b.pixels); // shortest-repr floats are exact
        }
    }

    #[test]
    fn malformed_stack_files_fail_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, text: &str| {
            let p = dir.path().join(name);
            fs::write(&p, text).unwrap();
            p
        };
        let bad_header = write("h.irstack", "IRSTACK v2, 2, 2, 0.001, 0, 0.1\n1 2\n3 4\n");
        assert!(matches!(
            read_irstack(&bad_header),
            Err(IrError::Format { line: 1, .. })
        ));
        let short_row = write("r.irstack", "IRSTACK v1, 2, 3, 0.001, 0, 0.1\n1 2 3\n4 5\n");
        assert!(matches!(read_irstack(&short_row), Err(IrError::Format { line: 3, .. })));
        let truncated = write("t.irstack", "IRSTACK v1, 2, 2, 0.001, 0, 0.1\n1 2\n3 4\n5 6\n");
        assert!(matches!(read_irstack(&truncated), Err(IrError::Format { .. })));
        let bad_value = write("v.irstack", "IRSTACK v1, 1, 2, 0.001, 0, 0.1\n1 oops\n");
        assert!(matches!(read_irstack(&bad_value), Err(IrError::Format { line: 2, .. })));
        let inf_value = write("i.irstack", "IRSTACK v1, 1, 2, 0.001, 0, 0.1\n1 inf\n");
        assert!(matches!(read_irstack(&inf_value), Err(IrError::Format { line: 2, .. })));
    }

    fn hand_stack(rows: usize, cols: usize, pixels: Vec<Option<f64>>) -> IRFrameStack {
        IRFrameStack {
            rows,
            cols,
            pitch: 1e-3,
            frames: vec![IRFrame { time: 0.0, origin: [0.0, 0.0], pixels }],
        }
    }

    #[test]
    fn block_averaging_respects_masks() {
        // 4×4 → factor 2: top blocks fully valid, bottom-left fully masked,
        // bottom-right fully valid.
        //   1  2 |  3  4          (1+2+5+6)/4 = 3.5   (3+4+7+8)/4 = 5.5
        //   5  6 |  7  8    →
        //   --------------        masked              (11+12+15+16)/4 = 13.5
        //   ×  × | 11 12
        //   ×  × | 15 16
        let pixels = vec![
            Some(1.0), Some(2.0), Some(3.0), Some(4.0),
            Some(5.0), Some(6.0), Some(7.0), Some(8.0),
            None, None, Some(11.0), Some(12.0),
            None, None, Some(15.0), Some(16.0),
        ];
        let stack = hand_stack(4, 4, pixels);
        let out = crop_downsample(&stack, CropRect { row0: 0, col0: 0, rows: 4, cols: 4 }, 2)
            .unwrap();
        assert_eq!((out.rows, out.cols), (2, 2));
        assert_eq!(out.pitch, 2e-3);
        let f = &out.frames[0];
        assert_eq!(f.pixels, vec![Some(3.5), Some(5.5), None, Some(13.5)]);
    }

    #[test]
    fn partial_blocks_average_the_surviving_pixels() {
        let pixels = vec![Some(10.0), None, None, Some(30.0)];
        let stack = hand_stack(2, 2, pixels);
        let out = crop_downsample(&stack, CropRect { row0: 0, col0: 0, rows: 2, cols: 2 }, 2)
            .unwrap();
        assert_eq!(out.frames[0].pixels, vec![Some(20.0)]);
    }

    #[test]
    fn identity_crop_is_the_identity() {
        let pixels: Vec<Option<f64>> = (0..12).map(|i| Some(i as f64)).collect();
        let stack = hand_stack(3, 4, pixels.clone());
        let out = crop_downsample(&stack, CropRect { row0: 0, col0: 0, rows: 3, cols: 4 }, 1)
            .unwrap();
        assert_eq!(out, stack);
    }

    #[test]
    fn cropping_shifts_the_origin_and_keeps_values() {
        let pixels: Vec<Option<f64>> = (0..48).map(|i| Some(i as f64)).collect(); // 6×8, v = 8r+c
        let stack = hand_stack(6, 8, pixels);
        let out = crop_downsample(&stack, CropRect { row0: 1, col0: 2, rows: 4, cols: 4 }, 1)
            .unwrap();
        assert_eq!((out.rows, out.cols), (4, 4));
        assert_eq!(out.frames[0].origin, [2e-3, 1e-3]);
        assert_eq!(out.frames[0].pixels[0], Some(10.0)); // row 1, col 2
        assert_eq!(out.frames[0].pixels[15], Some(37.0)); // row 4, col 5
        // The same physical pixel keeps its camera-plane center.
        assert_eq!(
            out.pixel_center(&out.frames[0], 0, 0),
            stack.pixel_center(&stack.frames[0], 1, 2)
        );
    }

    #[test]
    fn camera_class_reductions_produce_the_documented_shapes() {
        let full: Vec<Option<f64>> = vec![Some(700.0); 480 * 640];
        let stack = hand_stack(480, 640, full);
        let coarse = crop_downsample(
            &stack,
            CropRect { row0: 0, col0: 0, rows: 480, cols: 640 },
            8,
        )
        .unwrap();
        assert_eq!((coarse.rows, coarse.cols), (60, 80));
        assert!(coarse.frames[0].pixels.iter().all(|p| *p == Some(700.0)));

        let windowed = crop_downsample(
            &stack,
            CropRect { row0: 0, col0: 160, rows: 480, cols: 320 },
            8,
        )
        .unwrap();
        assert_eq!((windowed.rows, windowed.cols), (60, 40));
    }

    #[test]
    fn bad_crops_are_rejected() {
        let stack = hand_stack(4, 4, vec![Some(1.0); 16]);
        let cases = [
            (CropRect { row0: 0, col0: 0, rows: 4, cols: 4 }, 0),  // factor 0
            (CropRect { row0: 0, col0: 0, rows: 0, cols: 4 }, 1),  // empty crop
            (CropRect { row0: 2, col0: 0, rows: 4, cols: 4 }, 1),  // exceeds frame
            (CropRect { row0: 0, col0: 0, rows: 4, cols: 4 }, 3),  // 3 ∤ 4
        ];
        for (crop, factor) in cases {
            assert!(
                matches!(crop_downsample(&stack, crop, factor), Err(IrError::BadCrop(_))),
                "{crop:?} factor {factor}"
            );
        }
    }

    proptest! {
        /// On fully valid frames, block averaging preserves the mean of the
        /// cropped region exactly up to floating-point association.
        #[test]
        fn block_averaging_is_mean_preserving(
            values in proptest::collection::vec(200.0f64..2000.0, 64),
            factor in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)],
        ) {
            let stack = hand_stack(8, 8, values.iter().copied().map(Some).collect());
            let out = crop_downsample(
                &stack,
                CropRect { row0: 0, col0: 0, rows: 8, cols: 8 },
                factor,
            ).unwrap();
            let mean_in: f64 = values.iter().sum::<f64>() / 64.0;
            let outs: Vec<f64> = out.frames[0].pixels.iter().flatten().copied().collect();
            let mean_out: f64 = outs.iter().sum::<f64>() / outs.len() as f64;
            prop_assert!((mean_in - mean_out).abs() <= 1e-12 * mean_in.abs());
        }
    }

    #[test]
    fn pixels_become_weighted_data_points_and_leavers_are_counted() {
        // 20×10 mm wall; 6 mm window whose top rows map above the wall.
        let domain = DomainSpec {
            geometry: Geometry::ThinWall {
                length: 0.020,
                height: 0.010,
                thickness: 2e-3,
                k_sub: 173.0,
                substrate_height: 0.05,
                top_edge: crate::physics::TopEdge::DataOnly,
            },
            t_end: 2.0,
        };
        let snap = plane_snapshot(0.020, 0.010, 41, 21, |_, y| 300.0 + 2e4 * y);
        let spec = IRWindowSpec { noise_sigma: 0.0, ..static_spec([0.010, 0.009]) };
        let stack = gen_synthetic_ir(&[snap], &parked_laser(), &spec, 298.0).unwrap();
        // Window v-span is 6 mm centered at 9 mm: rows with centers above
        // 10 mm were already masked at sampling (no stored field there), so
        // nothing maps outside the wall.
        let placement = FramePlacement { anchor: [0.0, 0.0], rows_run_down: false, plane_z: 0.0 };
        let (points, dropped) = frames_to_data(&stack, &placement, &domain, None, 2.0);
        assert_eq!(dropped, 0);
        assert_eq!(points.len(), stack.valid_count());
        assert!(points.iter().all(|p| p.weight == 2.0 && p.t == 0.0));
        // Values carry the sampled field: T = 300 + 2e4·y.
        for p in &points {
            assert_relative_eq!(p.temp, 300.0 + 2e4 * p.pos[1], epsilon = 1e-9);
        }

        // A placement shifted 4 mm upward pushes the top window rows past
        // the wall crest: those points are dropped and counted.
        let shifted = FramePlacement { anchor: [0.0, 4e-3], ..placement };
        let (kept, dropped) = frames_to_data(&stack, &shifted, &domain, None, 1.0);
        assert!(dropped > 0);
        assert_eq!(kept.len() + dropped, stack.valid_count());
        assert!(kept.iter().all(|p| p.pos[1] <= 0.010 + 1e-9));
    }

    #[test]
    fn band_filter_restricts_without_counting_as_dropped() {
        let domain = DomainSpec {
            geometry: Geometry::ThinWall {
                length: 0.020,
                height: 0.010,
                thickness: 2e-3,
                k_sub: 173.0,
                substrate_height: 0.05,
                top_edge: crate::physics::TopEdge::DataOnly,
            },
            t_end: 2.0,
        };
        let snap = plane_snapshot(0.020, 0.010, 41, 21, |_, _| 600.0);
        let spec = IRWindowSpec { noise_sigma: 0.0, ..static_spec([0.010, 0.005]) };
        let stack = gen_synthetic_ir(&[snap], &parked_laser(), &spec, 298.0).unwrap();
        let placement = FramePlacement { anchor: [0.0, 0.0], rows_run_down: false, plane_z: 0.0 };
        let (all, dropped_all) = frames_to_data(&stack, &placement, &domain, None, 1.0);
        assert_eq!(dropped_all, 0);
        // The window spans v ∈ [2, 8] mm symmetric about 5 mm; keeping the
        // upper half [5, 8] mm keeps exactly half the rows.
        let (half, dropped_half) =
            frames_to_data(&stack, &placement, &domain, Some([0.005, 0.008]), 1.0);
        assert_eq!(dropped_half, 0);
        assert_eq!(half.len(), all.len() / 2);
        assert!(half.iter().all(|p| p.pos[1] >= 0.005 && p.pos[1] <= 0.008));
    }

    #[test]
    fn fully_masked_stacks_produce_no_data() {
        let stack = hand_stack(3, 3, vec![None; 9]);
        let domain = DomainSpec {
            geometry: Geometry::Box3 { lx: 0.03, ly: 0.03, lz: 0.006 },
            t_end: 1.0,
        };
        let placement = FramePlacement { anchor: [0.0, 0.0], rows_run_down: false, plane_z: 0.006 };
        let (points, dropped) = frames_to_data(&stack, &placement, &domain, None, 1.0);
        assert!(points.is_empty());
        assert_eq!(dropped, 0);
    }

    #[test]
    fn synthetic_frames_round_trip_to_solver_node_values() {
        // Solve a small plate, image its top face with pixel centers landing
        // exactly on solver nodes (pitch 1 mm on a 0.5 mm grid), and convert
        // back to data: each point reproduces the solver's node temperature.
        let domain = DomainSpec {
            geometry: Geometry::Box3 { lx: 0.008, ly: 0.008, lz: 0.002 },
            t_end: 0.1,
        };
        let phys = PhysicalParams {
            rho: 8000.0,
            cp: PropertyModel::Constant(500.0),
            k: PropertyModel::Constant(20.0),
            h: 0.0,
            emissivity: 0.0,
            absorptivity: 0.4,
            t0: 298.0,
        };
        let laser = LaserSpec {
            power: 150.0,
            beam_radius: 1.5e-3,
            segments: vec![Segment {
                from: [0.002, 0.004, 0.002],
                to: [0.006, 0.004, 0.002],
                speed: 0.04,
                power_on: true,
            }],
            dwell: 0.0,
        };
        let grid = GridSpec::uniform(5e-4, 5e-3, Integrator::CrankNicolson);
        let out = solve(&domain, &phys, &laser, &grid, 2).unwrap(); // 100 Hz snapshots
        let spec = IRWindowSpec {
            window: 6e-3,
            pitch: 1e-3,
            frame_rate: 10.0,
            saturation: 5000.0,
            noise_sigma: 0.0,
            seed: 0,
            center: Some([0.004, 0.004]),
        };
        let stack = gen_synthetic_ir(&out.snapshots, &laser, &spec, 298.0).unwrap();
        assert_eq!(stack.frames.len(), 2); // t = 0 and t = 0.1
        let placement = FramePlacement { anchor: [0.0, 0.0], rows_run_down: false, plane_z: 0.002 };
        let (points, dropped) = frames_to_data(&stack, &placement, &domain, None, 1.0);
        assert_eq!(dropped, 0);
        assert_eq!(points.len(), 2 * 36);
        let top = out.snapshots.last().unwrap();
        let k_top = top.dims[2] - 1;
        for p in points.iter().filter(|p| p.t > 0.05) {
            let i = (p.pos[0] / 5e-4).round() as usize;
            let j = (p.pos[1] / 5e-4).round() as usize;
            assert_relative_eq!(p.temp, top.temp_at(i, j, k_top), max_relative = 1e-9);
        }
        // The beam actually warmed the imaged face.
        assert!(points.iter().any(|p| p.temp > 350.0));
    }

    #[test]
    fn rod_fields_cannot_feed_a_camera() {
        let snap = FieldSnapshot {
            time: 0.0,
            origin: [0.0, 0.0, 0.0],
            spacing: [1e-3, 0.0, 0.0],
            dims: [11, 1, 1],
            temps: vec![298.0; 11],
            undershoot: false,
        };
        let spec = static_spec([0.005, 0.0]);
        assert!(matches!(
            gen_synthetic_ir(&[snap], &parked_laser(), &spec, 298.0),
            Err(IrError::Unsupported(_))
        ));
    }

    #[test]
    fn writing_non_uniform_times_is_rejected() {
        let mut stack = hand_stack(1, 1, vec![Some(300.0)]);
        stack.frames.push(IRFrame { time: 0.1, origin: [0.0, 0.0], pixels: vec![Some(301.0)] });
        stack.frames.push(IRFrame { time: 0.35, origin: [0.0, 0.0], pixels: vec![Some(302.0)] });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.irstack");
        assert!(matches!(write_irstack(&stack, &path), Err(IrError::BadSpec(_))));
    }
}
