//! Plain-text exchange formats around the solver and trainer: field-snapshot
//! CSV, labelled-dataset CSV (`x,y,z,t,T`), training-history CSV, and the
//! run-metrics JSON summary.
//!
//! All writers are deterministic — same values, same bytes — so outputs can
//! be diffed across runs. Snapshot and history files print floats in their
//! shortest round-trip form; dataset records use 17 significant digits as a
//! fixed-width interchange convention. Both forms reproduce every `f64`
//! bit-exactly on read. Readers are strict and anchor every complaint to a
//! 1-based line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fdm::FieldSnapshot;
use crate::loss::LossBreakdown;
use crate::sampling::DataPoint;
use crate::trainer::EvalRecord;
use crate::F;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {what}")]
    Format { line: usize, what: String },
    #[error("cannot write: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fail(line: usize, what: impl Into<String>) -> IoError {
    IoError::Format { line, what: what.into() }
}

fn parse_f(token: &str, line: usize, what: &str) -> Result<F, IoError> {
    let v: F = token
        .trim()
        .parse()
        .map_err(|_| fail(line, format!("bad {what} '{}'", token.trim())))?;
    if !v.is_finite() {
        return Err(fail(line, format!("{what} must be finite, got '{}'", token.trim())));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Field-snapshot CSV
// ---------------------------------------------------------------------------

/// Write one temperature field:
///
/// ```text
/// time,0.5
/// origin,0,0,0
/// spacing,0.001,0.001,0
/// dims,31,31,1
/// undershoot,0
/// temps
/// 300,301,…        ← dims[0] values per line, dims[1]·dims[2] lines,
/// …                  x fastest then y then z
/// ```
pub fn write_snapshot_csv(snap: &FieldSnapshot, path: &Path) -> Result<(), IoError> {
    if snap.temps.len() != snap.dims[0] * snap.dims[1] * snap.dims[2] {
        return Err(IoError::Invalid(format!(
            "snapshot holds {} temperatures but dims say {}×{}×{}",
            snap.temps.len(),
            snap.dims[0],
            snap.dims[1],
            snap.dims[2]
        )));
    }
    let mut text = String::new();
    writeln!(text, "time,{}", snap.time).unwrap();
    writeln!(text, "origin,{},{},{}", snap.origin[0], snap.origin[1], snap.origin[2]).unwrap();
    writeln!(text, "spacing,{},{},{}", snap.spacing[0], snap.spacing[1], snap.spacing[2])
        .unwrap();
    writeln!(text, "dims,{},{},{}", snap.dims[0], snap.dims[1], snap.dims[2]).unwrap();
    writeln!(text, "undershoot,{}", u8::from(snap.undershoot)).unwrap();
    writeln!(text, "temps").unwrap();
    for row in snap.temps.chunks(snap.dims[0]) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                text.push(',');
            }
            write!(text, "{v}").unwrap();
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Parse a snapshot written by [`write_snapshot_csv`]. Strict: keys must
/// appear in writing order and the temperature block must hold exactly
/// `dims[1]·dims[2]` lines of `dims[0]` values.
pub fn read_snapshot_csv(path: &Path) -> Result<FieldSnapshot, IoError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut keyed = |key: &str| -> Result<(usize, Vec<String>), IoError> {
        let (line, l) = lines.next().ok_or_else(|| {
            fail(text.lines().count() + 1, format!("missing '{key}' line"))
        })?;
        let mut parts = l.split(',');
        let head = parts.next().unwrap_or("");
        if head != key {
            return Err(fail(line, format!("expected '{key}', found '{head}'")));
        }
        Ok((line, parts.map(str::to_string).collect()))
    };

    let (line, v) = keyed("time")?;
    if v.len() != 1 {
        return Err(fail(line, "time takes exactly one value"));
    }
    let time = parse_f(&v[0], line, "time")?;

    let triple = |key: &'static str,
                      keyed: &mut dyn FnMut(&str) -> Result<(usize, Vec<String>), IoError>|
     -> Result<(usize, [String; 3]), IoError> {
        let (line, v) = keyed(key)?;
        if v.len() != 3 {
            return Err(fail(line, format!("{key} takes exactly three values")));
        }
        Ok((line, [v[0].clone(), v[1].clone(), v[2].clone()]))
    };

    let (line, o) = triple("origin", &mut keyed)?;
    let origin = [
        parse_f(&o[0], line, "origin")?,
        parse_f(&o[1], line, "origin")?,
        parse_f(&o[2], line, "origin")?,
    ];
    let (line, s) = triple("spacing", &mut keyed)?;
    let spacing = [
        parse_f(&s[0], line, "spacing")?,
        parse_f(&s[1], line, "spacing")?,
        parse_f(&s[2], line, "spacing")?,
    ];
    let (line, d) = triple("dims", &mut keyed)?;
    let mut dims = [0usize; 3];
    for (slot, token) in dims.iter_mut().zip(&d) {
        *slot = token
            .trim()
            .parse()
            .map_err(|_| fail(line, format!("bad dimension '{}'", token.trim())))?;
        if *slot == 0 {
            return Err(fail(line, "dimensions must be at least 1"));
        }
    }

    let (line, u) = keyed("undershoot")?;
    if u.len() != 1 {
        return Err(fail(line, "undershoot takes exactly one value"));
    }
    let undershoot = match u[0].trim() {
        "0" => false,
        "1" => true,
        other => return Err(fail(line, format!("undershoot must be 0 or 1, got '{other}'"))),
    };

    let (line, rest) = keyed("temps")?;
    if !rest.is_empty() {
        return Err(fail(line, "'temps' line takes no values"));
    }

    let n = dims[0] * dims[1] * dims[2];
    let mut temps = Vec::with_capacity(n);
    for _ in 0..dims[1] * dims[2] {
        let (line, l) = lines
            .next()
            .ok_or_else(|| fail(text.lines().count() + 1, "temperature block is truncated"))?;
        let row: Vec<&str> = l.split(',').collect();
        if row.len() != dims[0] {
            return Err(fail(line, format!("expected {} values, got {}", dims[0], row.len())));
        }
        for token in row {
            temps.push(parse_f(token, line, "temperature")?);
        }
    }
    if let Some((line, l)) = lines.next() {
        if !l.trim().is_empty() {
            return Err(fail(line, "trailing content after the temperature block"));
        }
    }
    Ok(FieldSnapshot { time, origin, spacing, dims, temps, undershoot })
}

// ---------------------------------------------------------------------------
// Labelled-dataset CSV
// ---------------------------------------------------------------------------

/// Write labelled points as `x,y,z,t,T` records in SI units, one per line
/// after the header, every value at 17 significant digits.
pub fn write_dataset_csv(points: &[DataPoint<F>], path: &Path) -> Result<(), IoError> {
    let mut text = String::from("x,y,z,t,T\n");
    for p in points {
        writeln!(
            text,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            p.pos[0], p.pos[1], p.pos[2], p.t, p.temp
        )
        .unwrap();
    }
    fs::write(path, text)?;
    Ok(())
}

/// Parse an `x,y,z,t,T` dataset. Weights are not part of the interchange
/// format; every point comes back with weight 1.
pub fn read_dataset_csv(path: &Path) -> Result<Vec<DataPoint<F>>, IoError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, "x,y,z,t,T")) => {}
        Some((line, other)) => {
            return Err(fail(line, format!("expected header 'x,y,z,t,T', found '{other}'")))
        }
        None => return Err(fail(1, "empty dataset file")),
    }
    let mut points = Vec::new();
    for (line, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = l.split(',').collect();
        if cols.len() != 5 {
            return Err(fail(line, format!("expected 5 columns, got {}", cols.len())));
        }
        points.push(DataPoint {
            pos: [
                parse_f(cols[0], line, "x")?,
                parse_f(cols[1], line, "y")?,
                parse_f(cols[2], line, "z")?,
            ],
            t: parse_f(cols[3], line, "t")?,
            temp: parse_f(cols[4], line, "T")?,
            weight: 1.0,
        });
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Training-history CSV
// ---------------------------------------------------------------------------

/// Write the evaluation history: one row per record with the four loss
/// terms, the weighted total, field metrics when present (empty cells
/// otherwise), and one `mu_<name>` column per physics parameter. An empty
/// history writes the base header alone (a run that trained nothing).
pub fn write_history_csv(history: &[EvalRecord], path: &Path) -> Result<(), IoError> {
    let mut text = String::from(
        "epoch,loss_boundary,loss_initial,loss_residual,loss_data,loss_total,nmse,rmse_kelvin",
    );
    let mu_names: Vec<_> = history.first().map(|r| r.mu.clone()).unwrap_or_default();
    for (name, _) in &mu_names {
        write!(text, ",mu_{}", name.as_str()).unwrap();
    }
    text.push('\n');
    for rec in history {
        if rec.mu.len() != mu_names.len() {
            return Err(IoError::Invalid(format!(
                "record at epoch {} tracks {} physics parameters, the first tracks {}",
                rec.epoch,
                rec.mu.len(),
                mu_names.len()
            )));
        }
        write!(
            text,
            "{},{},{},{},{},{}",
            rec.epoch,
            rec.loss.boundary,
            rec.loss.initial,
            rec.loss.residual,
            rec.loss.data,
            rec.loss.total
        )
        .unwrap();
        match rec.nmse {
            Some(v) => write!(text, ",{v}").unwrap(),
            None => text.push(','),
        }
        match rec.rmse_kelvin {
            Some(v) => write!(text, ",{v}").unwrap(),
            None => text.push(','),
        }
        for (_, v) in &rec.mu {
            write!(text, ",{v}").unwrap();
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Run-metrics JSON
// ---------------------------------------------------------------------------

/// The four loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub boundary: F,
    pub initial: F,
    pub residual: F,
    pub data: F,
    pub total: F,
}

impl From<&LossBreakdown<F>> for LossTerms {
    fn from(b: &LossBreakdown<F>) -> Self {
        LossTerms {
            boundary: b.boundary,
            initial: b.initial,
            residual: b.residual,
            data: b.data,
            total: b.total,
        }
    }
}

/// Machine-readable summary of one run. Serialization is deterministic
/// (μ values sit in a sorted map), so two runs of the same seeded config
/// produce byte-identical files except for `wall_seconds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: String,
    pub seed: u64,
    /// Last epoch that ran (0 for a run that only evaluated).
    pub epochs: usize,
    /// `"completed"`, or `"diverged at epoch N"`.
    pub stopped: String,
    pub loss: LossTerms,
    pub nmse: Option<F>,
    pub rmse_kelvin: Option<F>,
    /// Physical μ values by name.
    pub mu: BTreeMap<String, F>,
    pub wall_seconds: F,
}

pub fn write_metrics_json(metrics: &RunMetrics, path: &Path) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(metrics)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_metrics_json(path: &Path) -> Result<RunMetrics, IoError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
