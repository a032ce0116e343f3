//! Binary checkpoint format for network parameters, μ entries, and optional
//! optimizer moments.
//!
//! Layout (all integers little-endian, all floats little-endian `f64`):
//!
//! ```text
//! magic      8 bytes   "PINNCKPT"
//! version    u32       currently 1
//! input_dim  u32
//! n_hidden   u32, then n_hidden × u32 widths
//! seed       u64
//! per layer: rows u32, cols u32, rows·cols weights (row-major), rows biases
//! n_mu       u32
//! per entry: name_len u32, name bytes (UTF-8), trainable u8, raw f64
//! has_opt    u8; if 1: step u64, flat_len × f64 first moments,
//!                       flat_len × f64 second moments
//! ```
//!
//! μ entries store the *unconstrained* raw value so a round trip is
//! bit-exact; the physical value is `softplus(raw)`. Saving and loading are
//! defined for `f64` parameters — the precision of the format itself.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{MuEntry, MuName, MuSet, NetworkParams, NetworkSpec};

const MAGIC: &[u8; 8] = b"PINNCKPT";
const VERSION: u32 = 1;

/// Optimizer moments carried inside a checkpoint (Adam state over the flat
/// parameter vector: θ then μ raws).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptMoments {
    /// Number of optimizer steps already taken.
    pub step: u64,
    /// First-moment estimates.
    pub m: Vec<f64>,
    /// Second-moment estimates.
    pub v: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (supported: {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("{0} trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serialize parameters (and optional optimizer state) to `path`.
pub fn save_checkpoint(
    params: &NetworkParams<f64>,
    opt: Option<&OptMoments>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let spec = &params.spec;
    buf.extend_from_slice(&u32::try_from(spec.input_dim).unwrap().to_le_bytes());
    buf.extend_from_slice(&u32::try_from(spec.hidden.len()).unwrap().to_le_bytes());
    for &w in &spec.hidden {
        buf.extend_from_slice(&u32::try_from(w).unwrap().to_le_bytes());
    }
    buf.extend_from_slice(&spec.seed.to_le_bytes());
    let mut off = 0;
    for (rows, cols) in spec.layer_dims() {
        buf.extend_from_slice(&u32::try_from(rows).unwrap().to_le_bytes());
        buf.extend_from_slice(&u32::try_from(cols).unwrap().to_le_bytes());
        for &v in &params.theta[off..off + rows * cols + rows] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        off += rows * cols + rows;
    }
    buf.extend_from_slice(&u32::try_from(params.mu.len()).unwrap().to_le_bytes());
    for e in params.mu.entries() {
        let name = e.name.as_str().as_bytes();
        buf.extend_from_slice(&u32::try_from(name.len()).unwrap().to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(u8::from(e.trainable));
        buf.extend_from_slice(&e.raw.to_le_bytes());
    }
    match opt {
        None => buf.push(0),
        Some(o) => {
            let n = params.flat_len();
            if o.m.len() != n || o.v.len() != n {
                return Err(CheckpointError::Malformed(format!(
                    "optimizer moments sized {}/{}, parameters sized {n}",
                    o.m.len(),
                    o.v.len()
                )));
            }
            buf.push(1);
            buf.extend_from_slice(&o.step.to_le_bytes());
            for &v in o.m.iter().chain(o.v.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated { context });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, context)?[0])
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn f64(&mut self, context: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, context: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(8 * n, context)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Deserialize a checkpoint. The architecture is reconstructed from the
/// stored spec table and cross-checked against the per-layer shape headers.
pub fn load_checkpoint(path: &Path) -> Result<(NetworkParams<f64>, Option<OptMoments>), CheckpointError> {
    let data = fs::read(path)?;
    let mut r = Reader { buf: &data, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let input_dim = r.u32("input_dim")? as usize;
    let n_hidden = r.u32("hidden layer count")? as usize;
    if n_hidden > 1024 {
        return Err(CheckpointError::Malformed(format!("implausible hidden layer count {n_hidden}")));
    }
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(r.u32("hidden width")? as usize);
    }
    let seed = r.u64("seed")?;
    let spec = NetworkSpec::new(input_dim, hidden, seed)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut theta = Vec::with_capacity(spec.theta_len());
    for (l, (rows, cols)) in spec.layer_dims().into_iter().enumerate() {
        let fr = r.u32("layer rows")? as usize;
        let fc = r.u32("layer cols")? as usize;
        if (fr, fc) != (rows, cols) {
            return Err(CheckpointError::Malformed(format!(
                "layer {l} shape ({fr}×{fc}) disagrees with spec table ({rows}×{cols})"
            )));
        }
        theta.extend(r.f64s(rows * cols + rows, "layer parameters")?);
    }
    let n_mu = r.u32("mu count")? as usize;
    if n_mu > 64 {
        return Err(CheckpointError::Malformed(format!("implausible mu count {n_mu}")));
    }
    let mut mu = MuSet::empty();
    for _ in 0..n_mu {
        let len = r.u32("mu name length")? as usize;
        if len > 64 {
            return Err(CheckpointError::Malformed(format!("implausible mu name length {len}")));
        }
        let raw_name = r.take(len, "mu name")?;
        let name_str = std::str::from_utf8(raw_name)
            .map_err(|_| CheckpointError::Malformed("mu name is not UTF-8".into()))?;
        let name = MuName::parse(name_str)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown mu parameter {name_str:?}")))?;
        let trainable = match r.u8("mu trainable flag")? {
            0 => false,
            1 => true,
            other => {
                return Err(CheckpointError::Malformed(format!("mu trainable flag {other} (want 0/1)")))
            }
        };
        let raw = r.f64("mu value")?;
        mu.push_raw(MuEntry { name, raw, trainable })
            .map_err(CheckpointError::Malformed)?;
    }
    let params = NetworkParams { spec, theta, mu };
    let opt = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let n = params.flat_len();
            let m = r.f64s(n, "first moments")?;
            let v = r.f64s(n, "second moments")?;
            Some(OptMoments { step, m, v })
        }
        other => return Err(CheckpointError::Malformed(format!("optimizer flag {other} (want 0/1)"))),
    };
    if r.pos != data.len() {
        return Err(CheckpointError::TrailingBytes(data.len() - r.pos));
    }
    Ok((params, opt))
}
