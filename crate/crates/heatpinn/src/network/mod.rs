//! The surrogate network: a fully connected multilayer perceptron with tanh
//! hidden layers and a softplus output, mapping scaled space-time coordinates
//! to a normalized temperature `u > 0`.
//!
//! Parameters live in one flat `Vec` (weights row-major, then biases, layer
//! by layer) so the optimizer, the checkpoint format, and the tape all agree
//! on a single ordering. Named physics parameters (`μ`) ride along after the
//! network weights; they are stored *unconstrained* and pass through a
//! softplus map wherever a physical (strictly positive) value is needed.

pub mod checkpoint;
pub mod grad;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::scalar::{softplus, softplus_inv, Real, Value};

/// Errors from network construction and evaluation.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("input vector has length {got}, network expects {expected}")]
    InputLen { expected: usize, got: usize },
}

/// Architecture description. Hidden layers use tanh; the output neuron uses
/// softplus so the predicted normalized temperature is strictly positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// Number of inputs: spatial dimensions + 1 (time). 2, 3, or 4.
    pub input_dim: usize,
    /// Hidden layer widths, e.g. `[64, 64, 64]`.
    pub hidden: Vec<usize>,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, seed: u64) -> Result<Self, NetError> {
        let spec = NetworkSpec { input_dim, hidden, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !(2..=4).contains(&self.input_dim) {
            return Err(NetError::BadSpec(format!(
                "input_dim must be 2, 3, or 4 (spatial dims + time), got {}",
                self.input_dim
            )));
        }
        if self.hidden.is_empty() {
            return Err(NetError::BadSpec("at least one hidden layer required".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(NetError::BadSpec("hidden layer width 0".into()));
        }
        Ok(())
    }

    /// `(rows, cols)` of each weight matrix, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden {
            dims.push((w, fan_in));
            fan_in = w;
        }
        dims.push((1, fan_in));
        dims
    }

    /// Total number of weights + biases.
    pub fn theta_len(&self) -> usize {
        self.layer_dims().iter().map(|&(r, c)| r * c + r).sum()
    }

    /// Widest layer (sizing for evaluation buffers).
    pub fn max_width(&self) -> usize {
        self.hidden.iter().copied().max().unwrap_or(1).max(self.input_dim)
    }
}

/// Named physics parameters that can be optimized jointly with the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MuName {
    /// Laser absorptivity η.
    Eta,
    /// Specific heat capacity (constant model), J/(kg·K).
    Cp,
    /// Thermal conductivity (constant model), W/(m·K).
    K,
    /// Convection coefficient, W/(m²·K).
    H,
    /// Surface emissivity ε.
    Epsilon,
}

impl MuName {
    pub fn as_str(self) -> &'static str {
        match self {
            MuName::Eta => "eta",
            MuName::Cp => "cp",
            MuName::K => "k",
            MuName::H => "h",
            MuName::Epsilon => "epsilon",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "eta" => MuName::Eta,
            "cp" => MuName::Cp,
            "k" => MuName::K,
            "h" => MuName::H,
            "epsilon" => MuName::Epsilon,
            _ => return None,
        })
    }
}

/// One named physics parameter. `raw` is unconstrained; the physical value is
/// `softplus(raw)`, which keeps optimization free of bound handling while the
/// physical value stays strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuEntry<T> {
    pub name: MuName,
    pub raw: T,
    pub trainable: bool,
}

impl<T: Real> MuEntry<T> {
    pub fn physical(&self) -> T {
        softplus(self.raw)
    }
}

/// Ordered set of μ entries. Order is insertion order and is part of the
/// flat-parameter layout, so it must be deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MuSet<T> {
    entries: Vec<MuEntry<T>>,
}

impl<T: Real> MuSet<T> {
    pub fn empty() -> Self {
        MuSet { entries: Vec::new() }
    }

    /// Insert (or overwrite) an entry with the given *physical* initial value.
    pub fn set(&mut self, name: MuName, physical: T, trainable: bool) {
        let raw = softplus_inv(physical);
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => {
                e.raw = raw;
                e.trainable = trainable;
            }
            None => self.entries.push(MuEntry { name, raw, trainable }),
        }
    }

    /// Insert a pre-built entry (raw value already unconstrained), e.g. when
    /// reloading from a checkpoint. Rejects duplicate names so the flat
    /// parameter layout stays unambiguous.
    pub fn push_raw(&mut self, entry: MuEntry<T>) -> Result<(), String> {
        if self.entries.iter().any(|e| e.name == entry.name) {
            return Err(format!("duplicate mu parameter {:?}", entry.name.as_str()));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: MuName) -> Option<&MuEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[MuEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [MuEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A concrete set of network parameters plus any named physics parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub spec: NetworkSpec,
    /// Flat weights and biases: per layer, `rows*cols` weights (row-major),
    /// then `rows` biases.
    pub theta: Vec<T>,
    pub mu: MuSet<T>,
}

impl<T: Real> NetworkParams<T> {
    /// Glorot-uniform weight initialization (zero biases), reproducible from
    /// the spec's seed. Weights are drawn row-major layer by layer, so the
    /// stream of draws — and therefore the parameters — is a pure function of
    /// the seed and architecture.
    pub fn init(spec: &NetworkSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let mut theta = Vec::with_capacity(spec.theta_len());
        for (rows, cols) in spec.layer_dims() {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for _ in 0..rows * cols {
                theta.push(T::of(rng.random_range(-limit..=limit)));
            }
            theta.extend(std::iter::repeat_n(T::zero(), rows));
        }
        Ok(NetworkParams { spec: spec.clone(), theta, mu: MuSet::empty() })
    }

    /// Weight and bias slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let dims = self.spec.layer_dims();
        let mut off = 0;
        for (i, &(r, c)) in dims.iter().enumerate() {
            if i == l {
                return (&self.theta[off..off + r * c], &self.theta[off + r * c..off + r * c + r]);
            }
            off += r * c + r;
        }
        panic!("layer index {l} out of range");
    }

    /// Total flat length: θ followed by μ raw values.
    pub fn flat_len(&self) -> usize {
        self.theta.len() + self.mu.len()
    }

    /// Copy the full flat parameter vector (θ then μ raws).
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.flat_len());
        out.extend_from_slice(&self.theta);
        out.extend(self.mu.entries().iter().map(|e| e.raw));
        out
    }

    /// Overwrite parameters from a flat vector laid out as [`Self::flat`].
    pub fn set_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.flat_len(), "flat parameter length mismatch");
        let nt = self.theta.len();
        self.theta.copy_from_slice(&flat[..nt]);
        for (e, &raw) in self.mu.entries_mut().iter_mut().zip(&flat[nt..]) {
            e.raw = raw;
        }
    }

    /// Plain forward evaluation, `u(x̂) > 0`.
    pub fn forward(&self, input: &[T]) -> Result<T, NetError> {
        if input.len() != self.spec.input_dim {
            return Err(NetError::InputLen { expected: self.spec.input_dim, got: input.len() });
        }
        let lifted: Vec<T> = input.to_vec();
        Ok(forward_generic(&self.spec, &self.theta, &lifted))
    }
}

/// Forward pass with parameters and inputs lifted into any [`Value`] type.
/// This is the reference path: plain floats for evaluation, tape variables
/// for parameter gradients, duals-over-tape for gradients of derivatives.
/// The trainer's hot loop uses the specialized kernels in [`grad`] instead;
/// tests pin the two paths together.
///
/// `theta` must be the flat layout of [`NetworkParams`]; `input` must have
/// `spec.input_dim` entries on the same tape/context as `theta`.
pub fn forward_generic<V: Value>(spec: &NetworkSpec, theta: &[V], input: &[V]) -> V {
    assert_eq!(input.len(), spec.input_dim, "input length mismatch");
    assert_eq!(theta.len(), spec.theta_len(), "theta length mismatch");
    let dims = spec.layer_dims();
    let n_layers = dims.len();
    let mut cur: Vec<V> = input.to_vec();
    let mut next: Vec<V> = Vec::new();
    let mut off = 0;
    for (l, &(rows, cols)) in dims.iter().enumerate() {
        next.clear();
        for j in 0..rows {
            let mut acc = theta[off + rows * cols + j]; // bias
            for (i, &x) in cur.iter().enumerate() {
                acc = acc + theta[off + j * cols + i] * x;
            }
            next.push(if l + 1 == n_layers { acc.softplus() } else { acc.tanh() });
        }
        std::mem::swap(&mut cur, &mut next);
        off += rows * cols + rows;
    }
    cur[0]
}
