//! Physics-informed surrogate modeling of moving-laser heat conduction.
//!
//! A small fully connected network learns the temperature field of a
//! laser-heated part directly from the governing heat equation: automatic
//! differentiation supplies the space-time derivatives entering the PDE
//! residual, and the same machinery exposes gradients with respect to both
//! network weights and named physical parameters (absorptivity, heat
//! capacity, conductivity, …), so unknown material/process parameters can be
//! identified jointly with the field from sparse sensor data. A classical
//! finite-difference solver ships alongside as the reference: it generates
//! training/validation data and adjudicates accuracy.
//!
//! Numerical kernels are generic over the scalar type via [`scalar::Real`];
//! concrete code uses the crate-level alias [`F`].
//!
//! Organization:
//! - [`scalar`]: scalar abstractions ([`scalar::Real`], [`scalar::Value`])
//!   and stable softplus/sigmoid helpers.
//! - [`autodiff`]: second-order forward duals, a reverse-mode tape, and the
//!   combined forward-over-reverse evaluators.
//! - [`network`]: the MLP (init/forward/flat layout), fused gradient
//!   kernels, and the binary checkpoint format.
//! - [`scaling`]: affine maps between physical coordinates/temperatures and
//!   the network's nondimensional ones, including derivative chain factors.
//! - [`physics`]: material/process parameters, laser kinematics, domain
//!   geometry, and the PDE/boundary residual kernels.
//! - [`sampling`]: collocation grids (boundary with laser-tracking
//!   refinement, two-band interior, initial) and seeded data subsampling.
//! - [`loss`]: the nondimensionalized four-term training loss (boundary,
//!   initial, interior residual, data) and its deterministic assembly.
//! - [`fdm`]: the finite-difference reference solver (explicit Euler and
//!   Crank–Nicolson) and dataset export.
//! - [`trainer`]: the Adam loop over the loss — fused loss+gradient
//!   evaluation, evaluation history, divergence guard, checkpoint resume.
//! - [`ir`]: thermal-camera frame stacks — synthetic generation with
//!   saturation masking and read noise, the `IRSTACK v1` text format,
//!   mask-aware crop/down-sampling, and conversion to labelled data points.
//! - [`io`]: deterministic plain-text exchange — snapshot CSV, dataset CSV,
//!   history CSV, metrics JSON.

pub mod autodiff;
pub mod cli;
pub mod fdm;
pub mod io;
pub mod ir;
pub mod loss;
pub mod network;
pub mod physics;
pub mod sampling;
pub mod scalar;
pub mod scaling;
pub mod trainer;

/// The scalar type used by all concrete (non-generic) code paths.
pub type F = f64;

pub use autodiff::{DerivativeBundle, TapeNet};
pub use fdm::{FieldSnapshot, GridSpec, Integrator};
pub use ir::{FramePlacement, IRFrameStack, IRWindowSpec};
pub use loss::{LossBreakdown, LossProblem, LossWeights};
pub use network::{MuName, NetworkParams, NetworkSpec};
pub use physics::{DomainSpec, Geometry, LaserSpec, PhysicalParams};
pub use scalar::{Real, Value};
pub use scaling::ScalingSpec;
pub use trainer::{train, StopReason, TrainConfig, TrainOutcome};
