//! Adam training loop over a physics-informed loss.
//!
//! [`train`] drives [`engine::loss_and_gradient`] for a fixed number of
//! epochs, records an evaluation history on a fixed cadence, and stops
//! early — returning everything computed so far — if the loss stays above a
//! divergence threshold for too many consecutive evaluations. Full-batch
//! gradients are the default; optional mini-batching draws a seeded
//! subsample of every point category each epoch.
//!
//! Runs are deterministic: the same problem, starting parameters, collocation
//! set, and config produce bit-identical trajectories regardless of worker
//! count or point order. Optimizer moments travel in checkpoints, so a run
//! resumed from its saved state continues the exact trajectory of an
//! uninterrupted run.

mod adam;
mod engine;

pub use adam::{adam_step, AdamParams, AdamState};
pub use engine::{loss_and_gradient, GradientOutput};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::loss::{LossBreakdown, LossError, LossProblem};
use crate::network::checkpoint::OptMoments;
use crate::network::{MuName, NetworkParams};
use crate::sampling::{CollocationSet, DataPoint};
use crate::F;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient component {index} entering optimizer step {step}")]
    NonFiniteGradient { index: usize, step: u64 },
    #[error("optimizer state sized for {expected} parameters, got {got}")]
    StateShape { expected: usize, got: usize },
    #[error("total loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Training-loop settings. Loss weights live on the [`LossProblem`] and
/// μ trainability on the parameter set itself, so this config only carries
/// what the loop needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of optimizer steps.
    pub epochs: usize,
    pub adam: AdamParams,
    /// Seed for mini-batch selection (unused in full-batch runs).
    pub seed: u64,
    /// Record an evaluation every this many epochs (plus epochs 0 and last).
    pub eval_every: usize,
    /// Per-category point budget per step; `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Total loss above this value marks an evaluation as divergent.
    pub divergence_threshold: F,
    /// Consecutive divergent evaluations that end the run.
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50_000,
            adam: AdamParams::default(),
            seed: 0,
            eval_every: 100,
            batch_size: None,
            divergence_threshold: 1e6,
            divergence_patience: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(what.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1 when set");
        }
        if !(self.divergence_threshold.is_finite() && self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be finite and positive");
        }
        if self.divergence_patience == 0 {
            return bad("divergence_patience must be at least 1");
        }
        self.adam.validate()
    }
}

/// One evaluation snapshot: the full-set loss breakdown, optional accuracy
/// against a held-out field, and the physical μ values at that epoch.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub epoch: usize,
    pub loss: LossBreakdown<F>,
    /// Mean squared field error over the validation set, normalized by the
    /// squared temperature scale.
    pub nmse: Option<F>,
    /// Root-mean-square field error in kelvin.
    pub rmse_kelvin: Option<F>,
    /// Physical values of every named physics parameter, in μ order.
    pub mu: Vec<(MuName, F)>,
}

/// Why a run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    /// All epochs ran.
    Completed,
    /// The divergence guard tripped at this epoch with this total loss.
    Diverged { epoch: usize, total: F },
    /// A non-finite loss or gradient appeared at this epoch. Parameters,
    /// moments, and history up to the last good state are preserved; the
    /// failed step itself mutated nothing.
    Aborted { epoch: usize, what: String },
}

/// Final parameters, resumable optimizer state, and the evaluation history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams<F>,
    pub moments: OptMoments,
    pub history: Vec<EvalRecord>,
    pub stop: StopReason,
}

/// Whether a training error is a mid-run numerical failure (worth stopping
/// gracefully for, with history preserved) rather than a broken setup.
fn numerical_abort(err: &TrainError) -> Option<String> {
    match err {
        TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => {
            Some(err.to_string())
        }
        TrainError::Loss(inner @ LossError::NonFinite { .. }) => Some(inner.to_string()),
        _ => None,
    }
}

/// Optimize `init` against `problem` over `colloc`.
///
/// Evaluations (loss over the full collocation set, plus field metrics when
/// `validation` is given) are recorded at epoch 0, every
/// `cfg.eval_every` epochs, and at the final epoch. Pass the moments of a
/// loaded checkpoint as `resume` to continue a previous run: its first
/// recorded loss then equals the previous run's last recorded loss exactly,
/// and the combined trajectory matches a single uninterrupted run.
///
/// A non-finite loss or gradient *before* the first step is an error — the
/// setup itself is broken. The same failure mid-run ends the run gracefully
/// with [`StopReason::Aborted`] instead, so everything computed up to the
/// last good step (parameters, moments, history) survives the crash.
pub fn train(
    problem: &LossProblem<F>,
    init: NetworkParams<F>,
    colloc: &CollocationSet<F>,
    cfg: &TrainConfig,
    resume: Option<OptMoments>,
    validation: Option<&[DataPoint<F>]>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut params = init;
    let mut flat = params.flat();
    let mut state = match resume {
        Some(moments) => AdamState::from_moments(moments, flat.len())?,
        None => AdamState::new(flat.len()),
    };

    let mut history: Vec<EvalRecord> = Vec::new();
    let mut divergent_run = 0usize;
    let record = |params: &NetworkParams<F>,
                      epoch: usize,
                      history: &mut Vec<EvalRecord>,
                      divergent_run: &mut usize|
     -> Result<Option<StopReason>, TrainError> {
        let rec = eval_record(problem, params, colloc, validation, epoch)?;
        let total = rec.loss.total;
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        if total > cfg.divergence_threshold {
            *divergent_run += 1;
        } else {
            *divergent_run = 0;
        }
        history.push(rec);
        if *divergent_run >= cfg.divergence_patience {
            return Ok(Some(StopReason::Diverged { epoch, total }));
        }
        Ok(None)
    };

    if let Some(stop) = record(&params, 0, &mut history, &mut divergent_run)? {
        return Ok(TrainOutcome { params, moments: state.to_moments(), history, stop });
    }

    for epoch in 1..=cfg.epochs {
        let stepped = (|| -> Result<(), TrainError> {
            let out = match cfg.batch_size {
                None => loss_and_gradient(problem, &params, colloc)?,
                Some(n) => {
                    let batch = sample_batch(colloc, n, cfg.seed, epoch as u64);
                    loss_and_gradient(problem, &params, &batch)?
                }
            };
            adam_step(&mut state, &cfg.adam, &mut flat, &out.grad)
        })();
        if let Err(err) = stepped {
            // A failed step mutates neither parameters nor moments, so the
            // returned state is the last good one.
            let Some(what) = numerical_abort(&err) else { return Err(err) };
            let stop = StopReason::Aborted { epoch, what };
            return Ok(TrainOutcome { params, moments: state.to_moments(), history, stop });
        }
        params.set_flat(&flat);

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            match record(&params, epoch, &mut history, &mut divergent_run) {
                Ok(Some(stop)) => {
                    return Ok(TrainOutcome {
                        params,
                        moments: state.to_moments(),
                        history,
                        stop,
                    })
                }
                Ok(None) => {}
                Err(err) => {
                    let Some(what) = numerical_abort(&err) else { return Err(err) };
                    let stop = StopReason::Aborted { epoch, what };
                    return Ok(TrainOutcome {
                        params,
                        moments: state.to_moments(),
                        history,
                        stop,
                    });
                }
            }
        }
    }
    Ok(TrainOutcome {
        params,
        moments: state.to_moments(),
        history,
        stop: StopReason::Completed,
    })
}

fn eval_record(
    problem: &LossProblem<F>,
    params: &NetworkParams<F>,
    colloc: &CollocationSet<F>,
    validation: Option<&[DataPoint<F>]>,
    epoch: usize,
) -> Result<EvalRecord, TrainError> {
    let loss = problem.assemble(params, colloc)?;
    let (nmse, rmse_kelvin) = match validation {
        Some(points) if !points.is_empty() => {
            let (nmse, rmse) = problem.field_metrics(params, points)?;
            (Some(nmse), Some(rmse))
        }
        _ => (None, None),
    };
    let mu = params.mu.entries().iter().map(|e| (e.name, e.physical())).collect();
    Ok(EvalRecord { epoch, loss, nmse, rmse_kelvin, mu })
}

/// Seeded per-epoch subsample of every category, capped at `n` points each.
/// Selection is a pure function of (seed, epoch), so batched runs are as
/// reproducible as full-batch ones.
fn sample_batch(colloc: &CollocationSet<F>, n: usize, seed: u64, epoch: u64) -> CollocationSet<F> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    fn pick<T: Copy>(rng: &mut ChaCha12Rng, points: &[T], n: usize) -> Vec<T> {
        let k = n.min(points.len());
        rand::seq::index::sample(rng, points.len(), k).into_iter().map(|i| points[i]).collect()
    }
    CollocationSet {
        interior: pick(&mut rng, &colloc.interior, n),
        boundary: pick(&mut rng, &colloc.boundary, n),
        initial: pick(&mut rng, &colloc.initial, n),
        data: pick(&mut rng, &colloc.data, n),
        warnings: Vec::new(),
    }
}
