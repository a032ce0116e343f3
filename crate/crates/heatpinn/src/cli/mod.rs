//! Command-line entry point: argument parsing, run orchestration, artifact
//! writing, and the process exit-code contract.
//!
//! Every run mode follows the same shape: parse and resolve the config,
//! create the output directory, write the resolved config copy *first* (so
//! even a failed run can be reproduced), do the work, then write `history.csv`
//! and `metrics.json`. Exit codes separate the three ways a run can fail:
//!
//! * **2** — the inputs are wrong: bad flags, a malformed or inconsistent
//!   config, malformed data files, a checkpoint that does not fit the run.
//! * **3** — the numerics failed mid-run: a diverged or aborted training
//!   loop, a non-finite reference solve. Artifacts produced up to the
//!   failure (history, checkpoint, metrics) are still written.
//! * **4** — the operating system got in the way: missing files,
//!   unreadable/unwritable paths.

pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::fdm::{self, FdmError};
use crate::io::{self, IoError, LossTerms, RunMetrics};
use crate::ir::{self, CropRect, IrError};
use crate::loss::{LossError, LossProblem};
use crate::network::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::network::{NetError, NetworkParams, NetworkSpec};
use crate::physics::PhysicsError;
use crate::sampling::{subsample_data, CollocationSet, DataPoint, SampleError};
use crate::trainer::{train, StopReason, TrainError};
use crate::F;

use config::{ConfigError, Mode, Overrides, RunConfig};

// ---------------------------------------------------------------------------
// Failure classification
// ---------------------------------------------------------------------------

/// A run failure, classified by what the user must fix.
#[derive(Debug)]
enum RunFailure {
    /// Exit 2: the config or an input file is wrong.
    Config(String),
    /// Exit 3: the numerics failed mid-run.
    Numerical(String),
    /// Exit 4: a file could not be read or written.
    Io(String),
}

impl RunFailure {
    fn code(&self) -> u8 {
        match self {
            RunFailure::Config(_) => 2,
            RunFailure::Numerical(_) => 3,
            RunFailure::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            RunFailure::Config(m) | RunFailure::Numerical(m) | RunFailure::Io(m) => m,
        }
    }
}

impl From<ConfigError> for RunFailure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(io) => RunFailure::Io(io.to_string()),
            other => RunFailure::Config(other.to_string()),
        }
    }
}

impl From<IoError> for RunFailure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io(io) => RunFailure::Io(io.to_string()),
            other => RunFailure::Config(other.to_string()),
        }
    }
}

impl From<IrError> for RunFailure {
    fn from(e: IrError) -> Self {
        match e {
            IrError::Io(io) => RunFailure::Io(io.to_string()),
            other => RunFailure::Config(other.to_string()),
        }
    }
}

impl From<CheckpointError> for RunFailure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => RunFailure::Io(io.to_string()),
            other => RunFailure::Config(other.to_string()),
        }
    }
}

impl From<FdmError> for RunFailure {
    fn from(e: FdmError) -> Self {
        match e {
            FdmError::NonFinite { .. } | FdmError::NoConvergence { .. } => {
                RunFailure::Numerical(e.to_string())
            }
            other => RunFailure::Config(other.to_string()),
        }
    }
}

impl From<LossError> for RunFailure {
    fn from(e: LossError) -> Self {
        match e {
            LossError::NonFinite { .. } => RunFailure::Numerical(e.to_string()),
            other => RunFailure::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for RunFailure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => {
                RunFailure::Numerical(e.to_string())
            }
            TrainError::Loss(inner) => RunFailure::from(inner),
            other => RunFailure::Config(other.to_string()),
        }
    }
}

impl From<SampleError> for RunFailure {
    fn from(e: SampleError) -> Self {
        RunFailure::Config(e.to_string())
    }
}

impl From<PhysicsError> for RunFailure {
    fn from(e: PhysicsError) -> Self {
        RunFailure::Config(e.to_string())
    }
}

impl From<NetError> for RunFailure {
    fn from(e: NetError) -> Self {
        RunFailure::Config(e.to_string())
    }
}

/// Tags an OS-level error with the path it concerned.
fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> RunFailure + '_ {
    move |e| RunFailure::Io(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Argument grammar
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "heatpinn",
    version,
    about = "Physics-informed thermal modeling for laser-based manufacturing",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every run mode. Each one overrides its config-file
/// counterpart.
#[derive(Args)]
struct RunArgs {
    /// Run configuration file.
    config: PathBuf,
    /// Random seed; overrides [run] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel loss/gradient evaluation (default: all cores).
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Checkpoint to resume from; overrides [training] warm-start.
    #[arg(long, value_name = "PATH")]
    warm_start: Option<PathBuf>,
    /// Output directory; overrides [run] out.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Epoch budget; overrides [training] epochs.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the heat equation on a grid and export field snapshots.
    Reference(RunArgs),
    /// Train a network to reproduce the temperature field.
    Forward(RunArgs),
    /// Identify physics parameters from measured temperatures.
    Inverse(RunArgs),
    /// Train a thin-wall model directly against camera frames.
    Hybrid(RunArgs),
    /// Render synthetic camera frames from a reference solve.
    #[command(name = "make-ir")]
    MakeIr(RunArgs),
    /// Score a trained checkpoint against a labelled dataset.
    Eval(RunArgs),
    /// Describe a checkpoint file.
    Info {
        /// Checkpoint to inspect.
        checkpoint: PathBuf,
    },
}

/// Parse arguments and dispatch. Returns the process exit code; clap itself
/// exits with code 2 on usage errors, matching the config-error class.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Reference(a) => run(Mode::Reference, a),
        Command::Forward(a) => run(Mode::Forward, a),
        Command::Inverse(a) => run(Mode::Inverse, a),
        Command::Hybrid(a) => run(Mode::Hybrid, a),
        Command::MakeIr(a) => run(Mode::MakeIr, a),
        Command::Eval(a) => run(Mode::Eval, a),
        Command::Info { checkpoint } => info(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

// ---------------------------------------------------------------------------
// Run orchestration
// ---------------------------------------------------------------------------

fn run(mode: Mode, args: RunArgs) -> Result<(), RunFailure> {
    if let Some(n) = args.workers {
        if n == 0 {
            return Err(RunFailure::Config("--workers must be at least 1".to_string()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunFailure::Config(format!("cannot size the worker pool: {e}")))?;
    }

    let over = Overrides {
        seed: args.seed,
        out: args.out,
        epochs: args.epochs,
        warm_start: args.warm_start,
    };
    let cfg = config::load_config(&args.config, mode, &over).map_err(|e| match e {
        ConfigError::Io(io) => RunFailure::Io(format!("{}: {io}", args.config.display())),
        other => RunFailure::Config(format!("{}: {other}", args.config.display())),
    })?;

    std::fs::create_dir_all(&cfg.out).map_err(io_at(&cfg.out))?;
    // The resolved copy goes out before any compute: a run that later fails
    // is still reproducible from its own artifacts.
    let resolved = cfg.out.join("resolved.cfg");
    std::fs::write(&resolved, cfg.to_ini()).map_err(io_at(&resolved))?;

    let clock = Instant::now();
    match mode {
        Mode::Reference => run_reference(&cfg, clock),
        Mode::MakeIr => run_make_ir(&cfg, clock),
        Mode::Eval => run_eval(&cfg, clock),
        Mode::Forward | Mode::Inverse | Mode::Hybrid => run_training(&cfg, clock),
    }
}

/// Write the standard artifact trio shared by every mode.
fn write_common_artifacts(
    cfg: &RunConfig,
    history: &[crate::trainer::EvalRecord],
    metrics: &RunMetrics,
) -> Result<(), RunFailure> {
    io::write_history_csv(history, &cfg.out.join("history.csv"))?;
    io::write_metrics_json(metrics, &cfg.out.join("metrics.json"))?;
    Ok(())
}

fn run_reference(cfg: &RunConfig, clock: Instant) -> Result<(), RunFailure> {
    let r = cfg.reference.as_ref().expect("reference mode always parses [reference]");
    let output = fdm::solve(&cfg.domain, &cfg.phys, &cfg.laser, &r.grid, r.snapshot_every)?;
    for w in &output.warnings {
        eprintln!("note: {w}");
    }

    let snap_dir = cfg.out.join("snapshots");
    std::fs::create_dir_all(&snap_dir).map_err(io_at(&snap_dir))?;
    for (i, snap) in output.snapshots.iter().enumerate() {
        io::write_snapshot_csv(snap, &snap_dir.join(format!("snap_{i:04}.csv")))?;
    }
    let mut dataset_note = String::new();
    if let Some(mode) = r.export {
        let data = fdm::export_dataset(&output.snapshots, mode)?;
        io::write_dataset_csv(&data, &cfg.out.join("dataset.csv"))?;
        dataset_note = format!(" and a {}-point dataset", data.len());
    }

    let metrics = RunMetrics {
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        epochs: 0,
        stopped: "completed".to_string(),
        loss: LossTerms { boundary: 0.0, initial: 0.0, residual: 0.0, data: 0.0, total: 0.0 },
        nmse: None,
        rmse_kelvin: None,
        mu: BTreeMap::new(),
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    write_common_artifacts(cfg, &[], &metrics)?;
    println!(
        "wrote {} snapshots{dataset_note} to {}",
        output.snapshots.len(),
        cfg.out.display()
    );
    Ok(())
}

fn run_make_ir(cfg: &RunConfig, clock: Instant) -> Result<(), RunFailure> {
    let r = cfg.reference.as_ref().expect("make-ir mode always parses [reference]");
    let cam = cfg.camera.as_ref().expect("make-ir mode always parses [camera]");
    let output = fdm::solve(&cfg.domain, &cfg.phys, &cfg.laser, &r.grid, r.snapshot_every)?;
    for w in &output.warnings {
        eprintln!("note: {w}");
    }

    let stack = ir::gen_synthetic_ir(&output.snapshots, &cfg.laser, &cam.spec, cfg.phys.t0)?;
    let frame_path = cfg.out.join(&cam.output);
    ir::write_irstack(&stack, &frame_path)?;

    let metrics = RunMetrics {
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        epochs: 0,
        stopped: "completed".to_string(),
        loss: LossTerms { boundary: 0.0, initial: 0.0, residual: 0.0, data: 0.0, total: 0.0 },
        nmse: None,
        rmse_kelvin: None,
        mu: BTreeMap::new(),
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    write_common_artifacts(cfg, &[], &metrics)?;
    println!(
        "wrote {} frames ({}x{} px) to {}",
        stack.frames.len(),
        stack.rows,
        stack.cols,
        frame_path.display()
    );
    Ok(())
}

fn run_eval(cfg: &RunConfig, clock: Instant) -> Result<(), RunFailure> {
    let ev = cfg.eval.as_ref().expect("eval mode always parses [eval]");
    let (params, _moments) = load_checkpoint(&ev.checkpoint)?;
    let points = io::read_dataset_csv(&ev.dataset)?;

    let dt_ref = cfg.dt_ref.expect("eval mode always parses [scaling]");
    let problem =
        LossProblem::new(cfg.domain, cfg.laser.clone(), cfg.phys, dt_ref, cfg.weights)?;
    check_architecture(&params, &problem, None)?;

    let (nmse, rmse_kelvin) = problem.field_metrics(&params, &points)?;
    let mu: BTreeMap<String, F> = params
        .mu
        .entries()
        .iter()
        .map(|e| (e.name.as_str().to_string(), e.physical()))
        .collect();

    // Only the data-fit term is sampled here (it equals the normalized mean
    // squared error over the dataset); the PDE terms need collocation points
    // and are reported as zero.
    let metrics = RunMetrics {
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        epochs: 0,
        stopped: "completed".to_string(),
        loss: LossTerms { boundary: 0.0, initial: 0.0, residual: 0.0, data: nmse, total: nmse },
        nmse: Some(nmse),
        rmse_kelvin: Some(rmse_kelvin),
        mu,
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    write_common_artifacts(cfg, &[], &metrics)?;
    println!("nmse = {nmse:.6e}, rmse = {rmse_kelvin:.3} K over {} points", points.len());
    Ok(())
}

/// Confirm a loaded checkpoint fits the run: input width must match the
/// domain, and when a `[network]` section is present its hidden widths must
/// match too.
fn check_architecture(
    params: &NetworkParams<F>,
    problem: &LossProblem<F>,
    expect_hidden: Option<&[usize]>,
) -> Result<(), RunFailure> {
    let need = problem.scaling.input_dim();
    if params.spec.input_dim != need {
        return Err(RunFailure::Config(format!(
            "checkpoint network takes {} inputs but this domain needs {need}",
            params.spec.input_dim
        )));
    }
    if let Some(hidden) = expect_hidden {
        if params.spec.hidden != hidden {
            return Err(RunFailure::Config(format!(
                "checkpoint hidden layers {:?} do not match [network] hidden {:?}",
                params.spec.hidden, hidden
            )));
        }
    }
    Ok(())
}

fn run_training(cfg: &RunConfig, clock: Instant) -> Result<(), RunFailure> {
    let net_cfg = cfg.network.as_ref().expect("training modes always parse [network]");
    let train_cfg = cfg.training.as_ref().expect("training modes always parse [training]");
    let dt_ref = cfg.dt_ref.expect("training modes always parse [scaling]");

    let mut colloc =
        CollocationSet::generate(&cfg.domain, &cfg.laser, cfg.phys.t0, &cfg.sampling)?;
    for w in &colloc.warnings {
        eprintln!("note: {w}");
    }

    // Labelled measurements: a dataset file, camera frames, or both.
    if let Some(d) = &cfg.data {
        let mut points = io::read_dataset_csv(&d.dataset)?;
        if let Some(n) = d.count {
            points = subsample_data(&points, n, d.seed)?;
        }
        for p in &mut points {
            p.weight = d.weight;
        }
        colloc.data.extend(points);
    }
    if let Some(irc) = &cfg.ir_data {
        let stack = ir::read_irstack(&irc.stack)?;
        let stack = if irc.crop.is_some() || irc.factor > 1 {
            let full = CropRect { row0: 0, col0: 0, rows: stack.rows, cols: stack.cols };
            ir::crop_downsample(&stack, irc.crop.unwrap_or(full), irc.factor)?
        } else {
            stack
        };
        let (points, dropped) =
            ir::frames_to_data(&stack, &irc.placement, &cfg.domain, irc.band, irc.weight);
        if dropped > 0 {
            eprintln!("note: {dropped} frame pixels fell outside the domain or time horizon");
        }
        if points.is_empty() {
            return Err(RunFailure::Config(
                "no usable pixels in the camera frames: check [ir-data] placement".to_string(),
            ));
        }
        colloc.data.extend(points);
    }

    let validation: Option<Vec<DataPoint<F>>> = match &cfg.validation {
        Some(path) => Some(io::read_dataset_csv(path)?),
        None => None,
    };

    let problem =
        LossProblem::new(cfg.domain, cfg.laser.clone(), cfg.phys, dt_ref, cfg.weights)?;

    // Initial parameters: fresh weights, or a checkpoint to resume from.
    let (params, moments) = match &train_cfg.warm_start {
        Some(path) => {
            let (mut params, moments) = load_checkpoint(path)?;
            check_architecture(&params, &problem, Some(&net_cfg.hidden))?;
            // The checkpoint keeps its parameter values; the config may only
            // flip trainability. Adding a new named parameter would change
            // the optimizer layout mid-run, so it is rejected.
            for m in &cfg.mu {
                let entry = params
                    .mu
                    .entries_mut()
                    .iter_mut()
                    .find(|e| e.name == m.name)
                    .ok_or_else(|| {
                        RunFailure::Config(format!(
                            "checkpoint {} does not carry parameter '{}'; a resumed run \
                             must keep the same parameter set",
                            path.display(),
                            m.name.as_str()
                        ))
                    })?;
                entry.trainable = m.trainable;
            }
            (params, moments)
        }
        None => {
            let spec = NetworkSpec::new(
                problem.scaling.input_dim(),
                net_cfg.hidden.clone(),
                net_cfg.init_seed,
            )?;
            let mut params = NetworkParams::init(&spec)?;
            for m in &cfg.mu {
                params.mu.set(m.name, m.value, m.trainable);
            }
            (params, None)
        }
    };

    let outcome = train(&problem, params, &colloc, &train_cfg.train, moments, validation.as_deref())?;

    // All artifacts are written even when the loop stopped early; the exit
    // code alone reports the failure.
    io::write_history_csv(&outcome.history, &cfg.out.join("history.csv"))?;
    save_checkpoint(&outcome.params, Some(&outcome.moments), &cfg.out.join("checkpoint.bin"))?;

    let last = outcome
        .history
        .last()
        .expect("training history always holds the initial evaluation");
    let (epochs, stopped) = match &outcome.stop {
        StopReason::Completed => (train_cfg.train.epochs, "completed".to_string()),
        StopReason::Diverged { epoch, total } => {
            (*epoch, format!("diverged at epoch {epoch} (total loss {total:e})"))
        }
        StopReason::Aborted { epoch, what } => (*epoch, format!("aborted at epoch {epoch}: {what}")),
    };
    let metrics = RunMetrics {
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        epochs,
        stopped: stopped.clone(),
        loss: LossTerms::from(&last.loss),
        nmse: last.nmse,
        rmse_kelvin: last.rmse_kelvin,
        mu: last.mu.iter().map(|(n, v)| (n.as_str().to_string(), *v)).collect(),
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    write_common_artifacts(cfg, &outcome.history, &metrics)?;

    let mut summary = format!("epoch {}: total loss {:.6e}", last.epoch, last.loss.total);
    if let Some(rmse) = last.rmse_kelvin {
        summary.push_str(&format!(", rmse {rmse:.3} K"));
    }
    for (name, value) in &last.mu {
        summary.push_str(&format!(", {} = {value:.6}", name.as_str()));
    }
    println!("{summary}");
    println!("artifacts in {}", cfg.out.display());

    match outcome.stop {
        StopReason::Completed => Ok(()),
        _ => Err(RunFailure::Numerical(stopped)),
    }
}

// ---------------------------------------------------------------------------
// Checkpoint inspection
// ---------------------------------------------------------------------------

fn info(path: &Path) -> Result<(), RunFailure> {
    let (params, moments) = load_checkpoint(path)?;
    let spec = &params.spec;
    let mut arch: Vec<String> = Vec::with_capacity(spec.hidden.len() + 2);
    arch.push(spec.input_dim.to_string());
    arch.extend(spec.hidden.iter().map(|w| w.to_string()));
    arch.push("1".to_string());
    println!("architecture: [{}]", arch.join(","));
    println!("init seed: {}", spec.seed);
    println!("parameters: {} weights, {} physics", spec.theta_len(), params.mu.len());
    for e in params.mu.entries() {
        println!(
            "mu {} = {:.6} ({})",
            e.name.as_str(),
            e.physical(),
            if e.trainable { "trainable" } else { "fixed" }
        );
    }
    match moments {
        Some(m) => println!("optimizer: step {}", m.step),
        None => println!("optimizer: none"),
    }
    Ok(())
}
