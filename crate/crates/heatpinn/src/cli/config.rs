//! Run configuration: a flat INI-style file parsed into typed, validated
//! specs, plus the inverse — writing the fully resolved configuration back
//! out so a run can be reproduced from its own output directory.
//!
//! The format is deliberately plain: `[section]` headers, `key = value`
//! lines, `#`/`;` full-line comments. Keys are kebab-case. Every error is
//! anchored to a line number; missing keys are anchored to their section
//! header. Unknown sections and keys are rejected — a typo never silently
//! becomes a default. Physical parameters have **no defaults at all**; only
//! algorithmic knobs (sampling spacings, optimizer settings, camera model)
//! do, and the resolved copy echoes every value actually used.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fdm::{ExportMode, GridSpec, Integrator};
use crate::ir::{CropRect, FramePlacement, IRWindowSpec};
use crate::loss::LossWeights;
use crate::network::MuName;
use crate::physics::{DomainSpec, Geometry, LaserSpec, PhysicalParams, PropertyModel, Segment, TopEdge};
use crate::sampling::SamplingConfig;
use crate::trainer::{AdamParams, TrainConfig};
use crate::F;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {what}")]
    At { line: usize, what: String },
    #[error("{0}")]
    Global(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn at(line: usize, what: impl Into<String>) -> ConfigError {
    ConfigError::At { line, what: what.into() }
}

/// The six run modes. The subcommand decides the mode; a `mode` key in
/// `[run]` is optional and must agree when present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Reference,
    Forward,
    Inverse,
    Hybrid,
    MakeIr,
    Eval,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Reference => "reference",
            Mode::Forward => "forward",
            Mode::Inverse => "inverse",
            Mode::Hybrid => "hybrid",
            Mode::MakeIr => "make-ir",
            Mode::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "reference" => Mode::Reference,
            "forward" => Mode::Forward,
            "inverse" => Mode::Inverse,
            "hybrid" => Mode::Hybrid,
            "make-ir" => Mode::MakeIr,
            "eval" => Mode::Eval,
            _ => return None,
        })
    }

    /// Whether this mode runs the training loop.
    pub fn trains(self) -> bool {
        matches!(self, Mode::Forward | Mode::Inverse | Mode::Hybrid)
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub warm_start: Option<PathBuf>,
}

/// Network section: hidden widths plus the initialization seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NetCfg {
    pub hidden: Vec<usize>,
    pub init_seed: u64,
}

/// Training section: the loop config plus an optional warm-start checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub train: TrainConfig,
    pub warm_start: Option<PathBuf>,
}

/// One `[mu]` entry: a physics parameter the network carries alongside θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuCfg {
    pub name: MuName,
    pub value: F,
    pub trainable: bool,
}

/// Reference-solver section.
#[derive(Debug, Clone, PartialEq)]
pub struct RefCfg {
    pub grid: GridSpec,
    pub snapshot_every: usize,
    pub export: Option<ExportMode>,
}

/// Labelled-data section: a dataset CSV, an optional seeded subsample, and
/// the weight its points carry in the data loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCfg {
    pub dataset: PathBuf,
    pub count: Option<usize>,
    pub seed: u64,
    pub weight: F,
}

/// Synthetic-camera section for `make-ir`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCfg {
    pub spec: IRWindowSpec,
    /// Output file name inside the run directory.
    pub output: String,
}

/// Measured-frame ingestion for `inverse`/`hybrid`.
#[derive(Debug, Clone, PartialEq)]
pub struct IrDataCfg {
    pub stack: PathBuf,
    pub crop: Option<CropRect>,
    pub factor: usize,
    pub placement: FramePlacement,
    pub band: Option<[F; 2]>,
    pub weight: F,
}

/// Eval section: a checkpoint measured against a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCfg {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
}

/// Everything a run needs, resolved: defaults materialized, flags folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    pub domain: DomainSpec<F>,
    pub phys: PhysicalParams<F>,
    pub laser: LaserSpec<F>,
    /// Temperature scale of the nondimensionalization, K.
    pub dt_ref: Option<F>,
    pub weights: LossWeights<F>,
    pub sampling: SamplingConfig<F>,
    pub network: Option<NetCfg>,
    pub training: Option<TrainSection>,
    pub mu: Vec<MuCfg>,
    pub reference: Option<RefCfg>,
    pub data: Option<DataCfg>,
    pub validation: Option<PathBuf>,
    pub camera: Option<CameraCfg>,
    pub ir_data: Option<IrDataCfg>,
    pub eval: Option<EvalCfg>,
}

// ---------------------------------------------------------------------------
// Raw INI layer
// ---------------------------------------------------------------------------

struct RawEntry {
    key: String,
    value: String,
    line: usize,
    used: bool,
}

struct RawSection {
    name: String,
    line: usize,
    entries: Vec<RawEntry>,
    used: bool,
}

struct RawIni {
    sections: Vec<RawSection>,
}

impl RawIni {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut sections: Vec<RawSection> = Vec::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw_line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
                continue;
            }
            if let Some(inner) = trimmed.strip_prefix('[') {
                let name = inner
                    .strip_suffix(']')
                    .ok_or_else(|| at(line, format!("unterminated section header '{trimmed}'")))?
                    .trim();
                if name.is_empty() {
                    return Err(at(line, "empty section name"));
                }
                if let Some(prev) = sections.iter().find(|s| s.name == name) {
                    return Err(at(
                        line,
                        format!("section [{name}] already defined on line {}", prev.line),
                    ));
                }
                sections.push(RawSection {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                    used: false,
                });
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(at(line, format!("expected 'key = value', found '{trimmed}'")));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(at(line, "empty key"));
            }
            if value.is_empty() {
                return Err(at(line, format!("key '{key}' has no value")));
            }
            let section = sections
                .last_mut()
                .ok_or_else(|| at(line, format!("key '{key}' appears before any [section]")))?;
            section.entries.push(RawEntry { key, value, line, used: false });
        }
        Ok(RawIni { sections })
    }

    fn section_index(&mut self, name: &str) -> Option<usize> {
        let idx = self.sections.iter().position(|s| s.name == name)?;
        self.sections[idx].used = true;
        Some(idx)
    }

    /// One value for `sec.key`; errors on duplicates.
    fn get(&mut self, sec: usize, key: &str) -> Result<Option<(String, usize)>, ConfigError> {
        let section = &mut self.sections[sec];
        let mut found: Option<(String, usize)> = None;
        for e in section.entries.iter_mut().filter(|e| e.key == key) {
            e.used = true;
            if let Some((_, first)) = &found {
                return Err(at(
                    e.line,
                    format!("key '{key}' already set on line {first} (it takes one value)"),
                ));
            }
            found = Some((e.value.clone(), e.line));
        }
        Ok(found)
    }

    /// Every value for a repeatable key, in file order.
    fn get_all(&mut self, sec: usize, key: &str) -> Vec<(String, usize)> {
        self.sections[sec]
            .entries
            .iter_mut()
            .filter(|e| e.key == key)
            .map(|e| {
                e.used = true;
                (e.value.clone(), e.line)
            })
            .collect()
    }

    /// Reject anything parsed but never consumed: unknown keys and sections.
    fn finish(self) -> Result<(), ConfigError> {
        for section in &self.sections {
            if !section.used {
                return Err(at(
                    section.line,
                    format!("section [{}] is not used by this mode", section.name),
                ));
            }
            if let Some(e) = section.entries.iter().find(|e| !e.used) {
                return Err(at(
                    e.line,
                    format!("unknown key '{}' in section [{}]", e.key, section.name),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Typed accessors
// ---------------------------------------------------------------------------

struct Section<'a> {
    raw: &'a mut RawIni,
    idx: usize,
    name: &'static str,
}

impl<'a> Section<'a> {
    fn line(&self) -> usize {
        self.raw.sections[self.idx].line
    }

    fn missing(&self, key: &str) -> ConfigError {
        at(self.line(), format!("section [{}] is missing key '{key}'", self.name))
    }

    fn opt_raw(&mut self, key: &str) -> Result<Option<(String, usize)>, ConfigError> {
        self.raw.get(self.idx, key)
    }

    fn req_raw(&mut self, key: &str) -> Result<(String, usize), ConfigError> {
        self.opt_raw(key)?.ok_or_else(|| self.missing(key))
    }

    fn opt_f(&mut self, key: &str) -> Result<Option<F>, ConfigError> {
        self.opt_raw(key)?.map(|(v, line)| parse_float(&v, line, key)).transpose()
    }

    fn req_f(&mut self, key: &str) -> Result<F, ConfigError> {
        let (v, line) = self.req_raw(key)?;
        parse_float(&v, line, key)
    }

    fn opt_usize(&mut self, key: &str) -> Result<Option<usize>, ConfigError> {
        self.opt_raw(key)?
            .map(|(v, line)| {
                v.parse::<usize>()
                    .map_err(|_| at(line, format!("key '{key}': expected an integer, got '{v}'")))
            })
            .transpose()
    }

    fn req_usize(&mut self, key: &str) -> Result<usize, ConfigError> {
        self.opt_usize(key)?.ok_or_else(|| self.missing(key))
    }

    fn opt_u64(&mut self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.opt_raw(key)?
            .map(|(v, line)| {
                v.parse::<u64>()
                    .map_err(|_| at(line, format!("key '{key}': expected an integer, got '{v}'")))
            })
            .transpose()
    }

    fn opt_bool(&mut self, key: &str) -> Result<Option<bool>, ConfigError> {
        self.opt_raw(key)?
            .map(|(v, line)| match v.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => {
                    Err(at(line, format!("key '{key}': expected true or false, got '{other}'")))
                }
            })
            .transpose()
    }

    fn req_str(&mut self, key: &str) -> Result<(String, usize), ConfigError> {
        self.req_raw(key)
    }

    fn opt_path(&mut self, key: &str) -> Result<Option<PathBuf>, ConfigError> {
        Ok(self.opt_raw(key)?.map(|(v, _)| PathBuf::from(v)))
    }

    fn req_path(&mut self, key: &str) -> Result<PathBuf, ConfigError> {
        Ok(PathBuf::from(self.req_raw(key)?.0))
    }

    /// `key = a,b,…` with exactly `n` floats.
    fn opt_f_list(&mut self, key: &str, n: usize) -> Result<Option<Vec<F>>, ConfigError> {
        let Some((v, line)) = self.opt_raw(key)? else { return Ok(None) };
        let vals = parse_float_list(&v, line, key)?;
        if vals.len() != n {
            return Err(at(line, format!("key '{key}': expected {n} values, got {}", vals.len())));
        }
        Ok(Some(vals))
    }
}

fn parse_float(v: &str, line: usize, key: &str) -> Result<F, ConfigError> {
    let x: F = v
        .parse()
        .map_err(|_| at(line, format!("key '{key}': expected a number, got '{v}'")))?;
    if !x.is_finite() {
        return Err(at(line, format!("key '{key}': value must be finite, got '{v}'")));
    }
    Ok(x)
}

fn parse_float_list(v: &str, line: usize, key: &str) -> Result<Vec<F>, ConfigError> {
    v.split(',').map(|tok| parse_float(tok.trim(), line, key)).collect()
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Parse `path` for `mode`, folding in command-line `over`rides. The result
/// is structurally complete and range-checked; deeper invariants (stability
/// bounds, grid divisibility, …) surface when the run starts.
pub fn load_config(path: &Path, mode: Mode, over: &Overrides) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let mut raw = RawIni::parse(&text)?;

    let section = |raw: &mut RawIni, name: &'static str| -> Option<usize> {
        raw.section_index(name)
    };
    let require = |raw: &mut RawIni, name: &'static str| -> Result<usize, ConfigError> {
        raw.section_index(name).ok_or_else(|| {
            ConfigError::Global(format!(
                "missing section [{name}] (required by mode '{}')",
                mode.as_str()
            ))
        })
    };

    // [run]
    let run_idx = require(&mut raw, "run")?;
    let mut run = Section { raw: &mut raw, idx: run_idx, name: "run" };
    if let Some((m, line)) = run.opt_raw("mode")? {
        let file_mode = Mode::parse(&m)
            .ok_or_else(|| at(line, format!("unknown mode '{m}'")))?;
        if file_mode != mode {
            return Err(at(
                line,
                format!("config says mode '{m}' but the command runs '{}'", mode.as_str()),
            ));
        }
    }
    let file_seed = run.opt_u64("seed")?;
    let seed = over.seed.or(file_seed).unwrap_or(0);
    let file_out = run.opt_path("out")?;
    let out = over.out.clone().or(file_out).ok_or_else(|| {
        ConfigError::Global("no output directory: set 'out' in [run] or pass --out".to_string())
    })?;

    // [domain]
    let dom_idx = require(&mut raw, "domain")?;
    let domain = parse_domain(&mut Section { raw: &mut raw, idx: dom_idx, name: "domain" })?;

    // [physical]
    let phys_idx = require(&mut raw, "physical")?;
    let phys = parse_physical(&mut Section { raw: &mut raw, idx: phys_idx, name: "physical" })?;

    // [laser]
    let laser_idx = require(&mut raw, "laser")?;
    let laser = parse_laser(&mut Section { raw: &mut raw, idx: laser_idx, name: "laser" })?;

    // [scaling] — training and eval modes.
    let dt_ref = if mode.trains() || mode == Mode::Eval {
        let idx = require(&mut raw, "scaling")?;
        let mut s = Section { raw: &mut raw, idx, name: "scaling" };
        let v = s.req_f("dt-ref")?;
        if v <= 0.0 {
            return Err(at(s.line(), format!("dt-ref must be positive, got {v}")));
        }
        Some(v)
    } else {
        None
    };

    // [loss] — optional weights, training/eval modes only.
    let mut weights = LossWeights::default();
    if let Some(idx) = section(&mut raw, "loss") {
        if !(mode.trains() || mode == Mode::Eval) {
            return Err(at(
                raw.sections[idx].line,
                format!("section [loss] is not used by mode '{}'", mode.as_str()),
            ));
        }
        let mut s = Section { raw: &mut raw, idx, name: "loss" };
        if let Some(w) = s.opt_f("weight-boundary")? {
            weights.boundary = w;
        }
        if let Some(w) = s.opt_f("weight-initial")? {
            weights.initial = w;
        }
        if let Some(w) = s.opt_f("weight-residual")? {
            weights.residual = w;
        }
        if let Some(w) = s.opt_f("weight-data")? {
            weights.data = w;
        }
    }

    // [sampling] — optional; training modes only.
    let mut sampling = SamplingConfig::default();
    if let Some(idx) = section(&mut raw, "sampling") {
        if !mode.trains() {
            return Err(at(
                raw.sections[idx].line,
                format!("section [sampling] is not used by mode '{}'", mode.as_str()),
            ));
        }
        let mut s = Section { raw: &mut raw, idx, name: "sampling" };
        if let Some(v) = s.opt_f("dt-slice")? {
            sampling.dt_slice = v;
        }
        if let Some(v) = s.opt_f("coarse-spacing")? {
            sampling.coarse_spacing = v;
        }
        if let Some(v) = s.opt_f("fine-spacing")? {
            sampling.fine_spacing = v;
        }
        if let Some(v) = s.opt_f("fine-window")? {
            sampling.fine_window = v;
        }
        if let Some(v) = s.opt_f("top-spacing")? {
            sampling.interior_top_spacing = v;
        }
        if let Some(v) = s.opt_f("top-band")? {
            sampling.interior_top_band = v;
        }
        if let Some(v) = s.opt_f("lower-spacing")? {
            sampling.interior_lower_spacing = v;
        }
    }

    // [network] — training modes.
    let network = if mode.trains() {
        let idx = require(&mut raw, "network")?;
        let mut s = Section { raw: &mut raw, idx, name: "network" };
        let (hidden_str, line) = s.req_str("hidden")?;
        let hidden: Result<Vec<usize>, _> = hidden_str
            .split(',')
            .map(|tok| {
                tok.trim().parse::<usize>().map_err(|_| {
                    at(line, format!("key 'hidden': expected integers, got '{}'", tok.trim()))
                })
            })
            .collect();
        let hidden = hidden?;
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(at(line, "hidden widths must all be at least 1"));
        }
        let init_seed = s.opt_u64("init-seed")?.unwrap_or(seed);
        Some(NetCfg { hidden, init_seed })
    } else {
        None
    };

    // [training] — training modes.
    let training = if mode.trains() {
        let idx = require(&mut raw, "training")?;
        let mut s = Section { raw: &mut raw, idx, name: "training" };
        let file_epochs = s.req_usize("epochs")?;
        let mut adam = AdamParams::default();
        if let Some(v) = s.opt_f("lr")? {
            adam.lr = v;
        }
        if let Some(v) = s.opt_f("beta1")? {
            adam.beta1 = v;
        }
        if let Some(v) = s.opt_f("beta2")? {
            adam.beta2 = v;
        }
        if let Some(v) = s.opt_f("eps")? {
            adam.eps = v;
        }
        let train = TrainConfig {
            epochs: over.epochs.unwrap_or(file_epochs),
            adam,
            seed,
            eval_every: s.opt_usize("eval-every")?.unwrap_or(100),
            batch_size: s.opt_usize("batch-size")?,
            divergence_threshold: s.opt_f("divergence-threshold")?.unwrap_or(1e6),
            divergence_patience: s.opt_usize("divergence-patience")?.unwrap_or(100),
        };
        let warm_start = over.warm_start.clone().or(s.opt_path("warm-start")?);
        Some(TrainSection { train, warm_start })
    } else {
        None
    };

    // [mu] — inverse/hybrid.
    let mut mu = Vec::new();
    if let Some(idx) = section(&mut raw, "mu") {
        if !matches!(mode, Mode::Inverse | Mode::Hybrid) {
            return Err(at(
                raw.sections[idx].line,
                format!(
                    "section [mu] is not used by mode '{}' (physics comes from [physical])",
                    mode.as_str()
                ),
            ));
        }
        for name in [MuName::Eta, MuName::Cp, MuName::K, MuName::H, MuName::Epsilon] {
            let mut s = Section { raw: &mut raw, idx, name: "mu" };
            if let Some((v, line)) = s.opt_raw(name.as_str())? {
                mu.push(parse_mu(name, &v, line)?);
            }
        }
        if mu.is_empty() {
            return Err(at(raw.sections[idx].line, "section [mu] lists no parameters"));
        }
    }

    // [reference] — reference and make-ir.
    let reference = if matches!(mode, Mode::Reference | Mode::MakeIr) {
        let idx = require(&mut raw, "reference")?;
        let mut s = Section { raw: &mut raw, idx, name: "reference" };
        Some(parse_reference(&mut s)?)
    } else {
        None
    };

    // [data] — optional labelled data for training modes.
    let data = match section(&mut raw, "data") {
        Some(idx) if mode.trains() => {
            let mut s = Section { raw: &mut raw, idx, name: "data" };
            Some(DataCfg {
                dataset: s.req_path("dataset")?,
                count: s.opt_usize("count")?,
                seed: s.opt_u64("data-seed")?.unwrap_or(seed),
                weight: s.opt_f("weight")?.unwrap_or(1.0),
            })
        }
        Some(idx) => {
            return Err(at(
                raw.sections[idx].line,
                format!("section [data] is not used by mode '{}'", mode.as_str()),
            ))
        }
        None => None,
    };

    // [validation] — optional held-out field for training modes.
    let validation = match section(&mut raw, "validation") {
        Some(idx) if mode.trains() => {
            let mut s = Section { raw: &mut raw, idx, name: "validation" };
            Some(s.req_path("dataset")?)
        }
        Some(idx) => {
            return Err(at(
                raw.sections[idx].line,
                format!("section [validation] is not used by mode '{}'", mode.as_str()),
            ))
        }
        None => None,
    };

    // [camera] — make-ir.
    let camera = if mode == Mode::MakeIr {
        let idx = require(&mut raw, "camera")?;
        let mut s = Section { raw: &mut raw, idx, name: "camera" };
        let defaults = IRWindowSpec::default();
        let center = s.opt_f_list("center", 2)?.map(|v| [v[0], v[1]]);
        Some(CameraCfg {
            spec: IRWindowSpec {
                window: s.opt_f("window")?.unwrap_or(defaults.window),
                pitch: s.opt_f("pitch")?.unwrap_or(defaults.pitch),
                frame_rate: s.opt_f("frame-rate")?.unwrap_or(defaults.frame_rate),
                saturation: s.opt_f("saturation")?.unwrap_or(defaults.saturation),
                noise_sigma: s.opt_f("noise-sigma")?.unwrap_or(defaults.noise_sigma),
                seed: s.opt_u64("camera-seed")?.unwrap_or(seed),
                center,
            },
            output: s
                .opt_raw("output")?
                .map(|(v, _)| v)
                .unwrap_or_else(|| "frames.irstack".to_string()),
        })
    } else {
        None
    };

    // [ir-data] — inverse/hybrid frame ingestion.
    let ir_data = match section(&mut raw, "ir-data") {
        Some(idx) if matches!(mode, Mode::Inverse | Mode::Hybrid) => {
            let mut s = Section { raw: &mut raw, idx, name: "ir-data" };
            let crop = match s.opt_raw("crop")? {
                None => None,
                Some((v, line)) => {
                    let nums: Result<Vec<usize>, _> = v
                        .split(',')
                        .map(|tok| {
                            tok.trim().parse::<usize>().map_err(|_| {
                                at(line, format!("key 'crop': expected integers, got '{}'", tok.trim()))
                            })
                        })
                        .collect();
                    let nums = nums?;
                    if nums.len() != 4 {
                        return Err(at(
                            line,
                            "key 'crop': expected 'row0,col0,rows,cols'".to_string(),
                        ));
                    }
                    Some(CropRect { row0: nums[0], col0: nums[1], rows: nums[2], cols: nums[3] })
                }
            };
            let anchor = s.opt_f_list("anchor", 2)?.map(|v| [v[0], v[1]]).unwrap_or([0.0, 0.0]);
            let band = s.opt_f_list("band", 2)?.map(|v| [v[0], v[1]]);
            Some(IrDataCfg {
                stack: s.req_path("stack")?,
                crop,
                factor: s.opt_usize("factor")?.unwrap_or(1),
                placement: FramePlacement {
                    anchor,
                    rows_run_down: s.opt_bool("rows-run-down")?.unwrap_or(false),
                    plane_z: s.req_f("plane-z")?,
                },
                band,
                weight: s.opt_f("weight")?.unwrap_or(1.0),
            })
        }
        Some(idx) => {
            return Err(at(
                raw.sections[idx].line,
                format!("section [ir-data] is not used by mode '{}'", mode.as_str()),
            ))
        }
        None => None,
    };

    // [eval] — eval mode.
    let eval = if mode == Mode::Eval {
        let idx = require(&mut raw, "eval")?;
        let mut s = Section { raw: &mut raw, idx, name: "eval" };
        Some(EvalCfg { checkpoint: s.req_path("checkpoint")?, dataset: s.req_path("dataset")? })
    } else {
        None
    };

    raw.finish()?;

    let cfg = RunConfig {
        mode,
        seed,
        out,
        domain,
        phys,
        laser,
        dt_ref,
        weights,
        sampling,
        network,
        training,
        mu,
        reference,
        data,
        validation,
        camera,
        ir_data,
        eval,
    };
    cfg.validate_semantics()?;
    Ok(cfg)
}

fn parse_domain(s: &mut Section) -> Result<DomainSpec<F>, ConfigError> {
    let (geom, line) = s.req_str("geometry")?;
    let geometry = match geom.as_str() {
        "box" => Geometry::Box3 {
            lx: s.req_f("lx")?,
            ly: s.req_f("ly")?,
            lz: s.req_f("lz")?,
        },
        "thin-wall" => {
            let (edge, edge_line) = s.req_str("top-edge")?;
            let top_edge = match edge.as_str() {
                "data-only" => TopEdge::DataOnly,
                "flux" => TopEdge::Flux,
                other => {
                    return Err(at(
                        edge_line,
                        format!("top-edge must be data-only or flux, got '{other}'"),
                    ))
                }
            };
            Geometry::ThinWall {
                length: s.req_f("length")?,
                height: s.req_f("height")?,
                thickness: s.req_f("thickness")?,
                k_sub: s.req_f("k-substrate")?,
                substrate_height: s.req_f("substrate-height")?,
                top_edge,
            }
        }
        "rod" => Geometry::Rod {
            length: s.req_f("length")?,
            source_depth: s.req_f("source-depth")?,
        },
        other => {
            return Err(at(line, format!("geometry must be box, thin-wall, or rod, got '{other}'")))
        }
    };
    Ok(DomainSpec { geometry, t_end: s.req_f("t-end")? })
}

fn parse_property(
    s: &mut Section,
    base: &str,
) -> Result<PropertyModel<F>, ConfigError> {
    let constant = s.opt_f(base)?;
    let slope_key = format!("{base}-slope");
    let intercept_key = format!("{base}-intercept");
    let slope = s.opt_f(&slope_key)?;
    let intercept = s.opt_f(&intercept_key)?;
    match (constant, slope, intercept) {
        (Some(c), None, None) => Ok(PropertyModel::Constant(c)),
        (None, Some(slope), Some(intercept)) => Ok(PropertyModel::Affine { slope, intercept }),
        (None, None, None) => Err(s.missing(base)),
        _ => Err(at(
            s.line(),
            format!("give either '{base}' or both '{slope_key}' and '{intercept_key}'"),
        )),
    }
}

fn parse_physical(s: &mut Section) -> Result<PhysicalParams<F>, ConfigError> {
    Ok(PhysicalParams {
        rho: s.req_f("rho")?,
        cp: parse_property(s, "cp")?,
        k: parse_property(s, "k")?,
        h: s.req_f("h")?,
        emissivity: s.req_f("emissivity")?,
        absorptivity: s.req_f("absorptivity")?,
        t0: s.req_f("t0")?,
    })
}

/// `segment = x,y,z -> x,y,z @ speed on|off`
fn parse_segment(v: &str, line: usize) -> Result<Segment<F>, ConfigError> {
    let bad = |what: &str| at(line, format!("segment: {what} (format: 'x,y,z -> x,y,z @ speed on|off')"));
    let (ends, tail) = v.split_once('@').ok_or_else(|| bad("missing '@ speed'"))?;
    let (from_str, to_str) = ends.split_once("->").ok_or_else(|| bad("missing '->'"))?;
    let from = parse_float_list(from_str.trim(), line, "segment")?;
    let to = parse_float_list(to_str.trim(), line, "segment")?;
    if from.len() != 3 || to.len() != 3 {
        return Err(bad("endpoints need three coordinates"));
    }
    let mut tail_tokens = tail.split_whitespace();
    let speed = parse_float(tail_tokens.next().ok_or_else(|| bad("missing speed"))?, line, "segment")?;
    let power_on = match tail_tokens.next() {
        Some("on") => true,
        Some("off") => false,
        _ => return Err(bad("expected 'on' or 'off' after the speed")),
    };
    if tail_tokens.next().is_some() {
        return Err(bad("trailing tokens"));
    }
    Ok(Segment {
        from: [from[0], from[1], from[2]],
        to: [to[0], to[1], to[2]],
        speed,
        power_on,
    })
}

fn parse_laser(s: &mut Section) -> Result<LaserSpec<F>, ConfigError> {
    let power = s.req_f("power")?;
    let beam_radius = s.req_f("beam-radius")?;
    let dwell = s.req_f("dwell")?;
    let segments = s
        .raw
        .get_all(s.idx, "segment")
        .into_iter()
        .map(|(v, line)| parse_segment(&v, line))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LaserSpec { power, beam_radius, segments, dwell })
}

/// `<name> = <value> trainable|fixed`
fn parse_mu(name: MuName, v: &str, line: usize) -> Result<MuCfg, ConfigError> {
    let mut tokens = v.split_whitespace();
    let value = parse_float(
        tokens.next().ok_or_else(|| at(line, format!("mu '{}' has no value", name.as_str())))?,
        line,
        name.as_str(),
    )?;
    if value <= 0.0 {
        return Err(at(
            line,
            format!("mu '{}' must start positive, got {value}", name.as_str()),
        ));
    }
    let trainable = match tokens.next() {
        Some("trainable") => true,
        Some("fixed") => false,
        _ => {
            return Err(at(
                line,
                format!("mu '{}' needs 'trainable' or 'fixed' after the value", name.as_str()),
            ))
        }
    };
    if tokens.next().is_some() {
        return Err(at(line, format!("mu '{}': trailing tokens", name.as_str())));
    }
    Ok(MuCfg { name, value, trainable })
}

fn parse_reference(s: &mut Section) -> Result<RefCfg, ConfigError> {
    let spacing = match s.opt_f("spacing")? {
        Some(h) => [h, h, h],
        None => [
            s.req_f("spacing-x")?,
            s.req_f("spacing-y")?,
            s.req_f("spacing-z")?,
        ],
    };
    let (integ, line) = s.req_str("integrator")?;
    let integrator = match integ.as_str() {
        "crank-nicolson" => Integrator::CrankNicolson,
        "explicit-euler" => Integrator::ExplicitEuler,
        other => {
            return Err(at(
                line,
                format!("integrator must be crank-nicolson or explicit-euler, got '{other}'"),
            ))
        }
    };
    let grid = GridSpec { spacing, dt: s.req_f("dt")?, integrator };
    let snapshot_every = s.req_usize("snapshot-every")?;
    if snapshot_every == 0 {
        return Err(at(s.line(), "snapshot-every must be at least 1"));
    }
    let export = match s.opt_raw("export")? {
        None => None,
        Some((v, line)) => match v.as_str() {
            "full" => Some(ExportMode::Full),
            "random" => {
                let count = s.opt_usize("export-count")?.ok_or_else(|| {
                    at(line, "export = random needs 'export-count'")
                })?;
                let seed = s.opt_u64("export-seed")?.unwrap_or(0);
                Some(ExportMode::Random { count, seed })
            }
            other => {
                return Err(at(line, format!("export must be full or random, got '{other}'")))
            }
        },
    };
    Ok(RefCfg { grid, snapshot_every, export })
}

impl RunConfig {
    /// Cross-field checks that need the typed values.
    fn validate_semantics(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Global(m));
        self.domain.validate().map_err(|e| ConfigError::Global(e.to_string()))?;
        self.laser.validate().map_err(|e| ConfigError::Global(e.to_string()))?;
        // Property positivity over the temperature range the run can visit.
        let span = self.dt_ref.unwrap_or(2000.0);
        self.phys.validate(span).map_err(|e| ConfigError::Global(e.to_string()))?;
        if let Some(w) = &self.training {
            w.train.validate().map_err(|e| ConfigError::Global(e.to_string()))?;
        }
        self.weights.validate().map_err(|e| ConfigError::Global(e.to_string()))?;
        match self.mode {
            Mode::Inverse => {
                if !self.mu.iter().any(|m| m.trainable) {
                    return fail(
                        "inverse mode needs at least one trainable parameter in [mu]".to_string(),
                    );
                }
                if self.data.is_none() && self.ir_data.is_none() {
                    return fail(
                        "inverse mode needs measurements: give [data] or [ir-data]".to_string(),
                    );
                }
            }
            Mode::Hybrid => {
                if !matches!(self.domain.geometry, Geometry::ThinWall { .. }) {
                    return fail("hybrid mode requires the thin-wall geometry".to_string());
                }
                if self.ir_data.is_none() {
                    return fail("hybrid mode needs camera frames: give [ir-data]".to_string());
                }
            }
            _ => {}
        }
        if let Some(ir) = &self.ir_data {
            if ir.factor == 0 {
                return fail("[ir-data] factor must be at least 1".to_string());
            }
            if let Some([lo, hi]) = ir.band {
                if lo > hi {
                    return fail(format!("[ir-data] band [{lo}, {hi}] is reversed"));
                }
            }
        }
        if let Some(cam) = &self.camera {
            cam.spec
                .validate(self.phys.t0)
                .map_err(|e| ConfigError::Global(e.to_string()))?;
        }
        Ok(())
    }

    /// Render the resolved configuration: every value the run actually uses,
    /// defaults and overrides folded in. Parsing the result reproduces this
    /// config exactly.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        writeln!(s, "[run]").unwrap();
        writeln!(s, "mode = {}", self.mode.as_str()).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "out = {}", self.out.display()).unwrap();

        writeln!(s, "\n[domain]").unwrap();
        match self.domain.geometry {
            Geometry::Box3 { lx, ly, lz } => {
                writeln!(s, "geometry = box").unwrap();
                writeln!(s, "lx = {lx}\nly = {ly}\nlz = {lz}").unwrap();
            }
            Geometry::ThinWall { length, height, thickness, k_sub, substrate_height, top_edge } => {
                writeln!(s, "geometry = thin-wall").unwrap();
                writeln!(s, "length = {length}\nheight = {height}\nthickness = {thickness}")
                    .unwrap();
                writeln!(s, "k-substrate = {k_sub}\nsubstrate-height = {substrate_height}")
                    .unwrap();
                let edge = match top_edge {
                    TopEdge::DataOnly => "data-only",
                    TopEdge::Flux => "flux",
                };
                writeln!(s, "top-edge = {edge}").unwrap();
            }
            Geometry::Rod { length, source_depth } => {
                writeln!(s, "geometry = rod").unwrap();
                writeln!(s, "length = {length}\nsource-depth = {source_depth}").unwrap();
            }
        }
        writeln!(s, "t-end = {}", self.domain.t_end).unwrap();

        writeln!(s, "\n[physical]").unwrap();
        writeln!(s, "rho = {}", self.phys.rho).unwrap();
        let write_prop = |s: &mut String, base: &str, p: &PropertyModel<F>| match *p {
            PropertyModel::Constant(c) => writeln!(s, "{base} = {c}").unwrap(),
            PropertyModel::Affine { slope, intercept } => {
                writeln!(s, "{base}-slope = {slope}\n{base}-intercept = {intercept}").unwrap()
            }
        };
        write_prop(&mut s, "cp", &self.phys.cp);
        write_prop(&mut s, "k", &self.phys.k);
        writeln!(s, "h = {}", self.phys.h).unwrap();
        writeln!(s, "emissivity = {}", self.phys.emissivity).unwrap();
        writeln!(s, "absorptivity = {}", self.phys.absorptivity).unwrap();
        writeln!(s, "t0 = {}", self.phys.t0).unwrap();

        writeln!(s, "\n[laser]").unwrap();
        writeln!(s, "power = {}", self.laser.power).unwrap();
        writeln!(s, "beam-radius = {}", self.laser.beam_radius).unwrap();
        writeln!(s, "dwell = {}", self.laser.dwell).unwrap();
        for seg in &self.laser.segments {
            writeln!(
                s,
                "segment = {},{},{} -> {},{},{} @ {} {}",
                seg.from[0],
                seg.from[1],
                seg.from[2],
                seg.to[0],
                seg.to[1],
                seg.to[2],
                seg.speed,
                if seg.power_on { "on" } else { "off" }
            )
            .unwrap();
        }

        if let Some(dt_ref) = self.dt_ref {
            writeln!(s, "\n[scaling]").unwrap();
            writeln!(s, "dt-ref = {dt_ref}").unwrap();
        }

        if self.mode.trains() || self.mode == Mode::Eval {
            writeln!(s, "\n[loss]").unwrap();
            writeln!(s, "weight-boundary = {}", self.weights.boundary).unwrap();
            writeln!(s, "weight-initial = {}", self.weights.initial).unwrap();
            writeln!(s, "weight-residual = {}", self.weights.residual).unwrap();
            writeln!(s, "weight-data = {}", self.weights.data).unwrap();
        }

        if self.mode.trains() {
            writeln!(s, "\n[sampling]").unwrap();
            writeln!(s, "dt-slice = {}", self.sampling.dt_slice).unwrap();
            writeln!(s, "coarse-spacing = {}", self.sampling.coarse_spacing).unwrap();
            writeln!(s, "fine-spacing = {}", self.sampling.fine_spacing).unwrap();
            writeln!(s, "fine-window = {}", self.sampling.fine_window).unwrap();
            writeln!(s, "top-spacing = {}", self.sampling.interior_top_spacing).unwrap();
            writeln!(s, "top-band = {}", self.sampling.interior_top_band).unwrap();
            writeln!(s, "lower-spacing = {}", self.sampling.interior_lower_spacing).unwrap();
        }

        if let Some(net) = &self.network {
            writeln!(s, "\n[network]").unwrap();
            let widths: Vec<String> = net.hidden.iter().map(|w| w.to_string()).collect();
            writeln!(s, "hidden = {}", widths.join(",")).unwrap();
            writeln!(s, "init-seed = {}", net.init_seed).unwrap();
        }

        if let Some(t) = &self.training {
            writeln!(s, "\n[training]").unwrap();
            writeln!(s, "epochs = {}", t.train.epochs).unwrap();
            writeln!(s, "lr = {}", t.train.adam.lr).unwrap();
            writeln!(s, "beta1 = {}", t.train.adam.beta1).unwrap();
            writeln!(s, "beta2 = {}", t.train.adam.beta2).unwrap();
            writeln!(s, "eps = {}", t.train.adam.eps).unwrap();
            writeln!(s, "eval-every = {}", t.train.eval_every).unwrap();
            if let Some(b) = t.train.batch_size {
                writeln!(s, "batch-size = {b}").unwrap();
            }
            writeln!(s, "divergence-threshold = {}", t.train.divergence_threshold).unwrap();
            writeln!(s, "divergence-patience = {}", t.train.divergence_patience).unwrap();
            if let Some(w) = &t.warm_start {
                writeln!(s, "warm-start = {}", w.display()).unwrap();
            }
        }

        if !self.mu.is_empty() {
            writeln!(s, "\n[mu]").unwrap();
            for m in &self.mu {
                writeln!(
                    s,
                    "{} = {} {}",
                    m.name.as_str(),
                    m.value,
                    if m.trainable { "trainable" } else { "fixed" }
                )
                .unwrap();
            }
        }

        if let Some(r) = &self.reference {
            writeln!(s, "\n[reference]").unwrap();
            let [hx, hy, hz] = r.grid.spacing;
            if hx == hy && hy == hz {
                writeln!(s, "spacing = {hx}").unwrap();
            } else {
                writeln!(s, "spacing-x = {hx}\nspacing-y = {hy}\nspacing-z = {hz}").unwrap();
            }
            writeln!(s, "dt = {}", r.grid.dt).unwrap();
            let integ = match r.grid.integrator {
                Integrator::CrankNicolson => "crank-nicolson",
                Integrator::ExplicitEuler => "explicit-euler",
            };
            writeln!(s, "integrator = {integ}").unwrap();
            writeln!(s, "snapshot-every = {}", r.snapshot_every).unwrap();
            match r.export {
                None => {}
                Some(ExportMode::Full) => writeln!(s, "export = full").unwrap(),
                Some(ExportMode::Random { count, seed }) => {
                    writeln!(s, "export = random").unwrap();
                    writeln!(s, "export-count = {count}").unwrap();
                    writeln!(s, "export-seed = {seed}").unwrap();
                }
            }
        }

        if let Some(d) = &self.data {
            writeln!(s, "\n[data]").unwrap();
            writeln!(s, "dataset = {}", d.dataset.display()).unwrap();
            if let Some(c) = d.count {
                writeln!(s, "count = {c}").unwrap();
            }
            writeln!(s, "data-seed = {}", d.seed).unwrap();
            writeln!(s, "weight = {}", d.weight).unwrap();
        }

        if let Some(v) = &self.validation {
            writeln!(s, "\n[validation]").unwrap();
            writeln!(s, "dataset = {}", v.display()).unwrap();
        }

        if let Some(c) = &self.camera {
            writeln!(s, "\n[camera]").unwrap();
            writeln!(s, "window = {}", c.spec.window).unwrap();
            writeln!(s, "pitch = {}", c.spec.pitch).unwrap();
            writeln!(s, "frame-rate = {}", c.spec.frame_rate).unwrap();
            writeln!(s, "saturation = {}", c.spec.saturation).unwrap();
            writeln!(s, "noise-sigma = {}", c.spec.noise_sigma).unwrap();
            writeln!(s, "camera-seed = {}", c.spec.seed).unwrap();
            if let Some([x, y]) = c.spec.center {
                writeln!(s, "center = {x},{y}").unwrap();
            }
            writeln!(s, "output = {}", c.output).unwrap();
        }

        if let Some(ir) = &self.ir_data {
            writeln!(s, "\n[ir-data]").unwrap();
            writeln!(s, "stack = {}", ir.stack.display()).unwrap();
            if let Some(c) = ir.crop {
                writeln!(s, "crop = {},{},{},{}", c.row0, c.col0, c.rows, c.cols).unwrap();
            }
            writeln!(s, "factor = {}", ir.factor).unwrap();
            writeln!(s, "anchor = {},{}", ir.placement.anchor[0], ir.placement.anchor[1]).unwrap();
            writeln!(s, "rows-run-down = {}", ir.placement.rows_run_down).unwrap();
            writeln!(s, "plane-z = {}", ir.placement.plane_z).unwrap();
            if let Some([lo, hi]) = ir.band {
                writeln!(s, "band = {lo},{hi}").unwrap();
            }
            writeln!(s, "weight = {}", ir.weight).unwrap();
        }

        if let Some(e) = &self.eval {
            writeln!(s, "\n[eval]").unwrap();
            writeln!(s, "checkpoint = {}", e.checkpoint.display()).unwrap();
            writeln!(s, "dataset = {}", e.dataset.display()).unwrap();
        }

        s
    }
}
