//! Experiment configuration: a flat `key = value` file whose keys mirror the
//! fields of [`ExperimentConfig`]. Unknown keys are rejected.
//!
//! | key | default |
//! |---|---|
//! | `experiment` | `default` |
//! | `model`, `data` | unset (built-in tiny network and generated data) |
//! | `loss` | `squared` |
//! | `rank` | 8 |
//! | `gamma` | 16 |
//! | `eta` | `1/sqrt(rank)` |
//! | `oversample` | `rank` |
//! | `power_iters` | 1 |
//! | `probes` | 1 (`exact` selects the exact constructions) |
//! | `seeds` | `0` (comma separated) |
//! | `shift` | `no-shift` |
//! | `out` | unset |
//! | `tasks` | `synthetic,network` |
//! | `batch_size` | 16 |
//! | `accumulate` | 32 |
//! | `layer` | unset (all layers) |
//! | `strict` | `false` (zero-gradient layers are skipped with a warning) |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::curvature::SubspaceParams;
use crate::error::{Error, Result};
use crate::init::{InitParams, ShiftMode, DEFAULT_GAMMA, DEFAULT_RANK};
use crate::io::{parse_entries, Entry};
use crate::model::{CapturePlan, LossKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    /// Exact Kronecker instance (or an exact cross-entropy regime).
    Synthetic,
    /// Tiny tanh network, first layer adapted.
    Network,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Synthetic => "synthetic",
            Task::Network => "network",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Task::Synthetic),
            "network" => Ok(Task::Network),
            other => Err(Error::Invalid(format!("unknown task `{other}` (expected synthetic or network)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub loss: LossKind,
    pub rank: usize,
    pub gamma: f64,
    pub eta: Option<f64>,
    pub oversample: Option<usize>,
    pub power_iters: usize,
    /// `None` selects exact probes.
    pub probes: Option<usize>,
    pub seeds: Vec<u64>,
    pub shift: ShiftMode,
    pub out: Option<PathBuf>,
    pub tasks: Vec<Task>,
    pub batch_size: usize,
    pub accumulate: usize,
    pub layer: Option<usize>,
    pub strict: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: "default".into(),
            model: None,
            data: None,
            loss: LossKind::Squared,
            rank: DEFAULT_RANK,
            gamma: DEFAULT_GAMMA,
            eta: None,
            oversample: None,
            power_iters: 1,
            probes: Some(1),
            seeds: vec![0],
            shift: ShiftMode::NoShift,
            out: None,
            tasks: vec![Task::Synthetic, Task::Network],
            batch_size: 16,
            accumulate: 32,
            layer: None,
            strict: false,
        }
    }
}

fn list<T: FromStr>(e: &Entry, what: &str) -> Result<Vec<T>> {
    let items = e
        .value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| e.error(format!("`{s}` is not a valid {what}"))))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(e.error(format!("`{}` needs at least one {what}", e.key)));
    }
    Ok(items)
}

fn positive<T: PartialOrd + Default + FromStr>(e: &Entry, what: &str) -> Result<T> {
    let v: T = e.parse(what)?;
    if v <= T::default() {
        return Err(e.error(format!("`{}` must be positive", e.key)));
    }
    Ok(v)
}

impl ExperimentConfig {
    /// Parses a config document; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let path = |v: &str| match base {
            Some(b) if Path::new(v).is_relative() => b.join(v),
            _ => PathBuf::from(v),
        };
        for e in parse_entries(text)? {
            match e.key.as_str() {
                "experiment" => cfg.experiment = e.value.clone(),
                "model" => cfg.model = Some(path(&e.value)),
                "data" => cfg.data = Some(path(&e.value)),
                "out" => cfg.out = Some(path(&e.value)),
                "loss" => cfg.loss = e.value.parse().map_err(|err: Error| e.error(err.to_string()))?,
                "shift" => cfg.shift = e.value.parse().map_err(|err: Error| e.error(err.to_string()))?,
                "rank" => cfg.rank = positive(&e, "rank")?,
                "gamma" => cfg.gamma = positive(&e, "gamma")?,
                "eta" => cfg.eta = Some(positive(&e, "eta")?),
                "oversample" => cfg.oversample = Some(positive(&e, "sketch width")?),
                "power_iters" => cfg.power_iters = e.parse("iteration count")?,
                "probes" => {
                    cfg.probes = if e.value == "exact" {
                        None
                    } else {
                        Some(positive(&e, "probe count")?)
                    }
                }
                "seeds" => cfg.seeds = list(&e, "seed")?,
                "tasks" => cfg.tasks = list(&e, "task")?,
                "batch_size" => cfg.batch_size = positive(&e, "batch size")?,
                "accumulate" => cfg.accumulate = positive(&e, "accumulation count")?,
                "layer" => cfg.layer = Some(e.parse("layer index")?),
                "strict" => cfg.strict = e.parse("boolean")?,
                other => return Err(e.error(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Invalid("seeds must be non-empty".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Invalid("tasks must be non-empty".into()));
        }
        if self.model.is_some() != self.data.is_some() {
            return Err(Error::Invalid("model and data must be given together".into()));
        }
        self.init_params()?;
        Ok(())
    }

    pub fn sketch_width(&self) -> usize {
        self.oversample.unwrap_or(self.rank)
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(1.0 / (self.rank as f64).sqrt())
    }

    pub fn init_params(&self) -> Result<InitParams> {
        InitParams::with_eta(self.rank, self.gamma, self.eta(), self.shift)
    }

    pub fn subspace_params(&self, seed: u64) -> Result<SubspaceParams> {
        SubspaceParams::new(self.sketch_width(), self.power_iters, seed)
    }

    pub fn capture_plan(&self, classes: usize, seed: u64) -> Result<CapturePlan> {
        CapturePlan::for_loss(self.loss, classes, self.probes, seed)
    }

    /// Total number of samples of one accumulated capture.
    pub fn samples(&self) -> usize {
        self.batch_size * self.accumulate
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::parse("", None).unwrap();
        assert_eq!((cfg.rank, cfg.sketch_width(), cfg.power_iters, cfg.samples()), (8, 8, 1, 512));
        let cfg = ExperimentConfig::parse("rank = 4\nseeds = 1, 2,3\nprobes = exact\nshift = shift\n", None).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.probes, None);
        assert_eq!(cfg.sketch_width(), 4);
        assert_eq!(cfg.shift, ShiftMode::Shift);
    }

    #[test]
    fn unknown_keys_are_located() {
        match ExperimentConfig::parse("rank = 2\n  rnak = 3\n", None) {
            Err(Error::Parse { line: 2, message, .. }) => assert!(message.contains("rnak")),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::parse("gamma = -1", None).is_err());
        assert!(ExperimentConfig::parse("seeds = ,", None).is_err());
    }
}
