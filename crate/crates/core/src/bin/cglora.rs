use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cglora::harness::{cmd_experiment, cmd_init, cmd_signals, cmd_verify, ExperimentConfig, SUITES};
use cglora::init::ShiftMode;
use cglora::model::LossKind;
use cglora::Error;

#[derive(Parser)]
#[command(name = "cglora", version, about = "Curvature-guided LoRA initialization and its dense oracle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Capture layer signals from a model spec and a data file.
    Signals {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
    /// Compute adapters from a signals file.
    Init {
        #[arg(long)]
        signals: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
    /// Run a named invariant suite.
    Verify {
        suite: String,
        #[command(flatten)]
        opts: Opts,
    },
    /// Compare initialization schemes and write a CSV report.
    Experiment {
        #[command(flatten)]
        opts: Opts,
    },
}

#[derive(Args)]
struct Opts {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    oversample: Option<usize>,
    #[arg(long = "power-iters")]
    power_iters: Option<usize>,
    /// Probe count, or `exact`.
    #[arg(long)]
    probes: Option<String>,
    #[arg(long, value_parser = ["shift", "no-shift"])]
    shift: Option<String>,
    #[arg(long, value_parser = ["squared", "bce", "ce"])]
    loss: Option<String>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    layer: Option<usize>,
    /// Fail on zero-gradient layers instead of skipping them.
    #[arg(long)]
    strict: bool,
}

impl Opts {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if let Some(r) = self.rank {
            cfg.rank = r;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if self.eta.is_some() {
            cfg.eta = self.eta;
        }
        if self.oversample.is_some() {
            cfg.oversample = self.oversample;
        }
        if let Some(q) = self.power_iters {
            cfg.power_iters = q;
        }
        if let Some(p) = &self.probes {
            cfg.probes = if p == "exact" {
                None
            } else {
                Some(
                    p.parse()
                        .ok()
                        .filter(|&n: &usize| n > 0)
                        .ok_or_else(|| Error::Invalid(format!("--probes expects a positive count or `exact`, got `{p}`")))?,
                )
            };
        }
        if let Some(s) = &self.shift {
            cfg.shift = s.parse::<ShiftMode>()?;
        }
        if let Some(l) = &self.loss {
            cfg.loss = l.parse::<LossKind>()?;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if self.layer.is_some() {
            cfg.layer = self.layer;
        }
        cfg.strict |= self.strict;
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Usage(Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::Io(_) | Error::Format(_) => Failure::Usage(e),
            other => Failure::Run(other),
        }
    }
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Signals { model, data, opts } => {
            let cfg = opts.config().map_err(Failure::Usage)?;
            let out = cfg
                .out
                .clone()
                .ok_or_else(|| Failure::Usage(Error::Invalid("signals needs --out".into())))?;
            let s = cmd_signals(&model, &data, &cfg, &out)?;
            println!("captured layers {:?} over {} samples ({} bytes)", s.layers, s.samples, s.bytes);
            Ok(true)
        }
        Command::Init { signals, opts } => {
            let cfg = opts.config().map_err(Failure::Usage)?;
            let s = cmd_init(&signals, &cfg, cfg.out.as_deref())?;
            for line in &s.lines {
                println!("{line}");
            }
            Ok(true)
        }
        Command::Verify { suite, opts } => {
            if !SUITES.contains(&suite.as_str()) {
                return Err(Failure::Usage(Error::Invalid(format!(
                    "unknown suite `{suite}`; available: {}",
                    SUITES.join(", ")
                ))));
            }
            let cfg = opts.config().map_err(Failure::Usage)?;
            let report = cmd_verify(&suite, &cfg.seeds)?;
            println!("{report}");
            Ok(report.passed())
        }
        Command::Experiment { opts } => {
            let cfg = opts.config().map_err(Failure::Usage)?;
            let out = cmd_experiment(&cfg)?;
            if cfg.out.is_none() {
                print!("{}", out.csv);
            }
            eprint!("{}", out.summary);
            Ok(out.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
