use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{run_experiment, ExperimentOutput};
use crate::harness::pipeline::{adapter_norms, capture_accumulated, infer_loss, layer_init};
use crate::harness::verify::{run_suite, Report};
use crate::init::LoraInit;
use crate::io::{decode_signals, encode_adapters, encode_signal_record, parse_data, parse_model, read_file, signals_header};
use crate::linalg::{svd_values, tail_energy};
use crate::model::{Batch, Network};

#[derive(Clone, Debug, PartialEq)]
pub struct SignalsSummary {
    pub layers: Vec<usize>,
    pub samples: usize,
    pub bytes: usize,
}

/// Captures the requested layers one at a time, streaming each record to
/// `sink` before the next layer is touched.
pub fn capture_signals_to(
    net: &Network,
    batch: &Batch,
    cfg: &ExperimentConfig,
    seed: u64,
    sink: &mut impl Write,
) -> Result<SignalsSummary> {
    let layers: Vec<usize> = match cfg.layer {
        Some(l) => {
            net.layer(l)?;
            vec![l]
        }
        None => (0..net.num_layers()).collect(),
    };
    let plan = cfg.capture_plan(net.out_dim(), seed)?;
    let header = signals_header(layers.len());
    sink.write_all(&header)?;
    let mut bytes = header.len();
    for &l in &layers {
        let rec = capture_accumulated(net, batch, l, &plan, cfg.batch_size)
            .map_err(|e| Error::Invalid(format!("layer {l}: {e}")))?;
        let enc = encode_signal_record(&rec);
        sink.write_all(&enc)?;
        bytes += enc.len();
    }
    sink.flush()?;
    Ok(SignalsSummary {
        layers,
        samples: batch.samples(),
        bytes,
    })
}

/// `signals`: model and data files to a signals container.
pub fn cmd_signals(model: &Path, data: &Path, cfg: &ExperimentConfig, out: &Path) -> Result<SignalsSummary> {
    let m = parse_model(&std::fs::read_to_string(model)?)?;
    let batch = parse_data(&std::fs::read_to_string(data)?, &m.network, m.tokens, cfg.loss)?;
    let mut sink = BufWriter::new(File::create(out)?);
    capture_signals_to(&m.network, &batch, cfg, cfg.seeds[0], &mut sink)
}

#[derive(Clone, Debug)]
pub struct InitSummary {
    pub inits: Vec<LoraInit>,
    pub lines: Vec<String>,
    pub skipped: Vec<usize>,
}

/// `init`: signals container to adapters, one per captured layer. Layers
/// without a usable gradient are skipped with a warning unless `strict`.
pub fn cmd_init(signals: &Path, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<InitSummary> {
    let records = decode_signals(&read_file(signals)?)?;
    let sp = cfg.subspace_params(cfg.seeds[0])?;
    let ip = cfg.init_params()?;
    let mut summary = InitSummary {
        inits: Vec::new(),
        lines: Vec::new(),
        skipped: Vec::new(),
    };
    for rec in records.iter().filter(|r| cfg.layer.is_none_or(|l| l == r.layer)) {
        let loss = infer_loss(rec)?;
        if loss != cfg.loss {
            return Err(invalid(format!(
                "layer {} was captured for {loss}, config asks for {}",
                rec.layer, cfg.loss
            )));
        }
        let result = match layer_init(rec, &sp, &ip) {
            Ok(r) => r,
            Err(Error::ZeroGradient) if !cfg.strict => {
                summary.lines.push(format!("warning: layer {} has a zero whitened gradient; skipped", rec.layer));
                summary.skipped.push(rec.layer);
                continue;
            }
            Err(e) => return Err(e),
        };
        let init = result.outcome.init;
        let sv = svd_values(&result.whitened.f)?;
        let (na, nb) = adapter_norms(&init.a, &init.b)?;
        summary.lines.push(format!(
            "layer {}: r={} r_S={} r_T={} |A0|={:.6e} |B0|={:.6e} target={:.6e} tail_r={:.6e} tail_2r={:.6e}{}",
            init.layer,
            init.rank,
            result.factors.r_s(),
            result.factors.r_t(),
            na,
            nb,
            init.target_norm(),
            tail_energy(&sv, init.rank),
            tail_energy(&sv, 2 * init.rank),
            if result.outcome.overflow { " (rank overflow)" } else { "" }
        ));
        summary.inits.push(init);
    }
    if let Some(out) = out {
        crate::io::write_file(out, &encode_adapters(&summary.inits))?;
    }
    Ok(summary)
}

pub fn cmd_verify(suite: &str, seeds: &[u64]) -> Result<Report> {
    run_suite(suite, seeds)
}

/// Path of the text summary written next to the CSV.
pub fn summary_path(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".summary.txt");
    PathBuf::from(name)
}

/// `experiment`: runs the comparison and writes the CSV (and its summary)
/// when an output path is configured.
pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let output = run_experiment(cfg)?;
    if let Some(out) = &cfg.out {
        std::fs::write(out, &output.csv)?;
        std::fs::write(summary_path(out), &output.summary)?;
    }
    Ok(output)
}
