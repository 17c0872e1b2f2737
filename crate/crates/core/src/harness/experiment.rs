//! Scheme comparison on exact synthetic instances and on the tiny network.
//!
//! CSV layout (schema 1), preceded by the comment line
//! `# cglora-experiment schema=1`:
//!
//! `task,scheme,seed,alignment_error,tail_r,tail_2r,newton_gap,phi_cond,norm_a,norm_b,start_offset`
//!
//! * `alignment_error`: `‖(Π_J - Π_{JH}) Z‖` with `Z = Y - f₀` (squared) or
//!   `Y - p₀` (cross-entropy).
//! * `tail_r`, `tail_2r`: tail energies of the whitened gradient `F`.
//! * `newton_gap`: `‖f̂ - f̂_{A₀,B₀}‖` between the first Newton steps
//!   (cross-entropy only, empty otherwise).
//! * `phi_cond`: condition number of `Φ` (cross-entropy only).
//! * `norm_a`, `norm_b`: spectral norms of `A₀` and `B₀`.
//! * `start_offset`: `‖W_start - W₀‖_F` of the effective starting weight.
//!
//! Rows are ordered by task, scheme and then seed as listed in the config;
//! every (task, scheme) group ends with a `mean` and a `std` row (sample
//! standard deviation, 0 for a single seed).
//!
//! Schemes: `zero` (Kaiming `A₀`, `B₀ = 0`), `random` (Gaussian pair scaled to
//! the CG-LoRA norm), `gradient-svd` (the balanced realization applied to the
//! top-`r` SVD of the raw gradient, a stand-in for gradient-aligned
//! initializers), `cg-lora-no-shift` and `cg-lora-shift`.

use std::fmt::Write as _;
use std::time::Instant;

use crate::curvature::KfacFactors;
use crate::error::Result;
use crate::harness::config::{ExperimentConfig, Task};
use crate::harness::pipeline::{adapter_norms, capture_accumulated, layer_init, teacher_batch, tiny_network};
use crate::harness::verify::Check;
use crate::init::{baseline_init, cg_lora, effective_start, BaselineKind, InitParams, LoraInit, ShiftMode};
use crate::linalg::{svd_values, tail_energy, unvec, DenseMatrix};
use crate::model::{forward, full_jacobian, probabilities, target_matrix, Batch, LossKind, Network, DEFAULT_JACOBIAN_CAP};
use crate::oracle::{
    constant_p_instance, lora_jacobian_factor, newton_step_binary, newton_step_multiclass, synth_instance,
    uniform_softmax_regime, NtkOracle, SynthSpec,
};
use crate::whitening::{make_gauge, phi, whiten_dense, Phi, WhitenedGradient};

pub const SCHEMA_HEADER: &str = "# cglora-experiment schema=1";
pub const COLUMNS: [&str; 11] = [
    "task",
    "scheme",
    "seed",
    "alignment_error",
    "tail_r",
    "tail_2r",
    "newton_gap",
    "phi_cond",
    "norm_a",
    "norm_b",
    "start_offset",
];
pub const SCHEMES: [&str; 5] = ["zero", "random", "gradient-svd", "cg-lora-no-shift", "cg-lora-shift"];

/// Numeric part of one CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub alignment_error: f64,
    pub tail_r: f64,
    pub tail_2r: f64,
    pub newton_gap: Option<f64>,
    pub phi_cond: Option<f64>,
    pub norm_a: f64,
    pub norm_b: f64,
    pub start_offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub task: Task,
    pub scheme: &'static str,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<Row>,
    pub csv: String,
    pub summary: String,
    pub checks: Vec<Check>,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

/// Everything a task hands to the scheme loop.
struct Instance {
    jacobian: DenseMatrix,
    w0: DenseMatrix,
    /// Stacked `Z`, row index `i * C + c`.
    z: Vec<f64>,
    grad: DenseMatrix,
    factors: KfacFactors,
    whitened: WhitenedGradient,
    newton: Option<Newton>,
    /// The curvature model is exact, so the bounds are asserted.
    exact: bool,
    dims: String,
}

struct Newton {
    f0: DenseMatrix,
    p0: DenseMatrix,
    y: DenseMatrix,
}

impl Newton {
    fn step(&self, jac: &DenseMatrix) -> Result<DenseMatrix> {
        if self.p0.cols() == 1 {
            let v = newton_step_binary(jac, self.f0.as_slice(), self.p0.as_slice(), self.y.as_slice())?;
            DenseMatrix::from_vec(v.len(), 1, v)
        } else {
            newton_step_multiclass(jac, &self.f0, &self.p0, &self.y, &make_gauge(self.p0.cols())?)
        }
    }
}

/// Dimensions of the synthetic squared-loss task: `r_S = 10`, `r_T = 9`,
/// `nC = 90`, `d_in = 12`, `d_out = 10`.
pub fn synthetic_spec(classes: usize, seed: u64) -> SynthSpec {
    SynthSpec::new(10, 9, 90 / classes, classes, 12, 10, seed)
}

fn synthetic(cfg: &ExperimentConfig, seed: u64) -> Result<Instance> {
    match cfg.loss {
        LossKind::Squared => {
            let inst = synth_instance(&synthetic_spec(2, seed))?;
            let whitened = inst.whitened()?;
            Ok(Instance {
                w0: DenseMatrix::zeros(inst.spec.d_out, inst.spec.d_in),
                z: inst.z.clone(),
                grad: inst.grad.clone(),
                factors: inst.factors()?,
                whitened,
                newton: None,
                exact: true,
                dims: format!("{:?}", inst.spec),
                jacobian: inst.jacobian,
            })
        }
        LossKind::Bce => {
            let p = 0.3;
            let inst = constant_p_instance(&synthetic_spec(1, seed), p)?;
            let n = inst.spec.n;
            let y: Vec<f64> = inst.z.iter().map(|&z| (z > 0.0) as u8 as f64).collect();
            let z: Vec<f64> = y.iter().map(|v| v - p).collect();
            let g: Vec<f64> = inst.jacobian.tr_mul_vec(&z).iter().map(|x| -x).collect();
            let grad = unvec(&g, inst.spec.d_out, inst.spec.d_in)?;
            let factors = inst.factors()?;
            let ph = phi(&factors, &inst.weighted_factors()?)?;
            let whitened = WhitenedGradient {
                f: ph.inv_sqrt.mul(&whiten_dense(&grad, &factors)?),
                loss: LossKind::Bce,
                phi: Some(ph),
                gauge: None,
            };
            Ok(Instance {
                w0: DenseMatrix::zeros(inst.spec.d_out, inst.spec.d_in),
                newton: Some(Newton {
                    f0: DenseMatrix::from_vec(n, 1, vec![(p / (1.0 - p)).ln(); n])?,
                    p0: DenseMatrix::from_vec(n, 1, vec![p; n])?,
                    y: DenseMatrix::from_vec(n, 1, y)?,
                }),
                z,
                grad,
                factors,
                whitened,
                exact: true,
                dims: format!("{:?} p0={p}", inst.spec),
                jacobian: inst.jacobian,
            })
        }
        LossKind::Ce => {
            let (net, batch) = uniform_softmax_regime(40, 10, 10, seed)?;
            let cfg = ExperimentConfig {
                probes: None,
                oversample: Some(64),
                ..cfg.clone()
            };
            network_instance(&cfg, &net, &batch, 0, seed, true)
        }
    }
}

fn network_instance(
    cfg: &ExperimentConfig,
    net: &Network,
    batch: &Batch,
    layer: usize,
    seed: u64,
    exact: bool,
) -> Result<Instance> {
    let classes = net.out_dim();
    let plan = cfg.capture_plan(classes, seed)?;
    let rec = capture_accumulated(net, batch, layer, &plan, cfg.batch_size)?;
    let result = layer_init(&rec, &cfg.subspace_params(seed)?, &cfg.init_params()?)?;
    let logits = forward(net, batch)?;
    let y = target_matrix(batch, cfg.loss, classes)?;
    let (z, newton) = match cfg.loss {
        LossKind::Squared => (y.sub(&logits), None),
        _ => {
            let p0 = probabilities(&logits);
            (
                y.sub(&p0),
                Some(Newton {
                    f0: logits.clone(),
                    p0,
                    y,
                }),
            )
        }
    };
    let l = net.layer(layer)?;
    let dims = format!(
        "layer {layer}: d_in={} d_out={} n={} C={classes} r_S={} r_T={}",
        l.in_dim(),
        l.out_dim(),
        batch.samples(),
        result.factors.r_s(),
        result.factors.r_t()
    );
    Ok(Instance {
        jacobian: full_jacobian(net, batch, layer, DEFAULT_JACOBIAN_CAP)?,
        w0: l.weight().clone(),
        z: z.as_slice().to_vec(),
        grad: rec.gradient()?,
        factors: result.factors,
        whitened: result.whitened,
        newton,
        exact,
        dims,
    })
}

fn network(cfg: &ExperimentConfig, seed: u64) -> Result<Instance> {
    let (net, batch) = match (&cfg.model, &cfg.data) {
        (Some(model), Some(data)) => {
            let m = crate::io::parse_model(&std::fs::read_to_string(model)?)?;
            let b = crate::io::parse_data(&std::fs::read_to_string(data)?, &m.network, m.tokens, cfg.loss)?;
            (m.network, b)
        }
        _ => {
            let net = tiny_network(cfg.loss, seed)?;
            let batch = teacher_batch(&net, cfg.loss, cfg.samples(), 1, seed)?;
            (net, batch)
        }
    };
    network_instance(cfg, &net, &batch, cfg.layer.unwrap_or(0), seed, false)
}

fn scheme_init(scheme: &str, inst: &Instance, params: &InitParams, seed: u64) -> Result<LoraInit> {
    let with_shift = |shift| InitParams { shift, ..*params };
    Ok(match scheme {
        "zero" => baseline_init(BaselineKind::Zero, &inst.grad, params, seed, 0)?,
        "random" => baseline_init(BaselineKind::Random, &inst.grad, params, seed, 0)?,
        "gradient-svd" => baseline_init(BaselineKind::GradientSvd, &inst.grad, params, seed, 0)?,
        "cg-lora-no-shift" => cg_lora(&inst.whitened, &inst.factors, &with_shift(ShiftMode::NoShift), 0)?.init,
        "cg-lora-shift" => cg_lora(&inst.whitened, &inst.factors, &with_shift(ShiftMode::Shift), 0)?.init,
        other => unreachable!("unknown scheme {other}"),
    })
}

struct Cell {
    task: Task,
    seed: u64,
    rows: Vec<Row>,
    checks: Vec<Check>,
    dims: String,
    seconds: f64,
}

fn run_cell(cfg: &ExperimentConfig, task: Task, seed: u64) -> Result<Cell> {
    let start = Instant::now();
    let inst = match task {
        Task::Synthetic => synthetic(cfg, seed)?,
        Task::Network => network(cfg, seed)?,
    };
    let params = cfg.init_params()?;
    let r = params.rank;
    let sv = svd_values(&inst.whitened.f)?;
    let (tail_r, tail_2r) = (tail_energy(&sv, r), tail_energy(&sv, 2 * r));
    let phi: Option<&Phi> = inst.whitened.phi.as_ref();
    let oracle = NtkOracle::new(&inst.jacobian)?;
    let full_step = inst.newton.as_ref().map(|n| n.step(&inst.jacobian)).transpose()?;
    let target = (inst.factors.d_out() as f64).powf(0.25) / params.gamma;
    let mut rows = Vec::with_capacity(SCHEMES.len());
    let mut checks = Vec::new();
    for scheme in SCHEMES {
        let init = scheme_init(scheme, &inst, &params, seed)?;
        let alignment_error = oracle.alignment_error(&init, &inst.z)?;
        let newton_gap = match (&inst.newton, &full_step) {
            (Some(n), Some(full)) => {
                let jh = inst.jacobian.mul(&lora_jacobian_factor(&init));
                Some(full.sub(&n.step(&jh)?).frobenius_norm())
            }
            _ => None,
        };
        let (norm_a, norm_b) = adapter_norms(&init.a, &init.b)?;
        let start_offset = effective_start(&inst.w0, &init)?.sub(&inst.w0).frobenius_norm();
        let tag = format!("{task} seed {seed} {scheme}");
        if scheme.starts_with("cg-lora") {
            checks.push(Check::new(
                format!("{tag} norm law"),
                ((norm_a - target).abs().max((norm_b - target).abs())) / target,
                1e-10,
            ));
        }
        if inst.exact {
            match (newton_gap, phi) {
                (Some(gap), Some(phi)) => {
                    if scheme.starts_with("cg-lora") {
                        checks.push(Check::new(
                            format!("{tag} newton gap - bound"),
                            gap - phi.inv_sqrt_norm() * tail_r,
                            1e-9,
                        ));
                    }
                }
                _ => {
                    checks.push(Check::new(format!("{tag} tail_2r - error"), tail_2r - alignment_error, 1e-9));
                    if scheme.starts_with("cg-lora") {
                        checks.push(Check::new(
                            format!("{tag} |error - tail_r| / tail_r"),
                            (alignment_error - tail_r).abs() / tail_r.max(f64::MIN_POSITIVE),
                            1e-8,
                        ));
                    }
                }
            }
        }
        rows.push(Row {
            task,
            scheme,
            seed,
            metrics: Metrics {
                alignment_error,
                tail_r,
                tail_2r,
                newton_gap,
                phi_cond: phi.map(|p| p.condition),
                norm_a,
                norm_b,
                start_offset,
            },
        });
    }
    Ok(Cell {
        task,
        seed,
        rows,
        checks,
        dims: inst.dims,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn num(v: f64) -> String {
    format!("{:.10e}", v + 0.0)
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn metric_fields(m: &Metrics) -> Vec<Option<f64>> {
    vec![
        Some(m.alignment_error),
        Some(m.tail_r),
        Some(m.tail_2r),
        m.newton_gap,
        m.phi_cond,
        Some(m.norm_a),
        Some(m.norm_b),
        Some(m.start_offset),
    ]
}

fn aggregate(rows: &[&Row]) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let fields: Vec<Vec<Option<f64>>> = rows.iter().map(|r| metric_fields(&r.metrics)).collect();
    let width = fields[0].len();
    let mut mean = Vec::with_capacity(width);
    let mut std = Vec::with_capacity(width);
    for j in 0..width {
        let vals: Option<Vec<f64>> = fields.iter().map(|f| f[j]).collect();
        match vals {
            Some(v) => {
                let n = v.len() as f64;
                let m = v.iter().sum::<f64>() / n;
                let var = if v.len() > 1 {
                    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                mean.push(Some(m));
                std.push(Some(var.sqrt()));
            }
            None => {
                mean.push(None);
                std.push(None);
            }
        }
    }
    (mean, std)
}

/// Renders rows (already in canonical order) as schema-1 CSV.
pub fn render_csv(rows: &[Row], tasks: &[Task]) -> String {
    let mut out = String::new();
    writeln!(out, "{SCHEMA_HEADER}").unwrap();
    writeln!(out, "{}", COLUMNS.join(",")).unwrap();
    for &task in tasks {
        for scheme in SCHEMES {
            let group: Vec<&Row> = rows.iter().filter(|r| r.task == task && r.scheme == scheme).collect();
            if group.is_empty() {
                continue;
            }
            for r in &group {
                let vals: Vec<String> = metric_fields(&r.metrics).into_iter().map(opt).collect();
                writeln!(out, "{task},{scheme},{},{}", r.seed, vals.join(",")).unwrap();
            }
            let (mean, std) = aggregate(&group);
            for (label, vals) in [("mean", mean), ("std", std)] {
                let vals: Vec<String> = vals.into_iter().map(opt).collect();
                writeln!(out, "{task},{scheme},{label},{}", vals.join(",")).unwrap();
            }
        }
    }
    out
}

/// Runs every (task, seed) cell, concurrently, and gathers them in config order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut tasks = cfg.tasks.clone();
    tasks.dedup();
    let jobs: Vec<(Task, u64)> = tasks.iter().flat_map(|&t| cfg.seeds.iter().map(move |&s| (t, s))).collect();
    let cells: Vec<Result<Cell>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(task, seed)| scope.spawn(move || run_cell(cfg, task, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment worker panicked"))
            .collect()
    });
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    let rows: Vec<Row> = cells.iter().flat_map(|c| c.rows.iter().cloned()).collect();
    let checks: Vec<Check> = cells.iter().flat_map(|c| c.checks.iter().cloned()).collect();
    let csv = render_csv(&rows, &tasks);
    let mut summary = String::new();
    writeln!(
        summary,
        "experiment {} loss {} r={} m={} q={} gamma={} eta={} probes={} shift={}",
        cfg.experiment,
        cfg.loss,
        cfg.rank,
        cfg.sketch_width(),
        cfg.power_iters,
        cfg.gamma,
        cfg.eta(),
        cfg.probes.map_or("exact".to_string(), |p| p.to_string()),
        cfg.shift
    )
    .unwrap();
    for c in &cells {
        writeln!(summary, "{} seed {}: {} ({:.3} s)", c.task, c.seed, c.dims, c.seconds).unwrap();
    }
    for c in &checks {
        let tag = if c.passed() { "PASS" } else { "FAIL" };
        writeln!(summary, "{tag} {} residual={:.3e} tolerance={:.1e}", c.name, c.residual, c.tolerance).unwrap();
    }
    Ok(ExperimentOutput {
        rows,
        csv,
        summary,
        checks,
    })
}

/// Checks the header, column set and field counts of a schema-1 CSV.
pub fn validate_csv(csv: &str) -> Result<usize> {
    let bad = |line: usize, msg: String| crate::error::Error::Parse {
        line,
        column: 1,
        message: msg,
    };
    let mut lines = csv.lines();
    if lines.next() != Some(SCHEMA_HEADER) {
        return Err(bad(1, "missing schema header".into()));
    }
    if lines.next() != Some(COLUMNS.join(",").as_str()) {
        return Err(bad(2, "unexpected column header".into()));
    }
    let mut count = 0;
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != COLUMNS.len() {
            return Err(bad(i + 3, format!("expected {} fields, found {}", COLUMNS.len(), cells.len())));
        }
        if cells[0].parse::<Task>().is_err() || !SCHEMES.contains(&cells[1]) {
            return Err(bad(i + 3, format!("unknown task or scheme `{},{}`", cells[0], cells[1])));
        }
        if cells[2] != "mean" && cells[2] != "std" && cells[2].parse::<u64>().is_err() {
            return Err(bad(i + 3, format!("bad seed `{}`", cells[2])));
        }
        for c in &cells[3..] {
            if !c.is_empty() && c.parse::<f64>().map_or(true, |v| !v.is_finite()) {
                return Err(bad(i + 3, format!("bad number `{c}`")));
            }
        }
        count += 1;
    }
    Ok(count)
}
