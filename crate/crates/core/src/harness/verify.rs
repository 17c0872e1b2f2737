//! Named invariant suites driven by the dense oracle.

use std::fmt;

use crate::error::{Error, Result};
use crate::init::{baseline_init, cg_lora, m_svd_implicit, modes, q_star, BaselineKind, InitParams, ShiftMode};
use crate::linalg::{projection, svd_values, tail_energy, thin_qr, thin_svd, DenseMatrix, DEFAULT_CUTOFF};
use crate::model::{
    capture_output_signals, forward, full_jacobian, lambda_block, probabilities, target_matrix, Activation, Batch,
    LayerSpec, LossKind, Network, ProbeKind, ProbeSpec, Targets, DEFAULT_JACOBIAN_CAP,
};
use crate::oracle::{
    alignment_error, newton_step_multiclass, random_adapters, spectrum_bounds, synth_instance, uniform_softmax_regime,
    NtkOracle, SynthSpec,
};
use crate::random::{gaussian_matrix, stream};
use crate::whitening::{make_gauge, reduce_signals, GaugeMatrix};

pub const SUITES: [&str; 9] = [
    "alignment-equality",
    "lower-bound",
    "lemma-factorization",
    "gauge-invariance",
    "spectrum-bounds",
    "hutchinson-convergence",
    "implicit-svd",
    "q-star",
    "rank-overflow",
];

/// One asserted invariant: passes iff `residual <= tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            residual,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.residual <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed()).count()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {} seeds {:?}", self.suite, self.seeds)?;
        for c in &self.checks {
            let tag = if c.passed() { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {} residual={:.3e} tolerance={:.1e}", c.name, c.residual, c.tolerance)?;
        }
        write!(f, "{} checks, {} failed", self.checks.len(), self.failures())
    }
}

pub fn run_suite(name: &str, seeds: &[u64]) -> Result<Report> {
    let suite: fn(u64) -> Result<Vec<Check>> = match name {
        "alignment-equality" => alignment_equality,
        "lower-bound" => |s| lower_bound(s, 200),
        "lemma-factorization" => lemma_factorization,
        "gauge-invariance" => gauge_invariance,
        "spectrum-bounds" => spectrum,
        "hutchinson-convergence" => hutchinson,
        "implicit-svd" => implicit_svd,
        "q-star" => q_star_suite,
        "rank-overflow" => rank_overflow,
        other => {
            return Err(Error::Invalid(format!(
                "unknown suite `{other}`; available: {}",
                SUITES.join(", ")
            )))
        }
    };
    if seeds.is_empty() {
        return Err(Error::Invalid("at least one seed is required".into()));
    }
    let mut checks = Vec::new();
    for &seed in seeds {
        checks.extend(suite(seed)?);
    }
    Ok(Report {
        suite: name.to_string(),
        seeds: seeds.to_vec(),
        checks,
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn params(r: usize) -> InitParams {
    InitParams::new(r, 16.0, ShiftMode::NoShift).expect("valid rank")
}

pub fn alignment_equality(seed: u64) -> Result<Vec<Check>> {
    let inst = synth_instance(&SynthSpec::random(seed))?;
    let factors = inst.factors()?;
    let wg = inst.whitened()?;
    let sv = svd_values(&wg.f)?;
    let mut out = Vec::new();
    for r in [1, 2, 4] {
        let init = cg_lora(&wg, &factors, &params(r), 0)?.init;
        let err = alignment_error(&inst.jacobian, &init, &inst.z)?;
        out.push(Check::new(format!("seed {seed} r {r} |err - tail_r| / tail_r"), rel(err, tail_energy(&sv, r)), 1e-8));
    }
    Ok(out)
}

/// Smallest `error - tail_2r` over `trials` random inits and every scheme.
pub fn lower_bound(seed: u64, trials: usize) -> Result<Vec<Check>> {
    let inst = synth_instance(&SynthSpec::random(seed))?;
    let factors = inst.factors()?;
    let wg = inst.whitened()?;
    let sv = svd_values(&wg.f)?;
    let oracle = NtkOracle::new(&inst.jacobian)?;
    let (d_in, d_out) = (inst.spec.d_in, inst.spec.d_out);
    let mut out = Vec::new();
    for r in [1, 2] {
        let floor = tail_energy(&sv, 2 * r);
        let mut worst = f64::NEG_INFINITY;
        for t in 0..trials {
            let init = random_adapters(d_in, d_out, r, seed.wrapping_mul(1_000_003).wrapping_add(t as u64));
            worst = worst.max(floor - oracle.alignment_error(&init, &inst.z)?);
        }
        let p = params(r);
        let mut inits = vec![cg_lora(&wg, &factors, &p, 0)?.init];
        for kind in [BaselineKind::Zero, BaselineKind::Random, BaselineKind::GradientSvd] {
            inits.push(baseline_init(kind, &inst.grad, &p, seed, 0)?);
        }
        for init in &inits {
            worst = worst.max(floor - oracle.alignment_error(init, &inst.z)?);
        }
        out.push(Check::new(format!("seed {seed} r {r} max(tail_2r - err)"), worst, 1e-9));
    }
    Ok(out)
}

pub fn lemma_factorization(seed: u64) -> Result<Vec<Check>> {
    let inst = synth_instance(&SynthSpec::random(seed))?;
    let oracle = NtkOracle::new(&inst.jacobian)?;
    let mut worst: f64 = 0.0;
    for t in 0..5u64 {
        let r = 1 + (t as usize % 3);
        let init = random_adapters(inst.spec.d_in, inst.spec.d_out, r, seed * 31 + t);
        let dense = oracle.projector_difference(&init)?;
        worst = worst.max(dense.max_abs_diff(&inst.kron_projector_difference(&init)?));
    }
    Ok(vec![Check::new(format!("seed {seed} max |dense - kronecker|"), worst, 1e-10)])
}

fn rotated_gauge(classes: usize, seed: u64) -> Result<(GaugeMatrix, GaugeMatrix)> {
    let g1 = make_gauge(classes)?;
    let mut rng = stream(seed, &[0x9a]);
    let rot = if classes == 2 {
        DenseMatrix::from_diag(&[-1.0])
    } else {
        thin_qr(&gaussian_matrix(classes - 1, classes - 1, &mut rng))?.q
    };
    let g2 = GaugeMatrix::new(g1.matrix().mul(&rot))?;
    Ok((g1, g2))
}

/// `Θ = Σ (δΨ)(ΨᵀΛΨ)(δΨ)ᵀ` assembled through a gauge.
fn theta_via_gauge(reduced: &DenseMatrix, p: &DenseMatrix, gauge: &GaugeMatrix) -> DenseMatrix {
    let k = gauge.classes() - 1;
    let psi = gauge.matrix();
    let mut theta = DenseMatrix::zeros(reduced.rows(), reduced.rows());
    for i in 0..p.rows() {
        let x = reduced.columns(i * k..(i + 1) * k);
        let m = psi.tr_mul(&lambda_block(p.row(i))).mul(psi);
        theta = theta.add(&x.mul(&m).mul_tr(&x));
    }
    theta
}

pub fn gauge_invariance(seed: u64) -> Result<Vec<Check>> {
    let c = 2 + (seed as usize % 3);
    let (g1, g2) = rotated_gauge(c, seed)?;
    let net = Network::new(
        &[
            LayerSpec::new(4, 5, Activation::Tanh),
            LayerSpec::new(5, c, Activation::Identity),
        ],
        seed,
    )?;
    let mut rng = stream(seed, &[0x9b]);
    let x = gaussian_matrix(6, 4, &mut rng);
    let batch = Batch::new(x, 1, Targets::Classes((0..6).map(|i| i % c).collect()))?;
    let logits = forward(&net, &batch)?;
    let p = probabilities(&logits);
    let y = target_matrix(&batch, LossKind::Ce, c)?;
    let jac = full_jacobian(&net, &batch, 0, DEFAULT_JACOBIAN_CAP)?;
    let a = newton_step_multiclass(&jac, &logits, &p, &y, &g1)?;
    let b = newton_step_multiclass(&jac, &logits, &p, &y, &g2)?;
    let scale = a.max_abs().max(1.0);

    let exact = capture_output_signals(&net, &batch, 0, &ProbeSpec::exact(ProbeKind::Exact))?;
    let r1 = reduce_signals(&exact, &g1)?;
    let r2 = reduce_signals(&exact, &g2)?;
    let block = |rec: &crate::model::SignalRecord| rec.output.as_ref().expect("output block").matrix.clone();
    let (b1, b2) = (block(&r1), block(&r2));
    let t1 = b1.mul_tr(&b1);
    let t2 = b2.mul_tr(&b2);
    let centered = block(&capture_output_signals(&net, &batch, 0, &ProbeSpec::exact(ProbeKind::ExactCentered))?);
    let th1 = theta_via_gauge(&b1, &p, &g1);
    let th2 = theta_via_gauge(&b2, &p, &g2);
    let lam = block(&capture_output_signals(&net, &batch, 0, &ProbeSpec::exact(ProbeKind::ExactLambda))?);

    let (un, ub) = uniform_softmax_regime(6, 3, c, seed)?;
    let ul = forward(&un, &ub)?;
    let up = probabilities(&ul);
    let uy = target_matrix(&ub, LossKind::Ce, c)?;
    let uj = full_jacobian(&un, &ub, 0, DEFAULT_JACOBIAN_CAP)?;
    let ua = newton_step_multiclass(&uj, &ul, &up, &uy, &g1)?;
    let ubb = newton_step_multiclass(&uj, &ul, &up, &uy, &g2)?;

    Ok(vec![
        Check::new(format!("seed {seed} Newton predictions"), a.max_abs_diff(&b) / scale, 1e-10),
        Check::new(format!("seed {seed} uniform-regime predictions"), ua.max_abs_diff(&ubb) / ua.max_abs().max(1.0), 1e-10),
        Check::new(format!("seed {seed} centered T"), t1.max_abs_diff(&t2).max(t1.max_abs_diff(&centered.mul_tr(&centered))), 1e-10),
        Check::new(format!("seed {seed} Theta"), th1.max_abs_diff(&th2).max(th1.max_abs_diff(&lam.mul_tr(&lam))), 1e-10),
    ])
}

pub fn spectrum(seed: u64) -> Result<Vec<Check>> {
    let inst = synth_instance(&SynthSpec::random(seed))?;
    let f = inst.whitened()?.f;
    let count = inst.spec.r_s.min(inst.spec.r_t);
    let report = spectrum_bounds(&inst.jacobian, &inst.grad, &f, count)?;
    Ok(vec![Check::new(format!("seed {seed} worst relative violation"), report.worst_violation, 1e-9)])
}

/// Relative Frobenius error of a probe estimate against its exact counterpart.
pub fn hutchinson_error(net: &Network, batch: &Batch, kind: ProbeKind, probes: usize, seed: u64) -> Result<f64> {
    let exact_kind = match kind {
        ProbeKind::Rademacher | ProbeKind::Ones => ProbeKind::Exact,
        ProbeKind::CenteredRademacher => ProbeKind::ExactCentered,
        ProbeKind::LambdaGaussian => ProbeKind::ExactLambda,
        other => return Err(Error::Invalid(format!("{other} is not an estimator"))),
    };
    let gram = |spec: &ProbeSpec| -> Result<DenseMatrix> {
        let rec = capture_output_signals(net, batch, 0, spec)?;
        let m = &rec.output.as_ref().expect("output block").matrix;
        Ok(m.mul_tr(m))
    };
    let exact = gram(&ProbeSpec::exact(exact_kind))?;
    let est = gram(&ProbeSpec::new(kind, probes, seed)?)?;
    Ok(est.sub(&exact).frobenius_norm() / exact.frobenius_norm())
}

/// Small network for the probe estimators.
pub fn hutchinson_fixture(classes: usize, seed: u64) -> Result<(Network, Batch)> {
    let net = Network::new(
        &[
            LayerSpec::new(4, 6, Activation::Tanh),
            LayerSpec::new(6, classes, Activation::Identity),
        ],
        seed,
    )?;
    let mut rng = stream(seed, &[0x4c]);
    let batch = Batch::unlabeled(gaussian_matrix(5, 4, &mut rng), 1)?;
    Ok((net, batch))
}

/// Least-squares slope of `log err` against `log P`.
pub fn log_slope(ps: &[usize], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = ps.iter().map(|&p| (p as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

pub fn hutchinson(seed: u64) -> Result<Vec<Check>> {
    let (net, batch) = hutchinson_fixture(3, seed)?;
    let ps = [100, 1000, 10000];
    let mut out = Vec::new();
    for kind in [ProbeKind::Rademacher, ProbeKind::CenteredRademacher, ProbeKind::LambdaGaussian] {
        let mut mean = vec![0.0; ps.len()];
        let reps = 8u64;
        for s in 0..reps {
            for (j, &p) in ps.iter().enumerate() {
                mean[j] += hutchinson_error(&net, &batch, kind, p, seed * 1000 + s)? / reps as f64;
            }
        }
        out.push(Check::new(format!("seed {seed} {kind} error at P=1e4"), mean[2], 0.05));
        let slope = log_slope(&ps, &mean);
        out.push(Check::new(format!("seed {seed} {kind} |slope + 1/2|"), (slope + 0.5).abs(), 0.2));
    }
    let (net1, batch1) = hutchinson_fixture(1, seed)?;
    out.push(Check::new(
        format!("seed {seed} ones probe at P=1"),
        hutchinson_error(&net1, &batch1, ProbeKind::Ones, 1, seed)?,
        0.0,
    ));
    Ok(out)
}

pub fn implicit_svd(seed: u64) -> Result<Vec<Check>> {
    let inst = synth_instance(&SynthSpec::random(seed))?;
    let factors = inst.factors()?;
    let wg = inst.whitened()?;
    let mut sv_err: f64 = 0.0;
    let mut rec_err: f64 = 0.0;
    for r in [1, 2, 4] {
        let md = modes(&wg, &factors, r)?;
        let q = q_star(&md)?;
        let m = md.l.mul(&q).mul_tr(&md.r);
        let implicit = m_svd_implicit(&md, &q)?;
        let dense = thin_svd(&m, DEFAULT_CUTOFF)?;
        let k = implicit.d.len().max(dense.d.len());
        for i in 0..k {
            let a = implicit.d.get(i).copied().unwrap_or(0.0);
            let b = dense.d.get(i).copied().unwrap_or(0.0);
            sv_err = sv_err.max((a - b).abs());
        }
        rec_err = rec_err.max(implicit.reconstruct().sub(&m).frobenius_norm());
    }
    Ok(vec![
        Check::new(format!("seed {seed} singular values"), sv_err, 1e-10),
        Check::new(format!("seed {seed} reconstruction"), rec_err, 1e-10),
    ])
}

pub fn q_star_suite(seed: u64) -> Result<Vec<Check>> {
    let inst = synth_instance(&SynthSpec::random(seed))?;
    let factors = inst.factors()?;
    let wg = inst.whitened()?;
    let grad = &inst.grad;
    let gnorm = grad.frobenius_norm().max(1.0);
    let mut residual: f64 = 0.0;
    let mut improvement: f64 = f64::NEG_INFINITY;
    let mut rng = stream(seed, &[0x95]);
    for r in [1, 2, 4] {
        let md = modes(&wg, &factors, r)?;
        let q = q_star(&md)?;
        let lhs = md.l.mul(&q).mul_tr(&md.r);
        let rhs = projection(&md.l)?.mul(grad).mul(&projection(&md.r)?).scale(-1.0);
        residual = residual.max(lhs.sub(&rhs).frobenius_norm() / gnorm);
        let obj = |q: &DenseMatrix| md.l.mul(q).mul_tr(&md.r).add(grad).frobenius_norm();
        let best = obj(&q);
        for t in 0..200 {
            let eps = 10f64.powi(-(1 + (t % 6)));
            let trial = q.add(&gaussian_matrix(r, r, &mut rng).scale(eps * q.max_abs()));
            improvement = improvement.max((best - obj(&trial)) / best.max(1.0));
        }
    }
    Ok(vec![
        Check::new(format!("seed {seed} L Q* Rᵀ + Π_L ∇ Π_R"), residual, 1e-10),
        Check::new(format!("seed {seed} best perturbation gain"), improvement, 1e-12),
    ])
}

pub fn rank_overflow(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, &[0x0f]);
    let r_s = rand::Rng::random_range(&mut rng, 1..=3usize);
    let r_t = rand::Rng::random_range(&mut rng, 1..=3usize);
    let spec = SynthSpec::new(r_s, r_t, 5, 2, 6, 5, seed);
    let inst = synth_instance(&spec)?;
    let factors = inst.factors()?;
    let wg = inst.whitened()?;
    let scale = crate::linalg::norm2(&inst.z).max(1.0);
    let mut out = Vec::new();
    for r in [r_s.max(r_t) + 1, r_s.min(r_t) + 1] {
        let outcome = cg_lora(&wg, &factors, &params(r), 0)?;
        let err = alignment_error(&inst.jacobian, &outcome.init, &inst.z)?;
        out.push(Check::new(format!("seed {seed} r {r} (r_S {r_s}, r_T {r_t}) error"), err / scale, 1e-9));
    }
    Ok(out)
}
