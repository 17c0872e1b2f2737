use cglora::curvature::{centered_factor, SubspaceParams};
use cglora::init::{baseline_init, cg_lora, BaselineKind, InitParams, LoraInit, ShiftMode};
use cglora::linalg::{tail_energy, unvec, DenseMatrix};
use cglora::model::{
    capture_layer, forward, full_jacobian, probabilities, target_matrix, CapturePlan, LossKind, DEFAULT_JACOBIAN_CAP,
};
use cglora::oracle::*;
use cglora::random::{gaussian_matrix, stream};
use cglora::whitening::{make_gauge, phi, phi_from_block, whiten_dense, whitened_gradient_ce, Phi, WhitenedGradient};

fn spec(seed: u64) -> SynthSpec {
    SynthSpec::new(5, 4, 12, 2, 7, 6, seed)
}

fn sq_init(inst: &SyntheticKronecker, r: usize) -> (LoraInit, DenseMatrix) {
    let factors = inst.factors().unwrap();
    let f = whiten_dense(&inst.grad, &factors).unwrap();
    let wg = WhitenedGradient {
        f: f.clone(),
        loss: LossKind::Squared,
        phi: None,
        gauge: None,
    };
    let params = InitParams::new(r, 16.0, ShiftMode::NoShift).unwrap();
    (cg_lora(&wg, &factors, &params, 0).unwrap().init, f)
}

fn random_init(d_in: usize, d_out: usize, r: usize, seed: u64) -> LoraInit {
    let mut rng = stream(seed, &[99]);
    LoraInit {
        layer: 0,
        a: gaussian_matrix(r, d_in, &mut rng),
        b: gaussian_matrix(d_out, r, &mut rng),
        rank: r,
        gamma: 16.0,
        eta: 1.0,
        shift: ShiftMode::NoShift,
    }
}

#[test]
fn synthetic_jacobian_has_kronecker_gram() {
    let inst = synth_instance(&spec(1)).unwrap();
    let factors = inst.factors().unwrap();
    let (s, t) = cglora::curvature::kfac_gram(&factors);
    let jtj = inst.jacobian.tr_mul(&inst.jacobian);
    assert!(jtj.max_abs_diff(&cglora::linalg::kron(&s, &t)) < 1e-12);
}

#[test]
fn projector_difference_matches_kronecker_sandwich() {
    for seed in 0..4 {
        let inst = synth_instance(&spec(seed)).unwrap();
        let init = random_init(7, 6, 2, seed);
        let oracle = NtkOracle::new(&inst.jacobian).unwrap();
        let dense = oracle.projector_difference(&init).unwrap();
        let kron = inst.kron_projector_difference(&init).unwrap();
        assert!(dense.max_abs_diff(&kron) < 1e-10, "seed {seed}");
        let e1 = oracle.alignment_error(&init, &inst.z).unwrap();
        let e2 = inst.kron_alignment_error(&init).unwrap();
        let e3 = alignment_error_dense(&inst.jacobian, &init, &inst.z).unwrap();
        assert!((e1 - e2).abs() < 1e-10 && (e1 - e3).abs() < 1e-10);
    }
}

#[test]
fn cg_lora_attains_tail_energy() {
    for seed in 0..5 {
        let inst = synth_instance(&spec(seed)).unwrap();
        for r in 1..=4 {
            let (init, f) = sq_init(&inst, r);
            let err = alignment_error(&inst.jacobian, &init, &inst.z).unwrap();
            let tail = tail_energy(&cglora::linalg::svd_values(&f).unwrap(), r);
            assert!((err - tail).abs() <= 1e-8 * tail.max(1.0), "seed {seed} r {r}: {err} vs {tail}");
            let factors = inst.factors().unwrap();
            let closed = whitened_alignment_error(&f, &factors, &init, None).unwrap();
            assert!((closed - err).abs() < 1e-9);
        }
    }
}

#[test]
fn random_inits_respect_lower_bound() {
    let inst = synth_instance(&spec(3)).unwrap();
    let (_, f) = sq_init(&inst, 2);
    let sv = cglora::linalg::svd_values(&f).unwrap();
    for seed in 0..20 {
        let init = random_init(7, 6, 2, seed);
        let err = alignment_error(&inst.jacobian, &init, &inst.z).unwrap();
        assert!(err >= tail_energy(&sv, 4) - 1e-10);
    }
}

#[test]
fn lora_prediction_ignores_eta() {
    let inst = synth_instance(&spec(2)).unwrap();
    let init = random_init(7, 6, 2, 5);
    let f0 = vec![0.3; inst.jacobian.rows()];
    let oracle = NtkOracle::new(&inst.jacobian).unwrap();
    let a = oracle.lora_predict(&init, &f0, &inst.z, 0.01).unwrap();
    let b = oracle.lora_predict(&init, &f0, &inst.z, 3.0).unwrap();
    assert_eq!(a.prediction, b.prediction);
    let jh = inst.jacobian.mul(&lora_jacobian_factor(&init));
    let back = jh.mul_vec(&a.theta.iter().map(|t| t * 0.01).collect::<Vec<_>>());
    let gap: Vec<f64> = a.prediction.iter().zip(&f0).map(|(p, f)| p - f).collect();
    assert!(back.iter().zip(&gap).all(|(x, y)| (x - y).abs() < 1e-9));
    let full = oracle.fft_predict(&f0, &inst.z).unwrap();
    let jt = inst.jacobian.mul_vec(&full.theta);
    assert!(jt.iter().zip(&full.prediction).zip(&f0).all(|((j, p), f)| (j - (p - f)).abs() < 1e-9));
}

#[test]
fn lora_factor_maps_adapter_steps() {
    let init = random_init(4, 3, 2, 1);
    let mut rng = stream(4, &[1]);
    let da = gaussian_matrix(2, 4, &mut rng);
    let db = gaussian_matrix(3, 2, &mut rng);
    let mut theta = cglora::linalg::vec(&da);
    theta.extend(cglora::linalg::vec(&db));
    let lhs = lora_jacobian_factor(&init).mul_vec(&theta);
    let rhs = cglora::linalg::vec(&init.b.mul(&da).add(&db.mul(&init.a)));
    assert!(lhs.iter().zip(&rhs).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn stable_binary_newton_matches_pseudo_inverse() {
    let inst = synth_instance(&SynthSpec::new(3, 2, 10, 1, 4, 3, 8)).unwrap();
    let mut rng = stream(8, &[2]);
    let p0: Vec<f64> = (0..10).map(|_| rand::Rng::random_range(&mut rng, 0.1..0.9)).collect();
    let y: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
    let f0 = vec![0.0; 10];
    let a = newton_step_binary(&inst.jacobian, &f0, &p0, &y).unwrap();
    let b = newton_step_binary_literal(&inst.jacobian, &f0, &p0, &y).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-8));
    assert!(newton_step_binary(&inst.jacobian, &f0, &[1.0; 10], &y).is_err());
}

#[test]
fn constant_probability_regime_is_tight() {
    let p = 0.3;
    let inst = constant_p_instance(&SynthSpec::new(4, 3, 14, 1, 5, 4, 11), p).unwrap();
    let y: Vec<f64> = (0..14).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect();
    let g: Vec<f64> = y.iter().map(|v| v - p).collect();
    let grad = unvec(&inst.jacobian.tr_mul_vec(&g).iter().map(|x| -x).collect::<Vec<_>>(), 4, 5).unwrap();
    let factors = inst.factors().unwrap();
    let ph = phi(&factors, &inst.weighted_factors().unwrap()).unwrap();
    assert!(ph.matrix.max_abs_diff(&DenseMatrix::identity(3).scale(p * (1.0 - p))) < 1e-12);
    let f = ph.inv_sqrt.mul(&whiten_dense(&grad, &factors).unwrap());
    let wg = WhitenedGradient {
        f: f.clone(),
        loss: LossKind::Bce,
        phi: Some(ph.clone()),
        gauge: None,
    };
    let p0 = vec![p; 14];
    let f0 = vec![(p / (1.0 - p)).ln(); 14];
    let full = newton_step_binary(&inst.jacobian, &f0, &p0, &y).unwrap();
    for r in 1..=3 {
        let params = InitParams::new(r, 16.0, ShiftMode::NoShift).unwrap();
        let init = cg_lora(&wg, &factors, &params, 0).unwrap().init;
        let jh = inst.jacobian.mul(&lora_jacobian_factor(&init));
        let lora = newton_step_binary(&jh, &f0, &p0, &y).unwrap();
        let gap = cglora::linalg::norm2(&full.iter().zip(&lora).map(|(a, b)| a - b).collect::<Vec<_>>());
        let bound = ph.inv_sqrt_norm() * tail_energy(&cglora::linalg::svd_values(&f).unwrap(), r);
        assert!((gap - bound).abs() <= 1e-8 * bound.max(1.0), "r {r}: {gap} vs {bound}");
        let closed = whitened_alignment_error(&f, &factors, &init, Some(&ph)).unwrap();
        assert!((closed - gap).abs() <= 1e-8 * gap.max(1.0));
    }
}

fn ce_setup(r: usize, seed: u64) -> (f64, f64) {
    let (n, d_in, c) = (9, 4, 3);
    let (net, batch) = uniform_softmax_regime(n, d_in, c, seed).unwrap();
    let plan = CapturePlan::for_loss(LossKind::Ce, c, None, seed).unwrap();
    let rec = capture_layer(&net, &batch, 0, &plan).unwrap();
    let sp = SubspaceParams::new(4, 2, seed).unwrap();
    let factors = centered_factor(&rec, &sp).unwrap();
    let ph: Phi = phi_from_block(&factors, rec.weighted.as_ref().unwrap()).unwrap();
    let wg = whitened_gradient_ce(&rec, &factors, &ph).unwrap();
    let params = InitParams::new(r, 16.0, ShiftMode::NoShift).unwrap();
    let init = cg_lora(&wg, &factors, &params, 0).unwrap().init;
    let jac = full_jacobian(&net, &batch, 0, DEFAULT_JACOBIAN_CAP).unwrap();
    let logits = forward(&net, &batch).unwrap();
    let p0 = probabilities(&logits);
    let y = target_matrix(&batch, LossKind::Ce, c).unwrap();
    let gauge = make_gauge(c).unwrap();
    let full = newton_step_multiclass(&jac, &logits, &p0, &y, &gauge).unwrap();
    let jh = jac.mul(&lora_jacobian_factor(&init));
    let lora = newton_step_multiclass(&jh, &logits, &p0, &y, &gauge).unwrap();
    let gap = full.sub(&lora).frobenius_norm();
    let bound = ph.inv_sqrt_norm() * tail_energy(&wg.singular_values().unwrap(), r);
    (gap, bound)
}

#[test]
fn uniform_softmax_regime_is_tight() {
    for seed in 0..3 {
        for r in 1..=2 {
            let (gap, bound) = ce_setup(r, seed);
            assert!((gap - bound).abs() <= 1e-8 * bound.max(1.0), "seed {seed} r {r}: {gap} vs {bound}");
        }
    }
}

#[test]
fn multiclass_newton_is_gauge_invariant() {
    let (net, batch) = uniform_softmax_regime(6, 3, 4, 2).unwrap();
    let jac = full_jacobian(&net, &batch, 0, DEFAULT_JACOBIAN_CAP).unwrap();
    let logits = forward(&net, &batch).unwrap();
    let p0 = probabilities(&logits);
    let y = target_matrix(&batch, LossKind::Ce, 4).unwrap();
    let g1 = make_gauge(4).unwrap();
    let mut rng = stream(3, &[7]);
    let rot = cglora::linalg::thin_qr(&gaussian_matrix(3, 3, &mut rng)).unwrap().q;
    let g2 = cglora::whitening::GaugeMatrix::new(g1.matrix().mul(&rot)).unwrap();
    let a = newton_step_multiclass(&jac, &logits, &p0, &y, &g1).unwrap();
    let b = newton_step_multiclass(&jac, &logits, &p0, &y, &g2).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-9);
}

#[test]
fn whitened_spectrum_is_sandwiched() {
    for seed in 0..5 {
        let inst = synth_instance(&spec(seed)).unwrap();
        let f = whiten_dense(&inst.grad, &inst.factors().unwrap()).unwrap();
        let report = spectrum_bounds(&inst.jacobian, &inst.grad, &f, 4).unwrap();
        assert!(report.holds(1e-10), "{report:?}");
    }
}

#[test]
fn baselines_never_beat_the_closed_form() {
    let inst = synth_instance(&spec(6)).unwrap();
    let (cg, _) = sq_init(&inst, 2);
    let best = alignment_error(&inst.jacobian, &cg, &inst.z).unwrap();
    let params = InitParams::new(2, 16.0, ShiftMode::NoShift).unwrap();
    for kind in [BaselineKind::Random, BaselineKind::GradientSvd] {
        let init = baseline_init(kind, &inst.grad, &params, 1, 0).unwrap();
        assert!(alignment_error(&inst.jacobian, &init, &inst.z).unwrap() >= best - 1e-10);
    }
}

#[test]
fn infeasible_instances_are_rejected() {
    assert!(synth_instance(&SynthSpec::new(5, 4, 2, 1, 7, 6, 0)).is_err());
    assert!(synth_instance(&SynthSpec::new(8, 4, 12, 4, 7, 6, 0)).is_err());
    assert!(constant_p_instance(&spec(0), 0.5).is_err());
}
