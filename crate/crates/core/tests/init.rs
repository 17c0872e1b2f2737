use cglora::harness::pipeline::adapter_norms;
use cglora::init::*;
use cglora::linalg::{pinv, svd_values, DenseMatrix, DEFAULT_CUTOFF};
use cglora::model::LossKind;
use cglora::oracle::{synth_instance, SynthSpec, SyntheticKronecker};
use cglora::random::{gaussian_matrix, stream};
use cglora::whitening::{make_gauge, whiten_dense, GaugeMatrix, WhitenedGradient};
use proptest::prelude::*;

fn instance(seed: u64) -> SyntheticKronecker {
    synth_instance(&SynthSpec::new(6, 5, 16, 2, 8, 7, seed)).unwrap()
}

fn whitened(f: DenseMatrix) -> WhitenedGradient {
    WhitenedGradient {
        f,
        loss: LossKind::Squared,
        phi: None,
        gauge: None,
    }
}

fn init_for(inst: &SyntheticKronecker, params: &InitParams) -> InitOutcome {
    let factors = inst.factors().unwrap();
    let wg = whitened(whiten_dense(&inst.grad, &factors).unwrap());
    cg_lora(&wg, &factors, params, 0).unwrap()
}

fn projector(m: &DenseMatrix) -> DenseMatrix {
    m.mul(&pinv(m, DEFAULT_CUTOFF).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn adapters_obey_norm_law(seed in any::<u64>(), r in 1usize..5, gamma in 0.5f64..64.0) {
        let inst = instance(seed);
        let out = init_for(&inst, &InitParams::new(r, gamma, ShiftMode::NoShift).unwrap());
        let (na, nb) = adapter_norms(&out.init.a, &out.init.b).unwrap();
        let target = (7f64).powf(0.25) / gamma;
        prop_assert!((na - target).abs() <= 1e-10 * target);
        prop_assert!((nb - target).abs() <= 1e-10 * target);
        prop_assert_eq!(out.init.a.shape(), (r, 8));
        prop_assert_eq!(out.init.b.shape(), (7, r));
    }

    #[test]
    fn adapters_ignore_curvature_rescaling(seed in any::<u64>(), cs in 0.01f64..100.0, ct in 0.01f64..100.0) {
        let inst = instance(seed);
        let factors = inst.factors().unwrap();
        let params = InitParams::new(3, 16.0, ShiftMode::NoShift).unwrap();
        let base = cg_lora(&whitened(whiten_dense(&inst.grad, &factors).unwrap()), &factors, &params, 0).unwrap();
        let scaled = factors.rescaled(cs, ct);
        let moved = cg_lora(&whitened(whiten_dense(&inst.grad, &scaled).unwrap()), &scaled, &params, 0).unwrap();
        prop_assert!(base.init.a.max_abs_diff(&moved.init.a) < 1e-9);
        prop_assert!(base.init.b.max_abs_diff(&moved.init.b) < 1e-9);
    }

    #[test]
    fn q_star_is_the_projected_negative_gradient(seed in any::<u64>(), r in 1usize..5) {
        // L Q* Rᵀ = -Π_L ∇ Π_R
        let inst = instance(seed);
        let out = init_for(&inst, &InitParams::new(r, 16.0, ShiftMode::NoShift).unwrap());
        let modes = out.modes.unwrap();
        let q = q_star(&modes).unwrap();
        let lhs = modes.l.mul(&q).mul_tr(&modes.r);
        let rhs = projector(&modes.l).mul(&inst.grad).mul(&projector(&modes.r)).scale(-1.0);
        let scale = inst.grad.frobenius_norm().max(1.0);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10 * scale);
        let implicit = m_svd_implicit(&modes, &q).unwrap();
        prop_assert!(implicit.reconstruct().max_abs_diff(&lhs) <= 1e-10 * scale);
        let explicit = svd_values(&lhs).unwrap();
        for (a, b) in implicit.d.iter().zip(&explicit) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn q_star_maximizes_descent(seed in any::<u64>(), r in 1usize..4) {
        // -<∇, L Q Rᵀ> - ½‖L Q Rᵀ‖² is maximized at Q*
        let inst = instance(seed);
        let out = init_for(&inst, &InitParams::new(r, 16.0, ShiftMode::NoShift).unwrap());
        let modes = out.modes.unwrap();
        let q = q_star(&modes).unwrap();
        let value = |q: &DenseMatrix| {
            let m = modes.l.mul(q).mul_tr(&modes.r);
            let inner: f64 = m.as_slice().iter().zip(inst.grad.as_slice()).map(|(a, b)| a * b).sum();
            -inner - 0.5 * m.frobenius_norm().powi(2)
        };
        let best = value(&q);
        let mut rng = stream(seed, &[17]);
        for _ in 0..20 {
            let p = gaussian_matrix(q.rows(), q.cols(), &mut rng).scale(0.1 * q.max_abs().max(1e-3));
            prop_assert!(value(&q.add(&p)) <= best + 1e-12 * best.abs().max(1.0));
        }
    }
}

#[test]
fn gamma_rescales_both_adapters() {
    let inst = instance(3);
    let a = init_for(&inst, &InitParams::new(2, 4.0, ShiftMode::NoShift).unwrap()).init;
    let b = init_for(&inst, &InitParams::new(2, 16.0, ShiftMode::NoShift).unwrap()).init;
    assert!(a.a.scale(0.25).max_abs_diff(&b.a) < 1e-14);
    assert!(a.b.scale(0.25).max_abs_diff(&b.b) < 1e-14);
}

#[test]
fn eta_does_not_change_adapters() {
    let inst = instance(4);
    let base = init_for(&inst, &InitParams::with_eta(2, 16.0, 1.0, ShiftMode::NoShift).unwrap()).init;
    for eta in [0.5, 1.0 / 2f64.sqrt(), 2.0] {
        let other = init_for(&inst, &InitParams::with_eta(2, 16.0, eta, ShiftMode::NoShift).unwrap()).init;
        assert_eq!(other.a, base.a);
        assert_eq!(other.b, base.b);
        assert_eq!(other.eta, eta);
    }
}

#[test]
fn shift_modes_differ_only_in_base_weight() {
    let inst = instance(5);
    let w0 = gaussian_matrix(7, 8, &mut stream(5, &[3]));
    let shifted = init_for(&inst, &InitParams::new(2, 16.0, ShiftMode::Shift).unwrap()).init;
    let plain = init_for(&inst, &InitParams::new(2, 16.0, ShiftMode::NoShift).unwrap()).init;
    assert_eq!(shifted.a, plain.a);
    assert!(effective_start(&w0, &shifted).unwrap().max_abs_diff(&w0) < 1e-15);
    assert_eq!(apply_shift(&w0, &plain).unwrap(), w0);
    let offset = effective_start(&w0, &plain).unwrap().sub(&w0);
    assert!(offset.max_abs_diff(&plain.product().scale(plain.eta)) < 1e-15);
    assert!(apply_shift(&DenseMatrix::zeros(2, 2), &plain).is_err());
}

#[test]
fn rank_requests_are_validated() {
    assert!(InitParams::new(0, 16.0, ShiftMode::NoShift).is_err());
    assert!(InitParams::new(2, 0.0, ShiftMode::NoShift).is_err());
    assert!(InitParams::with_eta(2, 1.0, -1.0, ShiftMode::NoShift).is_err());
    let inst = instance(6);
    let factors = inst.factors().unwrap();
    let wg = whitened(whiten_dense(&inst.grad, &factors).unwrap());
    assert!(modes(&wg, &factors, 6).is_err());
    let out = cg_lora(&wg, &factors, &InitParams::new(6, 16.0, ShiftMode::NoShift).unwrap(), 0).unwrap();
    assert!(out.overflow && out.modes.is_none());
}

#[test]
fn zero_gradient_is_reported() {
    let inst = instance(7);
    let factors = inst.factors().unwrap();
    let wg = whitened(DenseMatrix::zeros(factors.r_t(), factors.r_s()));
    let small = InitParams::new(2, 16.0, ShiftMode::NoShift).unwrap();
    assert!(matches!(cg_lora(&wg, &factors, &small, 0), Err(cglora::Error::ZeroGradient)));
}

#[test]
fn rank_overflow_spans_saturated_side() {
    let inst = instance(8);
    let factors = inst.factors().unwrap();
    let wg = whitened(whiten_dense(&inst.grad, &factors).unwrap());
    let params = InitParams::new(6, 16.0, ShiftMode::NoShift).unwrap();
    let init = rank_overflow_init(&wg, &factors, &params, 0).unwrap();
    // r = 6 > r_T = 5: B spans col(U_T) and has a zero-padded column.
    let pb = projector(&init.b);
    assert!(pb.mul(&factors.u_t).max_abs_diff(&factors.u_t) < 1e-10);
    assert!(init.b.column(5).iter().all(|&x| x == 0.0));
    let target = 7f64.powf(0.25) / 16.0;
    let (na, nb) = adapter_norms(&init.a, &init.b).unwrap();
    assert!((na - target).abs() < 1e-12 && (nb - target).abs() < 1e-12);
}

#[test]
fn baselines_have_expected_structure() {
    let inst = instance(9);
    let params = InitParams::new(3, 16.0, ShiftMode::NoShift).unwrap();
    let zero = baseline_init(BaselineKind::Zero, &inst.grad, &params, 1, 0).unwrap();
    assert_eq!(zero.b, DenseMatrix::zeros(7, 3));
    assert!(zero.a.max_abs() <= 1.0 / 8f64.sqrt());
    let random = baseline_init(BaselineKind::Random, &inst.grad, &params, 1, 0).unwrap();
    let (na, nb) = adapter_norms(&random.a, &random.b).unwrap();
    let target = 7f64.powf(0.25) / 16.0;
    assert!((na - target).abs() < 1e-12 && (nb - target).abs() < 1e-12);
    assert_eq!(random, baseline_init(BaselineKind::Random, &inst.grad, &params, 1, 0).unwrap());
    let gsvd = baseline_init(BaselineKind::GradientSvd, &inst.grad, &params, 1, 0).unwrap();
    let inner: f64 = gsvd.product().as_slice().iter().zip(inst.grad.as_slice()).map(|(a, b)| a * b).sum();
    assert!(inner < 0.0);
}

#[test]
fn gauge_is_orthonormal_and_centering() {
    for c in 2..6 {
        let g = make_gauge(c).unwrap();
        let psi = g.matrix();
        assert_eq!(psi.shape(), (c, c - 1));
        assert!(psi.tr_mul(psi).max_abs_diff(&DenseMatrix::identity(c - 1)) < 1e-14);
        let ones = DenseMatrix::from_fn(1, c, |_, _| 1.0);
        assert!(ones.mul(psi).max_abs() < 1e-14);
    }
    assert!(GaugeMatrix::new(DenseMatrix::identity(3)).is_err());
}
