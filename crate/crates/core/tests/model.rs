use cglora::harness::pipeline::capture_accumulated;
use cglora::harness::verify::{hutchinson_error, hutchinson_fixture};
use cglora::linalg::DenseMatrix;
use cglora::model::*;
use cglora::random::{gaussian_matrix, stream};
use proptest::prelude::*;

fn network(act: Activation, classes: usize, seed: u64) -> Network {
    Network::new(
        &[
            LayerSpec::new(4, 5, act),
            LayerSpec::new(5, 6, Activation::Tanh),
            LayerSpec::new(6, classes, Activation::Identity),
        ],
        seed,
    )
    .unwrap()
}

fn batch(loss: LossKind, n: usize, tokens: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = stream(seed, &[7]);
    let x = gaussian_matrix(n, 4 * tokens, &mut rng);
    let targets = match loss {
        LossKind::Squared => Targets::Dense(gaussian_matrix(n, classes, &mut rng)),
        LossKind::Bce => Targets::Classes((0..n).map(|i| i % 2).collect()),
        LossKind::Ce => Targets::Classes((0..n).map(|i| i % classes).collect()),
    };
    Batch::new(x, tokens, targets).unwrap()
}

/// Max relative error between the captured weight gradient of `layer` and
/// central differences of the loss.
fn gradient_fd_error(net: &Network, b: &Batch, loss: LossKind, layer: usize) -> f64 {
    let rec = capture_loss_signals(net, b, layer, loss).unwrap();
    let g = rec.gradient().unwrap();
    let w = net.layer(layer).unwrap().weight().clone();
    let h = 1e-6;
    let mut fd = DenseMatrix::zeros(w.rows(), w.cols());
    for a in 0..w.rows() {
        for j in 0..w.cols() {
            let eval = |delta: f64| {
                let mut wp = w.clone();
                wp[(a, j)] += delta;
                let n2 = net.with_weight(layer, wp).unwrap();
                loss_value(&forward(&n2, b).unwrap(), b, loss).unwrap()
            };
            fd[(a, j)] = (eval(h) - eval(-h)) / (2.0 * h);
        }
    }
    g.sub(&fd).frobenius_norm() / g.frobenius_norm().max(1e-12)
}

#[test]
fn loss_gradients_match_finite_differences() {
    for (loss, classes) in [(LossKind::Squared, 2), (LossKind::Bce, 1), (LossKind::Ce, 3)] {
        for tokens in [1, 3] {
            for act in [Activation::Tanh, Activation::Relu] {
                let net = network(act, classes, 11);
                let b = batch(loss, 6, tokens, classes, 12);
                for layer in 0..net.num_layers() {
                    let err = gradient_fd_error(&net, &b, loss, layer);
                    assert!(err < 1e-4, "{loss} tokens={tokens} {act} layer {layer}: {err:e}");
                }
            }
        }
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let net = network(Activation::Tanh, 2, 3);
    let b = batch(LossKind::Squared, 4, 2, 2, 4);
    for layer in 0..3 {
        let jac = full_jacobian(&net, &b, layer, DEFAULT_JACOBIAN_CAP).unwrap();
        let w = net.layer(layer).unwrap().weight().clone();
        let (d_out, d_in) = w.shape();
        let h = 1e-6;
        let mut err: f64 = 0.0;
        for j in 0..d_in {
            for a in 0..d_out {
                let eval = |delta: f64| {
                    let mut wp = w.clone();
                    wp[(a, j)] += delta;
                    forward(&net.with_weight(layer, wp).unwrap(), &b).unwrap()
                };
                let fd = eval(h).sub(&eval(-h)).scale(0.5 / h);
                for i in 0..b.samples() {
                    for c in 0..2 {
                        err = err.max((jac[(i * 2 + c, j * d_out + a)] - fd[(i, c)]).abs());
                    }
                }
            }
        }
        assert!(err < 1e-7, "layer {layer}: {err:e}");
    }
}

#[test]
fn exact_probe_grams_reproduce_curvature_blocks() {
    // Σ_i δ_i M_i δ_iᵀ with M = I, I - 11ᵀ/C and Λ(p_i)
    let net = network(Activation::Tanh, 3, 5);
    let b = batch(LossKind::Ce, 5, 1, 3, 6);
    let fp = forward_pass(&net, &b).unwrap();
    let p = probabilities(&fp.logits);
    let layer = 1;
    let per_class: Vec<DenseMatrix> = (0..3)
        .map(|c| {
            let seed = DenseMatrix::from_fn(5, 3, |_, k| (k == c) as u8 as f64);
            backward_to(&net, &fp, &seed, layer).unwrap()
        })
        .collect();
    let d_out = 6;
    let reference = |m: &dyn Fn(usize) -> DenseMatrix| {
        let mut acc = DenseMatrix::zeros(d_out, d_out);
        for i in 0..5 {
            let delta = DenseMatrix::from_fn(d_out, 3, |a, c| per_class[c][(i, a)]);
            acc = acc.add(&delta.mul(&m(i)).mul_tr(&delta));
        }
        acc
    };
    let gram = |kind| {
        let rec = capture_output_signals(&net, &b, layer, &ProbeSpec::exact(kind)).unwrap();
        let m = rec.output.unwrap().matrix;
        m.mul_tr(&m)
    };
    let centering = DenseMatrix::identity(3).sub(&DenseMatrix::from_fn(3, 3, |_, _| 1.0 / 3.0));
    let cases: [(ProbeKind, Box<dyn Fn(usize) -> DenseMatrix>); 3] = [
        (ProbeKind::Exact, Box::new(|_| DenseMatrix::identity(3))),
        (ProbeKind::ExactCentered, Box::new(move |_| centering.clone())),
        (ProbeKind::ExactLambda, Box::new(|i| lambda_block(p.row(i)))),
    ];
    for (kind, m) in cases.iter() {
        let diff = gram(*kind).max_abs_diff(&reference(m.as_ref()));
        assert!(diff < 1e-12, "{kind}: {diff:e}");
    }
}

#[test]
fn lambda_block_is_softmax_hessian() {
    let p = [0.2, 0.5, 0.3];
    let l = lambda_block(&p);
    for i in 0..3 {
        for j in 0..3 {
            let expect = if i == j { p[i] * (1.0 - p[i]) } else { -p[i] * p[j] };
            assert!((l[(i, j)] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn ones_probe_is_exact_for_one_output() {
    let (net, b) = hutchinson_fixture(1, 3).unwrap();
    assert_eq!(hutchinson_error(&net, &b, ProbeKind::Ones, 1, 0).unwrap(), 0.0);
}

#[test]
fn hutchinson_error_shrinks_with_probes() {
    let (net, b) = hutchinson_fixture(3, 1).unwrap();
    for kind in [ProbeKind::Rademacher, ProbeKind::CenteredRademacher, ProbeKind::LambdaGaussian] {
        let avg = |p: usize| (0..6).map(|s| hutchinson_error(&net, &b, kind, p, s).unwrap()).sum::<f64>() / 6.0;
        let (small, large) = (avg(10), avg(1000));
        assert!(large < small / 3.0, "{kind}: {small} -> {large}");
    }
}

#[test]
fn probe_kind_constraints_are_enforced() {
    assert!(ProbeSpec::exact(ProbeKind::Ones).validate(3).is_err());
    assert!(ProbeSpec::exact(ProbeKind::ExactCentered).validate(1).is_err());
    assert!(ProbeSpec::new(ProbeKind::Rademacher, 0, 1).is_err());
    assert!(CapturePlan::for_loss(LossKind::Bce, 2, None, 0).is_err());
}

#[test]
fn batch_rejects_mismatched_shapes() {
    let x = DenseMatrix::zeros(3, 4);
    assert!(Batch::new(x.clone(), 3, Targets::None).is_err());
    assert!(Batch::new(x.clone(), 2, Targets::Classes(vec![0, 1])).is_err());
    assert!(Batch::new(DenseMatrix::zeros(0, 4), 1, Targets::None).is_err());
    let net = network(Activation::Tanh, 2, 0);
    let b = Batch::new(DenseMatrix::zeros(2, 6), 1, Targets::None).unwrap();
    assert!(forward(&net, &b).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn accumulation_matches_single_pass(
        n in 2usize..12,
        micro in 1usize..5,
        tokens in 1usize..3,
        random_probes in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let net = network(Activation::Tanh, 3, seed);
        let b = batch(LossKind::Ce, n, tokens, 3, seed ^ 1);
        let plan = CapturePlan::for_loss(LossKind::Ce, 3, random_probes.then_some(4), seed).unwrap();
        let whole = capture_layer(&net, &b, 1, &plan).unwrap();
        let acc = capture_accumulated(&net, &b, 1, &plan, micro).unwrap();
        prop_assert_eq!(acc.inputs.shape(), whole.inputs.shape());
        prop_assert!(acc.inputs.max_abs_diff(&whole.inputs) < 1e-14);
        for (x, y) in [(&acc.output, &whole.output), (&acc.weighted, &whole.weighted)] {
            prop_assert!(x.as_ref().unwrap().matrix.max_abs_diff(&y.as_ref().unwrap().matrix) < 1e-14);
        }
        prop_assert!(acc.gradient().unwrap().max_abs_diff(&whole.gradient().unwrap()) < 1e-12);
    }

    #[test]
    fn probabilities_lie_in_the_simplex(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let logits = gaussian_matrix(rows, cols, &mut stream(seed, &[0])).scale(5.0);
        let p = probabilities(&logits);
        for i in 0..rows {
            prop_assert!(p.row(i).iter().all(|&x| x > 0.0 && x < 1.0 || cols == 1 && x > 0.0));
            if cols > 1 {
                prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
