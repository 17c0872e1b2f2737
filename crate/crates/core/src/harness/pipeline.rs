//! Capture-to-adapter composition shared by the commands and the experiments.

use crate::curvature::{centered_factor, kfac_factors, pool_signals, KfacFactors, SubspaceParams};
use crate::error::{invalid, Result};
use crate::init::{cg_lora, InitOutcome, InitParams};
use crate::linalg::DenseMatrix;
use crate::model::{
    capture_layer, Activation, Batch, CapturePlan, LayerSpec, LossKind, Network, SignalRecord, Targets,
};
use crate::random::{gaussian_matrix, stream};
use crate::whitening::{phi_from_block, whitened_gradient_ce, whitened_gradient_sq, WhitenedGradient};

/// Captures `layer` over consecutive micro-batches of `batch_size` samples and
/// concatenates them; identical to a single pass for exact probes, and for
/// random probes since probe streams are keyed by the global sample index.
pub fn capture_accumulated(
    net: &Network,
    batch: &Batch,
    layer: usize,
    plan: &CapturePlan,
    batch_size: usize,
) -> Result<SignalRecord> {
    if batch_size == 0 {
        return Err(invalid("batch size must be >= 1"));
    }
    let n = batch.samples();
    let mut parts = Vec::with_capacity(n.div_ceil(batch_size));
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        parts.push(capture_layer(net, &batch.slice(start..end)?, layer, plan)?);
        start = end;
    }
    SignalRecord::concat(&parts)
}

/// Loss a record was captured for, read off its channel blocks.
pub fn infer_loss(rec: &SignalRecord) -> Result<LossKind> {
    let out = rec.output.as_ref().ok_or_else(|| invalid("record has no output signals"))?;
    Ok(match (&rec.weighted, rec.classes) {
        (None, _) => LossKind::Squared,
        (Some(_), 1) => LossKind::Bce,
        (Some(_), _) if out.kind.is_centered() => LossKind::Ce,
        _ => return Err(invalid("multiclass weighted record without centered output signals")),
    })
}

#[derive(Clone, Debug)]
pub struct LayerResult {
    pub layer: usize,
    pub loss: LossKind,
    pub factors: KfacFactors,
    pub whitened: WhitenedGradient,
    pub outcome: InitOutcome,
}

/// Factors, whitened gradient and initializer for one captured layer.
pub fn layer_init(rec: &SignalRecord, sp: &SubspaceParams, ip: &InitParams) -> Result<LayerResult> {
    let loss = infer_loss(rec)?;
    let (factors, whitened) = match loss {
        LossKind::Squared => {
            let f = kfac_factors(rec, sp)?;
            let wg = whitened_gradient_sq(rec, &f)?;
            (f, wg)
        }
        LossKind::Bce | LossKind::Ce => {
            let f = if loss == LossKind::Bce {
                kfac_factors(rec, sp)?
            } else {
                centered_factor(rec, sp)?
            };
            let pooled = pool_signals(rec)?;
            let w = pooled.weighted.as_ref().ok_or_else(|| invalid("record has no curvature-weighted signals"))?;
            let phi = phi_from_block(&f, w)?;
            let wg = whitened_gradient_ce(rec, &f, &phi)?;
            (f, wg)
        }
    };
    let outcome = cg_lora(&whitened, &factors, ip, rec.layer)?;
    Ok(LayerResult {
        layer: rec.layer,
        loss,
        factors,
        whitened,
        outcome,
    })
}

/// Input width of the built-in network.
pub const TINY_IN: usize = 10;
/// Hidden width of the built-in network.
pub const TINY_HIDDEN: usize = 12;

/// `10 -> 12 (tanh) -> C` with `C = 1` for bce and `3` otherwise.
pub fn tiny_network(loss: LossKind, seed: u64) -> Result<Network> {
    let classes = if loss == LossKind::Bce { 1 } else { 3 };
    Network::new(
        &[
            LayerSpec::new(TINY_IN, TINY_HIDDEN, Activation::Tanh),
            LayerSpec::new(TINY_HIDDEN, classes, Activation::Identity),
        ],
        seed,
    )
}

/// Gaussian inputs with targets from a random linear teacher: regression
/// values, thresholded scores or arg-max classes.
pub fn teacher_batch(net: &Network, loss: LossKind, n: usize, tokens: usize, seed: u64) -> Result<Batch> {
    let mut rng = stream(seed, &[0xda7a]);
    let d = net.in_dim();
    let x = gaussian_matrix(n, tokens * d, &mut rng);
    let c = net.out_dim();
    let teacher = gaussian_matrix(tokens * d, c, &mut rng).scale(1.0 / ((tokens * d) as f64).sqrt());
    let scores = x.mul(&teacher);
    let targets = match loss {
        LossKind::Squared => Targets::Dense(scores),
        LossKind::Bce => Targets::Classes((0..n).map(|i| (scores[(i, 0)] > 0.0) as usize).collect()),
        LossKind::Ce => {
            let argmax = |row: &[f64]| (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            Targets::Classes((0..n).map(|i| argmax(scores.row(i))).collect())
        }
    };
    Batch::new(x, tokens, targets)
}

/// `‖A₀‖₂`, `‖B₀‖₂`.
pub fn adapter_norms(a: &DenseMatrix, b: &DenseMatrix) -> Result<(f64, f64)> {
    let s = |m: &DenseMatrix| -> Result<f64> { Ok(crate::linalg::svd_values(m)?.first().copied().unwrap_or(0.0)) };
    Ok((s(a)?, s(b)?))
}
