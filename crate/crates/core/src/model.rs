//! A small feed-forward network with bias-free linear layers and pointwise
//! activations, plus the signal capture used by the curvature pipeline.
//!
//! Inputs are laid out as an `n x (tokens * d_in)` matrix; every token passes
//! through the same weights and the last layer's outputs are averaged over
//! tokens to form the logits. Cached per-token matrices use row `i * tokens + w`.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, invalid, Error, Result};
use crate::linalg::DenseMatrix;
use crate::random::{gaussian_vec, rademacher, stream, uniform_matrix};

/// Dense Jacobian size cap (entries) shared with the oracle.
pub const DEFAULT_JACOBIAN_CAP: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at the pre-activation `x`; ReLU uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(invalid(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WeightInit {
    /// Uniform on `[-1/sqrt(d_in), 1/sqrt(d_in)]`.
    KaimingUniform,
    Explicit(DenseMatrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weight_init: WeightInit,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
            weight_init: WeightInit::KaimingUniform,
        }
    }

    pub fn with_weights(mut self, weights: DenseMatrix) -> Self {
        self.weight_init = WeightInit::Explicit(weights);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    weight: DenseMatrix,
    activation: Activation,
}

impl Layer {
    /// `d_out x d_in`.
    pub fn weight(&self) -> &DenseMatrix {
        &self.weight
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    /// Builds the network; Kaiming weights for layer `l` come from the stream
    /// `(seed, l)`.
    pub fn new(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(invalid("a network needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (l, spec) in specs.iter().enumerate() {
            if spec.in_dim == 0 || spec.out_dim == 0 {
                return Err(invalid(format!("layer {l}: dimensions must be >= 1")));
            }
            if l > 0 && specs[l - 1].out_dim != spec.in_dim {
                return Err(dim_err(format!(
                    "layer {l}: in_dim {} does not match previous out_dim {}",
                    spec.in_dim,
                    specs[l - 1].out_dim
                )));
            }
            let weight = match &spec.weight_init {
                WeightInit::KaimingUniform => {
                    let bound = 1.0 / (spec.in_dim as f64).sqrt();
                    uniform_matrix(spec.out_dim, spec.in_dim, bound, &mut stream(seed, &[l as u64]))
                }
                WeightInit::Explicit(w) => {
                    if w.shape() != (spec.out_dim, spec.in_dim) {
                        return Err(dim_err(format!(
                            "layer {l}: explicit weights are {:?}, expected {:?}",
                            w.shape(),
                            (spec.out_dim, spec.in_dim)
                        )));
                    }
                    w.check_finite()?;
                    w.clone()
                }
            };
            layers.push(Layer {
                weight,
                activation: spec.activation,
            });
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> Result<&Layer> {
        self.layers
            .get(l)
            .ok_or_else(|| invalid(format!("layer {l} out of range (network has {})", self.layers.len())))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Number of logits `C`.
    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Copy of the network with layer `l`'s weight replaced.
    pub fn with_weight(&self, l: usize, weight: DenseMatrix) -> Result<Self> {
        let old = self.layer(l)?;
        if weight.shape() != old.weight.shape() {
            return Err(dim_err(format!(
                "replacement weight for layer {l} is {:?}, expected {:?}",
                weight.shape(),
                old.weight.shape()
            )));
        }
        weight.check_finite()?;
        let mut net = self.clone();
        net.layers[l].weight = weight;
        Ok(net)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Squared,
    Bce,
    Ce,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(LossKind::Squared),
            "bce" => Ok(LossKind::Bce),
            "ce" => Ok(LossKind::Ce),
            other => Err(invalid(format!(
                "unknown loss `{other}` (expected squared, bce or ce)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Squared => "squared",
            LossKind::Bce => "bce",
            LossKind::Ce => "ce",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    None,
    /// `n x C` regression targets.
    Dense(DenseMatrix),
    /// Class indices; binary labels are `0`/`1`.
    Classes(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: DenseMatrix,
    tokens: usize,
    targets: Targets,
    offset: usize,
}

impl Batch {
    pub fn new(inputs: DenseMatrix, tokens: usize, targets: Targets) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(invalid("a batch needs at least one sample"));
        }
        if tokens == 0 || inputs.cols() % tokens != 0 || inputs.cols() == 0 {
            return Err(dim_err(format!(
                "{} input columns cannot be split into {tokens} tokens",
                inputs.cols()
            )));
        }
        inputs.check_finite()?;
        let n = inputs.rows();
        match &targets {
            Targets::Dense(y) => {
                if y.rows() != n {
                    return Err(dim_err(format!("{} target rows for {n} samples", y.rows())));
                }
                y.check_finite()?;
            }
            Targets::Classes(c) if c.len() != n => {
                return Err(dim_err(format!("{} labels for {n} samples", c.len())));
            }
            _ => {}
        }
        Ok(Batch {
            inputs,
            tokens,
            targets,
            offset: 0,
        })
    }

    pub fn unlabeled(inputs: DenseMatrix, tokens: usize) -> Result<Self> {
        Batch::new(inputs, tokens, Targets::None)
    }

    pub fn samples(&self) -> usize {
        self.inputs.rows()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn token_dim(&self) -> usize {
        self.inputs.cols() / self.tokens
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Global index of the first sample; probe streams are keyed on it.
    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Samples `range` as a batch whose offset continues the global indexing.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Batch> {
        if range.start >= range.end || range.end > self.samples() {
            return Err(invalid(format!(
                "sample range {range:?} is empty or exceeds {} samples",
                self.samples()
            )));
        }
        let targets = match &self.targets {
            Targets::None => Targets::None,
            Targets::Dense(y) => Targets::Dense(y.row_block(range.clone())),
            Targets::Classes(c) => Targets::Classes(c[range.clone()].to_vec()),
        };
        Ok(Batch {
            inputs: self.inputs.row_block(range.clone()),
            tokens: self.tokens,
            targets,
            offset: self.offset + range.start,
        })
    }

    /// `(samples * tokens) x d_in` token matrix.
    pub fn token_matrix(&self) -> DenseMatrix {
        let d = self.token_dim();
        let mut out = DenseMatrix::zeros(self.samples() * self.tokens, d);
        for i in 0..self.samples() {
            let row = self.inputs.row(i);
            for w in 0..self.tokens {
                out.row_mut(i * self.tokens + w)
                    .copy_from_slice(&row[w * d..(w + 1) * d]);
            }
        }
        out
    }
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Per layer: `(n * tokens) x d_in` inputs `h`.
    pub inputs: Vec<DenseMatrix>,
    /// Per layer: `(n * tokens) x d_out` pre-activations.
    pub pre: Vec<DenseMatrix>,
    /// `n x C`.
    pub logits: DenseMatrix,
    pub samples: usize,
    pub tokens: usize,
}

pub fn forward_pass(net: &Network, batch: &Batch) -> Result<ForwardPass> {
    if batch.token_dim() != net.in_dim() {
        return Err(dim_err(format!(
            "inputs have {} features per token, layer 0 expects {}",
            batch.token_dim(),
            net.in_dim()
        )));
    }
    let (n, tokens) = (batch.samples(), batch.tokens());
    let mut h = batch.token_matrix();
    let mut inputs = Vec::with_capacity(net.num_layers());
    let mut pre = Vec::with_capacity(net.num_layers());
    for layer in net.layers() {
        let u = h.mul_tr(&layer.weight);
        let next = u.map(|x| layer.activation.apply(x));
        inputs.push(h);
        pre.push(u);
        h = next;
    }
    let c = net.out_dim();
    let mut logits = DenseMatrix::zeros(n, c);
    for i in 0..n {
        for w in 0..tokens {
            for (acc, x) in logits.row_mut(i).iter_mut().zip(h.row(i * tokens + w)) {
                *acc += x;
            }
        }
    }
    let logits = logits.scale(1.0 / tokens as f64);
    Ok(ForwardPass {
        inputs,
        pre,
        logits,
        samples: n,
        tokens,
    })
}

/// Logits `f(W; X)`.
pub fn forward(net: &Network, batch: &Batch) -> Result<DenseMatrix> {
    Ok(forward_pass(net, batch)?.logits)
}

/// Backpropagates `seed` (`n x C`, the gradient of a scalar with respect to
/// the logits) down to layer `layer` and returns its pre-activation gradients,
/// `(n * tokens) x d_out`.
pub fn backward_to(net: &Network, fp: &ForwardPass, seed: &DenseMatrix, layer: usize) -> Result<DenseMatrix> {
    net.layer(layer)?;
    if seed.shape() != (fp.samples, net.out_dim()) {
        return Err(dim_err(format!(
            "backward seed is {:?}, expected {:?}",
            seed.shape(),
            (fp.samples, net.out_dim())
        )));
    }
    let tokens = fp.tokens;
    let inv = 1.0 / tokens as f64;
    let mut g = DenseMatrix::from_fn(fp.samples * tokens, net.out_dim(), |t, c| {
        seed[(t / tokens, c)] * inv
    });
    for l in (layer..net.num_layers()).rev() {
        let act = net.layers[l].activation;
        let pre = &fp.pre[l];
        let mut d = g;
        for (x, u) in d.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *x *= act.derivative(*u);
        }
        if l == layer {
            return Ok(d);
        }
        g = d.mul(&net.layers[l].weight);
    }
    unreachable!()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
    out
}

/// Predicted probabilities: logistic for one logit, softmax otherwise.
pub fn probabilities(logits: &DenseMatrix) -> DenseMatrix {
    if logits.cols() == 1 {
        logits.map(sigmoid)
    } else {
        softmax_rows(logits)
    }
}

/// Rejects probabilities on the boundary of `(0, 1)`.
pub fn check_interior(p: &DenseMatrix) -> Result<()> {
    for i in 0..p.rows() {
        for &v in p.row(i) {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::BoundaryProbability { sample: i, value: v });
            }
        }
    }
    Ok(())
}

/// `Λ = diag(p) - p pᵀ`; for a single probability this is `p (1 - p)`.
pub fn lambda_block(p: &[f64]) -> DenseMatrix {
    if p.len() == 1 {
        return DenseMatrix::from_diag(&[p[0] * (1.0 - p[0])]);
    }
    let c = p.len();
    DenseMatrix::from_fn(c, c, |a, b| if a == b { p[a] } else { 0.0 } - p[a] * p[b])
}

/// Targets as an `n x C` matrix: regression values, binary labels or one-hot
/// rows.
pub fn target_matrix(batch: &Batch, loss: LossKind, classes: usize) -> Result<DenseMatrix> {
    let n = batch.samples();
    match (loss, batch.targets()) {
        (_, Targets::None) => Err(invalid("loss requested on an unlabeled batch")),
        (LossKind::Squared, Targets::Dense(y)) => {
            if y.cols() != classes {
                return Err(dim_err(format!("{} target columns for {classes} outputs", y.cols())));
            }
            Ok(y.clone())
        }
        (LossKind::Bce, Targets::Classes(labels)) => {
            if classes != 1 {
                return Err(invalid(format!("bce needs a single logit, network has {classes}")));
            }
            if let Some(i) = labels.iter().position(|&l| l > 1) {
                return Err(invalid(format!("sample {i}: binary label {} not in {{0, 1}}", labels[i])));
            }
            Ok(DenseMatrix::from_fn(n, 1, |i, _| labels[i] as f64))
        }
        (LossKind::Ce, Targets::Classes(labels)) => {
            if classes < 2 {
                return Err(invalid("ce needs at least two classes"));
            }
            if let Some(i) = labels.iter().position(|&l| l >= classes) {
                return Err(invalid(format!("sample {i}: class {} not in [0, {classes})", labels[i])));
            }
            Ok(DenseMatrix::from_fn(n, classes, |i, c| (labels[i] == c) as u8 as f64))
        }
        (loss, _) => Err(invalid(format!("target kind does not match loss `{loss}`"))),
    }
}

/// Loss summed over samples.
pub fn loss_value(logits: &DenseMatrix, batch: &Batch, loss: LossKind) -> Result<f64> {
    let y = target_matrix(batch, loss, logits.cols())?;
    check_rows(logits, &y)?;
    Ok(match loss {
        LossKind::Squared => 0.5 * logits.sub(&y).frobenius_norm().powi(2),
        LossKind::Bce => (0..y.rows())
            .map(|i| {
                let f = logits[(i, 0)];
                f.max(0.0) + (-f.abs()).exp().ln_1p() - y[(i, 0)] * f
            })
            .sum(),
        LossKind::Ce => (0..y.rows())
            .map(|i| {
                let row = logits.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                lse - row.iter().zip(y.row(i)).map(|(f, t)| f * t).sum::<f64>()
            })
            .sum(),
    })
}

/// Gradient of the loss with respect to the logits: `f - Y`, `σ(f) - y` or
/// `softmax(f) - onehot(y)`.
pub fn loss_gradient(logits: &DenseMatrix, batch: &Batch, loss: LossKind) -> Result<DenseMatrix> {
    let y = target_matrix(batch, loss, logits.cols())?;
    check_rows(logits, &y)?;
    Ok(match loss {
        LossKind::Squared => logits.sub(&y),
        LossKind::Bce | LossKind::Ce => probabilities(logits).sub(&y),
    })
}

/// Squared-loss residual `Z = Y - f`.
pub fn residual(logits: &DenseMatrix, batch: &Batch) -> Result<DenseMatrix> {
    let y = target_matrix(batch, LossKind::Squared, logits.cols())?;
    check_rows(logits, &y)?;
    Ok(y.sub(logits))
}

fn check_rows(logits: &DenseMatrix, y: &DenseMatrix) -> Result<()> {
    if logits.shape() != y.shape() {
        return Err(dim_err(format!("logits {:?} vs targets {:?}", logits.shape(), y.shape())));
    }
    Ok(())
}

/// How output derivatives are combined before they are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    /// One channel per class, `z = e_c`.
    Exact,
    /// Columns of `I - 11ᵀ/C`.
    ExactCentered,
    /// Columns of `(I - p1ᵀ) Diag(√p)`, whose Gram is `Λ`.
    ExactLambda,
    /// `z = 1` for a single output.
    Ones,
    Rademacher,
    CenteredRademacher,
    LambdaGaussian,
}

impl ProbeKind {
    pub fn is_random(self) -> bool {
        matches!(
            self,
            ProbeKind::Rademacher | ProbeKind::CenteredRademacher | ProbeKind::LambdaGaussian
        )
    }

    pub fn is_centered(self) -> bool {
        matches!(self, ProbeKind::ExactCentered | ProbeKind::CenteredRademacher)
    }

    pub fn is_lambda(self) -> bool {
        matches!(self, ProbeKind::ExactLambda | ProbeKind::LambdaGaussian)
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Exact => "exact",
            ProbeKind::ExactCentered => "exact-centered",
            ProbeKind::ExactLambda => "exact-lambda",
            ProbeKind::Ones => "ones",
            ProbeKind::Rademacher => "rademacher",
            ProbeKind::CenteredRademacher => "centered-rademacher",
            ProbeKind::LambdaGaussian => "lambda-gaussian",
        }
    }

    pub const ALL: [ProbeKind; 7] = [
        ProbeKind::Exact,
        ProbeKind::ExactCentered,
        ProbeKind::ExactLambda,
        ProbeKind::Ones,
        ProbeKind::Rademacher,
        ProbeKind::CenteredRademacher,
        ProbeKind::LambdaGaussian,
    ];
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown probe kind `{s}`")))
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    /// Number of random probes `P`; ignored by the exact kinds.
    pub probes: usize,
    pub seed: u64,
}

impl ProbeSpec {
    pub fn new(kind: ProbeKind, probes: usize, seed: u64) -> Result<Self> {
        if probes == 0 {
            return Err(invalid("probe count must be >= 1"));
        }
        Ok(ProbeSpec { kind, probes, seed })
    }

    pub fn exact(kind: ProbeKind) -> Self {
        ProbeSpec { kind, probes: 1, seed: 0 }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.kind {
            ProbeKind::Ones if classes != 1 => {
                Err(invalid(format!("ones probes need a single output, got C = {classes}")))
            }
            k if k.is_centered() && classes < 2 => {
                Err(invalid(format!("{k} probes need C >= 2")))
            }
            _ => Ok(()),
        }
    }

    /// Stored channels per token.
    pub fn channels(&self, classes: usize) -> usize {
        match self.kind {
            ProbeKind::Ones => 1,
            ProbeKind::Exact | ProbeKind::ExactCentered | ProbeKind::ExactLambda => classes,
            _ => self.probes,
        }
    }

    /// Probe vector for channel `k` of global sample `sample`.
    fn vector(&self, layer: usize, k: usize, sample: usize, p: Option<&[f64]>) -> Vec<f64> {
        let c = p.map_or(0, |p| p.len());
        let scale = 1.0 / (self.probes as f64).sqrt();
        let rng = || stream(self.seed, &[layer as u64, k as u64, sample as u64]);
        match self.kind {
            ProbeKind::Ones => vec![1.0],
            ProbeKind::Exact => (0..c).map(|j| (j == k) as u8 as f64).collect(),
            ProbeKind::ExactCentered => (0..c)
                .map(|j| (j == k) as u8 as f64 - 1.0 / c as f64)
                .collect(),
            ProbeKind::ExactLambda => lambda_column(p.unwrap(), |j| (j == k) as u8 as f64),
            ProbeKind::Rademacher => {
                let mut r = rng();
                (0..c).map(|_| rademacher(&mut r) * scale).collect()
            }
            ProbeKind::CenteredRademacher => {
                let mut r = rng();
                let z: Vec<f64> = (0..c).map(|_| rademacher(&mut r)).collect();
                let mean = z.iter().sum::<f64>() / c as f64;
                z.iter().map(|x| (x - mean) * scale).collect()
            }
            ProbeKind::LambdaGaussian => {
                let g = gaussian_vec(c, &mut rng());
                lambda_column(p.unwrap(), |j| g[j] * scale)
            }
        }
    }
}

/// `(I - p1ᵀ) Diag(√p) g` for `C >= 2`, `√(p(1-p)) g` for a single logit.
fn lambda_column(p: &[f64], g: impl Fn(usize) -> f64) -> Vec<f64> {
    if p.len() == 1 {
        return vec![(p[0] * (1.0 - p[0])).sqrt() * g(0)];
    }
    let w: Vec<f64> = (0..p.len()).map(|j| p[j].sqrt() * g(j)).collect();
    let s: f64 = w.iter().sum();
    (0..p.len()).map(|j| w[j] - p[j] * s).collect()
}

/// One captured block of output-side signals: `d_out x (columns * channels)`,
/// column `t * channels + k` for token column `t` and channel `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBlock {
    pub kind: ProbeKind,
    pub channels: usize,
    pub matrix: DenseMatrix,
}

/// Signals captured at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub layer: usize,
    pub samples: usize,
    pub tokens: usize,
    pub classes: usize,
    /// `d_in x columns`: per-token inputs, or per-sample token sums once pooled.
    pub inputs: DenseMatrix,
    pub output: Option<ChannelBlock>,
    pub weighted: Option<ChannelBlock>,
    /// `d_out x columns` loss derivatives (dropped by pooling).
    pub loss: Option<DenseMatrix>,
    pub pooled: bool,
}

impl SignalRecord {
    fn empty(layer: usize, samples: usize, tokens: usize, classes: usize, inputs: DenseMatrix) -> Self {
        SignalRecord {
            layer,
            samples,
            tokens,
            classes,
            inputs,
            output: None,
            weighted: None,
            loss: None,
            pooled: false,
        }
    }

    pub fn d_in(&self) -> usize {
        self.inputs.rows()
    }

    pub fn d_out(&self) -> Option<usize> {
        self.output
            .as_ref()
            .map(|b| b.matrix.rows())
            .or_else(|| self.weighted.as_ref().map(|b| b.matrix.rows()))
            .or_else(|| self.loss.as_ref().map(|m| m.rows()))
    }

    /// Token columns per sample currently stored.
    pub fn columns_per_sample(&self) -> usize {
        if self.pooled {
            1
        } else {
            self.tokens
        }
    }

    /// Explicit loss gradient `Σ μ hᵀ` (`d_out x d_in`).
    pub fn gradient(&self) -> Result<DenseMatrix> {
        let mu = self
            .loss
            .as_ref()
            .ok_or_else(|| invalid("record carries no loss signals"))?;
        Ok(mu.mul_tr(&self.inputs))
    }

    pub fn check_finite(&self) -> Result<()> {
        self.inputs.check_finite()?;
        for b in [&self.output, &self.weighted].into_iter().flatten() {
            b.matrix.check_finite()?;
        }
        if let Some(mu) = &self.loss {
            mu.check_finite()?;
        }
        Ok(())
    }

    /// Concatenates records captured on consecutive micro-batches.
    pub fn concat(parts: &[SignalRecord]) -> Result<SignalRecord> {
        let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        let mut out = first.clone();
        for p in &parts[1..] {
            if (p.layer, p.tokens, p.classes, p.pooled) != (first.layer, first.tokens, first.classes, first.pooled)
                || p.d_in() != first.d_in()
            {
                return Err(dim_err("micro-batch records disagree on layout"));
            }
            out.samples += p.samples;
            out.inputs = out.inputs.hcat(&p.inputs);
            out.output = cat_block(out.output.take(), &p.output)?;
            out.weighted = cat_block(out.weighted.take(), &p.weighted)?;
            out.loss = match (out.loss.take(), &p.loss) {
                (Some(a), Some(b)) => Some(a.hcat(b)),
                (None, None) => None,
                _ => return Err(dim_err("micro-batch records disagree on loss signals")),
            };
        }
        Ok(out)
    }
}

fn cat_block(a: Option<ChannelBlock>, b: &Option<ChannelBlock>) -> Result<Option<ChannelBlock>> {
    match (a, b) {
        (None, None) => Ok(None),
        (Some(a), Some(b)) if a.kind == b.kind && a.channels == b.channels => Ok(Some(ChannelBlock {
            kind: a.kind,
            channels: a.channels,
            matrix: a.matrix.hcat(&b.matrix),
        })),
        _ => Err(dim_err("micro-batch records disagree on channel blocks")),
    }
}

fn probe_block(net: &Network, fp: &ForwardPass, batch: &Batch, layer: usize, probe: &ProbeSpec) -> Result<ChannelBlock> {
    let classes = net.out_dim();
    probe.validate(classes)?;
    let p = if probe.kind.is_lambda() {
        let p = probabilities(&fp.logits);
        check_interior(&p)?;
        Some(p)
    } else {
        None
    };
    let channels = probe.channels(classes);
    let (n, tokens) = (fp.samples, fp.tokens);
    let d_out = net.layer(layer)?.out_dim();
    let mut block = DenseMatrix::zeros(d_out, n * tokens * channels);
    let unused = vec![0.0; classes];
    for k in 0..channels {
        let mut seed = DenseMatrix::zeros(n, classes);
        for i in 0..n {
            let pi = p.as_ref().map_or(&unused[..], |p| p.row(i));
            let z = probe.vector(layer, k, batch.offset() + i, Some(pi));
            seed.row_mut(i).copy_from_slice(&z);
        }
        let d = backward_to(net, fp, &seed, layer)?;
        for t in 0..n * tokens {
            for (a, &v) in d.row(t).iter().enumerate() {
                block[(a, t * channels + k)] = v;
            }
        }
    }
    Ok(ChannelBlock {
        kind: probe.kind,
        channels,
        matrix: block,
    })
}

/// Inputs `h` and probe-combined output derivatives at `layer`; one backward
/// pass per channel.
pub fn capture_output_signals(net: &Network, batch: &Batch, layer: usize, probe: &ProbeSpec) -> Result<SignalRecord> {
    let fp = forward_pass(net, batch)?;
    let block = probe_block(net, &fp, batch, layer, probe)?;
    let mut rec = SignalRecord::empty(layer, fp.samples, fp.tokens, net.out_dim(), fp.inputs[layer].transpose());
    rec.output = Some(block);
    Ok(rec)
}

/// Inputs `h` and loss derivatives `μ` with `Σ μ hᵀ = ∇_W L`.
pub fn capture_loss_signals(net: &Network, batch: &Batch, layer: usize, loss: LossKind) -> Result<SignalRecord> {
    let fp = forward_pass(net, batch)?;
    let mu = loss_signals(net, &fp, batch, layer, loss)?;
    let mut rec = SignalRecord::empty(layer, fp.samples, fp.tokens, net.out_dim(), fp.inputs[layer].transpose());
    rec.loss = Some(mu);
    Ok(rec)
}

fn loss_signals(net: &Network, fp: &ForwardPass, batch: &Batch, layer: usize, loss: LossKind) -> Result<DenseMatrix> {
    let g = loss_gradient(&fp.logits, batch, loss)?;
    Ok(backward_to(net, fp, &g, layer)?.transpose())
}

/// What to capture at a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapturePlan {
    pub loss: LossKind,
    pub output: ProbeSpec,
    /// Curvature-weighted block (lambda probes), used by bce and ce.
    pub weighted: Option<ProbeSpec>,
}

impl CapturePlan {
    /// Standard plan: plain (squared), plain + weighted (bce) or centered +
    /// weighted (ce). `probes = None` selects the exact constructions.
    pub fn for_loss(loss: LossKind, classes: usize, probes: Option<usize>, seed: u64) -> Result<Self> {
        let spec = |exact: ProbeKind, random: ProbeKind| match probes {
            None => Ok(ProbeSpec::exact(exact)),
            Some(p) => ProbeSpec::new(random, p, seed),
        };
        let plain = if classes == 1 {
            Ok(ProbeSpec::exact(ProbeKind::Ones))
        } else {
            spec(ProbeKind::Exact, ProbeKind::Rademacher)
        };
        Ok(match loss {
            LossKind::Squared => CapturePlan {
                loss,
                output: plain?,
                weighted: None,
            },
            LossKind::Bce => {
                if classes != 1 {
                    return Err(invalid("bce needs a single logit"));
                }
                CapturePlan {
                    loss,
                    output: plain?,
                    weighted: Some(ProbeSpec::exact(ProbeKind::ExactLambda)),
                }
            }
            LossKind::Ce => CapturePlan {
                loss,
                output: spec(ProbeKind::ExactCentered, ProbeKind::CenteredRademacher)?,
                weighted: Some(spec(ProbeKind::ExactLambda, ProbeKind::LambdaGaussian)?),
            },
        })
    }
}

/// All signals of `plan` at `layer` from a single forward pass.
pub fn capture_layer(net: &Network, batch: &Batch, layer: usize, plan: &CapturePlan) -> Result<SignalRecord> {
    let fp = forward_pass(net, batch)?;
    let mut rec = SignalRecord::empty(layer, fp.samples, fp.tokens, net.out_dim(), fp.inputs[layer].transpose());
    rec.output = Some(probe_block(net, &fp, batch, layer, &plan.output)?);
    if let Some(w) = &plan.weighted {
        rec.weighted = Some(probe_block(net, &fp, batch, layer, w)?);
    }
    rec.loss = Some(loss_signals(net, &fp, batch, layer, plan.loss)?);
    Ok(rec)
}

/// Jacobian of the logits with respect to layer `layer`'s weight: row
/// `i * C + c` is `vec(∇_W f_c(x_i))` in column-stacked order.
pub fn full_jacobian(net: &Network, batch: &Batch, layer: usize, cap: usize) -> Result<DenseMatrix> {
    let l = net.layer(layer)?;
    let (d_in, d_out, c, n) = (l.in_dim(), l.out_dim(), net.out_dim(), batch.samples());
    let entries = n * c * d_in * d_out;
    if entries > cap {
        return Err(Error::SizeCap { entries, cap });
    }
    let rec = capture_output_signals(net, batch, layer, &ProbeSpec::exact(ProbeKind::Exact))?;
    jacobian_from_signals(&rec)
}

/// Jacobian rebuilt from an unpooled record with exact per-class channels.
pub fn jacobian_from_signals(rec: &SignalRecord) -> Result<DenseMatrix> {
    let block = rec
        .output
        .as_ref()
        .filter(|b| matches!(b.kind, ProbeKind::Exact | ProbeKind::Ones) && !rec.pooled)
        .ok_or_else(|| invalid("the Jacobian needs unpooled exact per-class signals"))?;
    let (n, tokens, c) = (rec.samples, rec.tokens, block.channels);
    let (d_in, d_out) = (rec.d_in(), block.matrix.rows());
    let mut jac = DenseMatrix::zeros(n * c, d_in * d_out);
    for i in 0..n {
        for k in 0..c {
            let row = jac.row_mut(i * c + k);
            for w in 0..tokens {
                let t = i * tokens + w;
                for j in 0..d_in {
                    let h = rec.inputs[(j, t)];
                    if h == 0.0 {
                        continue;
                    }
                    for a in 0..d_out {
                        row[j * d_out + a] += block.matrix[(a, t * c + k)] * h;
                    }
                }
            }
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_identity(d: usize) -> Network {
        Network::new(
            &[LayerSpec::new(d, d, Activation::Identity).with_weights(DenseMatrix::identity(d))],
            0,
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_inputs() {
        let net = single_identity(3);
        let x = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let f = forward(&net, &Batch::unlabeled(x.clone(), 1).unwrap()).unwrap();
        assert_eq!(f, x);
    }

    #[test]
    fn zero_weights_zero_logits() {
        let net = Network::new(
            &[
                LayerSpec::new(2, 3, Activation::Tanh).with_weights(DenseMatrix::zeros(3, 2)),
                LayerSpec::new(3, 2, Activation::Identity).with_weights(DenseMatrix::zeros(2, 3)),
            ],
            0,
        )
        .unwrap();
        let x = DenseMatrix::from_fn(4, 2, |i, j| (i + j) as f64);
        let f = forward(&net, &Batch::unlabeled(x, 1).unwrap()).unwrap();
        assert_eq!(f, DenseMatrix::zeros(4, 2));
    }

    #[test]
    fn probability_examples() {
        let p = probabilities(&DenseMatrix::zeros(1, 1));
        assert_eq!(p[(0, 0)], 0.5);
        assert_eq!(lambda_block(&[0.5])[(0, 0)], 0.25);
        let p = probabilities(&DenseMatrix::zeros(1, 3));
        let lam = lambda_block(p.row(0));
        let third = 1.0 / 3.0;
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { third } else { 0.0 } - third * third;
                assert!((lam[(a, b)] - expect).abs() < 1e-15);
            }
        }
        assert!(matches!(
            check_interior(&DenseMatrix::from_diag(&[1.0])),
            Err(Error::BoundaryProbability { .. })
        ));
    }

    #[test]
    fn zero_residual() {
        let net = single_identity(2);
        let x = DenseMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 * 0.5);
        let batch = Batch::new(x.clone(), 1, Targets::Dense(x)).unwrap();
        let f = forward(&net, &batch).unwrap();
        assert_eq!(loss_value(&f, &batch, LossKind::Squared).unwrap(), 0.0);
        assert_eq!(residual(&f, &batch).unwrap(), DenseMatrix::zeros(3, 2));
        let rec = capture_loss_signals(&net, &batch, 0, LossKind::Squared).unwrap();
        assert_eq!(rec.loss.unwrap().max_abs(), 0.0);
    }

    #[test]
    fn centered_probe_annihilates_constants() {
        let z = lambda_column(&[0.2, 0.3, 0.5], |_| 0.0);
        assert_eq!(z, vec![0.0; 3]);
        let spec = ProbeSpec::exact(ProbeKind::ExactCentered);
        let col_sum: f64 = (0..3)
            .map(|k| spec.vector(0, k, 0, Some(&[0.0; 3])).iter().sum::<f64>())
            .sum();
        assert!(col_sum.abs() < 1e-15);
    }

    #[test]
    fn linear_jacobian_rows() {
        let net = single_identity(2);
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let batch = Batch::unlabeled(x, 1).unwrap();
        let jac = full_jacobian(&net, &batch, 0, DEFAULT_JACOBIAN_CAP).unwrap();
        // vec(e_c hᵀ) with h = (1, 2): column j * 2 + a.
        assert_eq!(jac.row(0), &[1.0, 0.0, 2.0, 0.0]);
        assert_eq!(jac.row(1), &[0.0, 1.0, 0.0, 2.0]);
        assert_eq!(jac.row(2), &[0.0; 4]);
        assert!(matches!(
            full_jacobian(&net, &batch, 0, 10),
            Err(Error::SizeCap { .. })
        ));
    }

    #[test]
    fn probe_validation() {
        assert!(ProbeSpec::exact(ProbeKind::Ones).validate(3).is_err());
        assert!(ProbeSpec::exact(ProbeKind::ExactCentered).validate(1).is_err());
        assert!(ProbeSpec::new(ProbeKind::Rademacher, 0, 1).is_err());
    }
}
