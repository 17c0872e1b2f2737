//! Kronecker curvature factors `S ⊗ T` and their randomized thin
//! eigendecompositions.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, invalid, Error, Result};
use crate::linalg::{thin_qr, thin_svd, DenseMatrix, DEFAULT_CUTOFF};
use crate::model::{ChannelBlock, ProbeKind, SignalRecord};
use crate::random::{gaussian_matrix, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorVariant {
    Plain,
    KfacReduce,
    Centered,
    CurvatureWeighted,
}

impl FactorVariant {
    pub const ALL: [FactorVariant; 4] = [
        FactorVariant::Plain,
        FactorVariant::KfacReduce,
        FactorVariant::Centered,
        FactorVariant::CurvatureWeighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FactorVariant::Plain => "plain",
            FactorVariant::KfacReduce => "kfac-reduce",
            FactorVariant::Centered => "centered",
            FactorVariant::CurvatureWeighted => "curvature-weighted",
        }
    }
}

impl fmt::Display for FactorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FactorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FactorVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown factor variant `{s}`")))
    }
}

/// Thin eigendecomposition of a Gram matrix `X Xᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SideEigen {
    /// `d x r`, orthonormal columns.
    pub vectors: DenseMatrix,
    /// Positive, non-increasing.
    pub values: Vec<f64>,
}

impl SideEigen {
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    pub fn gram(&self) -> DenseMatrix {
        self.vectors.scale_cols(&self.values).mul_tr(&self.vectors)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.vectors.cols() != self.values.len() {
            return Err(dim_err(format!(
                "{what}: {} eigenvectors for {} eigenvalues",
                self.vectors.cols(),
                self.values.len()
            )));
        }
        if self.values.is_empty() {
            return Err(Error::RankZero);
        }
        if self.values.iter().any(|&v| !(v > 0.0 && v.is_finite()))
            || self.values.windows(2).any(|w| w[1] > w[0])
        {
            return Err(invalid(format!("{what}: eigenvalues must be positive and non-increasing")));
        }
        let gram = self.vectors.tr_mul(&self.vectors);
        let dev = gram.max_abs_diff(&DenseMatrix::identity(self.rank()));
        if dev > 1e-10 {
            return Err(invalid(format!("{what}: eigenvectors are not orthonormal (deviation {dev:e})")));
        }
        Ok(())
    }
}

/// Thin eigendecompositions of `S` and `T`. `d_s` already includes
/// `normalization`.
#[derive(Clone, Debug, PartialEq)]
pub struct KfacFactors {
    pub u_s: DenseMatrix,
    pub d_s: Vec<f64>,
    pub u_t: DenseMatrix,
    pub d_t: Vec<f64>,
    pub variant: FactorVariant,
    pub normalization: f64,
    pub seed: u64,
}

impl KfacFactors {
    /// Assembles factors from unnormalized `S`-side eigenvalues.
    pub fn from_parts(s: SideEigen, t: SideEigen, variant: FactorVariant, normalization: f64, seed: u64) -> Result<Self> {
        if !(normalization > 0.0 && normalization.is_finite()) {
            return Err(invalid(format!("normalization {normalization} must be positive")));
        }
        s.validate("S factor")?;
        t.validate("T factor")?;
        Ok(KfacFactors {
            d_s: s.values.iter().map(|v| v * normalization).collect(),
            u_s: s.vectors,
            u_t: t.vectors,
            d_t: t.values,
            variant,
            normalization,
            seed,
        })
    }

    pub fn r_s(&self) -> usize {
        self.d_s.len()
    }

    pub fn r_t(&self) -> usize {
        self.d_t.len()
    }

    pub fn d_in(&self) -> usize {
        self.u_s.rows()
    }

    pub fn d_out(&self) -> usize {
        self.u_t.rows()
    }

    /// Same eigenvectors with `D_S` and `D_T` multiplied by positive scalars.
    pub fn rescaled(&self, c_s: f64, c_t: f64) -> Self {
        let mut out = self.clone();
        out.d_s.iter_mut().for_each(|v| *v *= c_s);
        out.d_t.iter_mut().for_each(|v| *v *= c_t);
        out
    }

    pub fn s_side(&self) -> SideEigen {
        SideEigen {
            vectors: self.u_s.clone(),
            values: self.d_s.clone(),
        }
    }

    pub fn t_side(&self) -> SideEigen {
        SideEigen {
            vectors: self.u_t.clone(),
            values: self.d_t.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubspaceParams {
    /// Sketch width `m`.
    pub oversample: usize,
    /// Power iterations `q`.
    pub power_iters: usize,
    pub seed: u64,
}

impl SubspaceParams {
    pub fn new(oversample: usize, power_iters: usize, seed: u64) -> Result<Self> {
        if oversample == 0 {
            return Err(invalid("oversampling m must be >= 1"));
        }
        Ok(SubspaceParams {
            oversample,
            power_iters,
            seed,
        })
    }
}

const SIDE_S: u64 = 0;
const SIDE_T: u64 = 1;
const SIDE_CENTERED: u64 = 2;
const SIDE_WEIGHTED: u64 = 3;

/// Randomized subspace iteration for the Gram `X Xᵀ` of a `d x cols` block,
/// using only products with `X` and `Xᵀ`.
pub fn subspace(block: &DenseMatrix, params: &SubspaceParams) -> Result<SideEigen> {
    subspace_stream(block, params, SIDE_S)
}

fn subspace_stream(block: &DenseMatrix, params: &SubspaceParams, side: u64) -> Result<SideEigen> {
    let (d, cols) = block.shape();
    if d == 0 || cols == 0 {
        return Err(Error::Empty);
    }
    block.check_finite()?;
    let m = params.oversample;
    if m == 0 || m > d {
        return Err(invalid(format!("oversampling m = {m} must lie in [1, {d}]")));
    }
    if block.max_abs() == 0.0 {
        return Err(Error::RankZero);
    }
    let mut rng = stream(params.seed, &[side]);
    let mut q = gaussian_matrix(d, m, &mut rng);
    if params.power_iters == 0 {
        q = thin_qr(&q)?.q;
    }
    for _ in 0..params.power_iters {
        let y = block.mul(&block.tr_mul(&q));
        q = thin_qr(&y)?.q;
    }
    let b = q.tr_mul(block);
    let svd = thin_svd(&b, DEFAULT_CUTOFF)?;
    if svd.rank() == 0 {
        return Err(Error::RankZero);
    }
    Ok(SideEigen {
        vectors: q.mul(&svd.u),
        values: svd.d.iter().map(|s| s * s).collect(),
    })
}

/// Sums tokens per sample (inputs and channel blocks). Loss signals are dropped
/// since the gradient is not invariant to pooling.
pub fn pool_signals(rec: &SignalRecord) -> Result<SignalRecord> {
    if rec.tokens == 0 {
        return Err(invalid("token count must be >= 1"));
    }
    if rec.pooled {
        return Ok(rec.clone());
    }
    let (n, tokens) = (rec.samples, rec.tokens);
    let pool = |m: &DenseMatrix, channels: usize| {
        DenseMatrix::from_fn(m.rows(), n * channels, |a, col| {
            let (i, k) = (col / channels, col % channels);
            (0..tokens).map(|w| m[(a, (i * tokens + w) * channels + k)]).sum()
        })
    };
    let pool_block = |b: &Option<ChannelBlock>| {
        b.as_ref().map(|b| ChannelBlock {
            kind: b.kind,
            channels: b.channels,
            matrix: pool(&b.matrix, b.channels),
        })
    };
    Ok(SignalRecord {
        layer: rec.layer,
        samples: n,
        tokens,
        classes: rec.classes,
        inputs: pool(&rec.inputs, 1),
        output: pool_block(&rec.output),
        weighted: pool_block(&rec.weighted),
        loss: None,
        pooled: true,
    })
}

/// `1/n`, or `1/(n Ω²)` under token pooling.
pub fn s_normalization(rec: &SignalRecord) -> f64 {
    let n = rec.samples as f64;
    let w = rec.tokens as f64;
    if rec.tokens > 1 {
        1.0 / (n * w * w)
    } else {
        1.0 / n
    }
}

fn clamp(params: &SubspaceParams, d: usize) -> SubspaceParams {
    SubspaceParams {
        oversample: params.oversample.min(d),
        ..*params
    }
}

fn prepared(rec: &SignalRecord) -> Result<SignalRecord> {
    if rec.tokens > 1 {
        pool_signals(rec)
    } else {
        Ok(rec.clone())
    }
}

fn s_factor(rec: &SignalRecord, params: &SubspaceParams) -> Result<SideEigen> {
    subspace_stream(&rec.inputs, &clamp(params, rec.d_in()), SIDE_S)
}

fn block<'a>(b: &'a Option<ChannelBlock>, what: &str) -> Result<&'a ChannelBlock> {
    b.as_ref().ok_or_else(|| invalid(format!("record carries no {what} signals")))
}

/// Plain factors (`Ω = 1`) or K-FAC-reduce factors (tokens pooled first). The
/// sketch width is clamped to each side's dimension.
pub fn kfac_factors(rec: &SignalRecord, params: &SubspaceParams) -> Result<KfacFactors> {
    let out = block(&rec.output, "output")?;
    if out.kind.is_centered() || out.kind.is_lambda() {
        return Err(invalid(format!("plain T needs uncentered probes, got {}", out.kind)));
    }
    let rec = prepared(rec)?;
    let out = block(&rec.output, "output")?;
    let s = s_factor(&rec, params)?;
    let t = subspace_stream(&out.matrix, &clamp(params, out.matrix.rows()), SIDE_T)?;
    let variant = if rec.tokens > 1 {
        FactorVariant::KfacReduce
    } else {
        FactorVariant::Plain
    };
    KfacFactors::from_parts(s, t, variant, s_normalization(&rec), params.seed)
}

/// Factors with `T̃ = Σ δ (I - 11ᵀ/C) δᵀ` on the output side.
pub fn centered_factor(rec: &SignalRecord, params: &SubspaceParams) -> Result<KfacFactors> {
    if rec.classes < 2 {
        return Err(invalid("the centered factor needs C >= 2"));
    }
    let out = block(&rec.output, "output")?;
    if !out.kind.is_centered() {
        return Err(invalid(format!("centered T needs centered probes, got {}", out.kind)));
    }
    let rec = prepared(rec)?;
    let out = block(&rec.output, "output")?;
    let s = s_factor(&rec, params)?;
    let t = subspace_stream(&out.matrix, &clamp(params, out.matrix.rows()), SIDE_CENTERED)?;
    KfacFactors::from_parts(s, t, FactorVariant::Centered, s_normalization(&rec), params.seed)
}

/// Factors whose output side is the curvature-weighted `O = Σ p(1-p) δδᵀ`
/// (one logit) or `Θ = Σ δ Λ δᵀ`.
pub fn curvature_weighted_factor(rec: &SignalRecord, params: &SubspaceParams) -> Result<KfacFactors> {
    let w = block(&rec.weighted, "curvature-weighted")?;
    if !w.kind.is_lambda() {
        return Err(invalid(format!("weighted T needs lambda probes, got {}", w.kind)));
    }
    let rec = prepared(rec)?;
    let w = block(&rec.weighted, "curvature-weighted")?;
    let s = s_factor(&rec, params)?;
    let t = subspace_stream(&w.matrix, &clamp(params, w.matrix.rows()), SIDE_WEIGHTED)?;
    KfacFactors::from_parts(s, t, FactorVariant::CurvatureWeighted, s_normalization(&rec), params.seed)
}

/// Dense `S = U_S D_S U_Sᵀ` and `T = U_T D_T U_Tᵀ`.
pub fn kfac_gram(factors: &KfacFactors) -> (DenseMatrix, DenseMatrix) {
    (factors.s_side().gram(), factors.t_side().gram())
}

/// Explicit binary curvature block: each column of `output` scaled by
/// `√(p_i(1-p_i))` for its sample.
pub fn binary_weighted_block(output: &ChannelBlock, p: &[f64], columns_per_sample: usize) -> Result<ChannelBlock> {
    if output.channels != 1 {
        return Err(invalid("binary weighting needs a single output channel"));
    }
    let per = columns_per_sample;
    if output.matrix.cols() != p.len() * per {
        return Err(dim_err(format!(
            "{} columns for {} samples",
            output.matrix.cols(),
            p.len()
        )));
    }
    for (i, &v) in p.iter().enumerate() {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::BoundaryProbability { sample: i, value: v });
        }
    }
    let w: Vec<f64> = (0..output.matrix.cols())
        .map(|c| {
            let pi = p[c / per];
            (pi * (1.0 - pi)).sqrt()
        })
        .collect();
    Ok(ChannelBlock {
        kind: ProbeKind::ExactLambda,
        channels: 1,
        matrix: output.matrix.scale_cols(&w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_gram() {
        let h = DenseMatrix::from_diag(&[2.0, 1.0]);
        let e = subspace(&h, &SubspaceParams::new(2, 1, 3).unwrap()).unwrap();
        assert!((e.values[0] - 4.0).abs() < 1e-12);
        assert!((e.values[1] - 1.0).abs() < 1e-12);
        assert!((e.vectors[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((e.vectors[(1, 1)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subspace_errors() {
        let h = DenseMatrix::from_diag(&[2.0, 1.0]);
        assert!(subspace(&h, &SubspaceParams::new(3, 1, 0).unwrap()).is_err());
        assert!(matches!(
            subspace(&DenseMatrix::zeros(3, 4), &SubspaceParams::new(2, 1, 0).unwrap()),
            Err(Error::RankZero)
        ));
        assert!(SubspaceParams::new(0, 1, 0).is_err());
    }

    #[test]
    fn identity_factors_gram() {
        let e = SideEigen {
            vectors: DenseMatrix::identity(3),
            values: vec![1.0; 3],
        };
        let f = KfacFactors::from_parts(e.clone(), e, FactorVariant::Plain, 0.25, 0).unwrap();
        let (s, t) = kfac_gram(&f);
        assert!(s.max_abs_diff(&DenseMatrix::identity(3).scale(0.25)) < 1e-15);
        assert_eq!(t, DenseMatrix::identity(3));
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in FactorVariant::ALL {
            assert_eq!(v.name().parse::<FactorVariant>().unwrap(), v);
        }
    }
}
