//! Whitened gradients, the cross-entropy reweighting `Φ` and the multiclass
//! gauge `Ψ`.

use crate::curvature::{FactorVariant, KfacFactors};
use crate::error::{dim_err, invalid, Error, Result};
use crate::linalg::{sym_eigen, DenseMatrix};
use crate::model::{ChannelBlock, LossKind, ProbeKind, SignalRecord};

/// Relative eigenvalue floor below which `Φ` is treated as singular.
pub const PHI_FLOOR: f64 = 1e-12;

/// Semi-orthogonal `C x (C-1)` matrix annihilating the all-ones vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GaugeMatrix {
    psi: DenseMatrix,
}

impl GaugeMatrix {
    /// Validates `ΨᵀΨ = I` and `Ψᵀ1 = 0` to 1e-12.
    pub fn new(psi: DenseMatrix) -> Result<Self> {
        let (c, k) = psi.shape();
        if c < 2 || k + 1 != c {
            return Err(dim_err(format!("a gauge must be C x (C-1), got {c}x{k}")));
        }
        psi.check_finite()?;
        let ortho = psi.tr_mul(&psi).max_abs_diff(&DenseMatrix::identity(k));
        let ones = psi.tr_mul_vec(&vec![1.0; c]);
        let leak = ones.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if ortho > 1e-12 || leak > 1e-12 {
            return Err(invalid(format!(
                "not a valid gauge (orthonormality {ortho:e}, ones leakage {leak:e})"
            )));
        }
        Ok(GaugeMatrix { psi })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.psi
    }

    pub fn classes(&self) -> usize {
        self.psi.rows()
    }
}

/// Deterministic gauge: the Householder reflection sending `e_1` to `1/√C`,
/// without its first column.
pub fn make_gauge(classes: usize) -> Result<GaugeMatrix> {
    if classes < 2 {
        return Err(invalid(format!("a gauge needs C >= 2, got {classes}")));
    }
    let c = classes;
    let u = 1.0 / (c as f64).sqrt();
    let mut v = vec![-u; c];
    v[0] += 1.0;
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let psi = DenseMatrix::from_fn(c, c - 1, |i, j| {
        let col = j + 1;
        (i == col) as u8 as f64 - 2.0 * v[i] * v[col] / vv
    });
    GaugeMatrix::new(psi)
}

/// Curvature reweighting `Φ` with its inverse square root.
#[derive(Clone, Debug, PartialEq)]
pub struct Phi {
    pub matrix: DenseMatrix,
    pub inv_sqrt: DenseMatrix,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `λ_max / λ_min`.
    pub condition: f64,
}

impl Phi {
    /// Symmetrizes `m` and checks it is numerically positive-definite.
    pub fn from_matrix(m: &DenseMatrix) -> Result<Self> {
        let matrix = m.symmetrize();
        let eig = sym_eigen(&matrix)?;
        let lmax = eig.values[0];
        let lmin = *eig.values.last().unwrap();
        if !(lmax > 0.0) || lmin <= PHI_FLOOR * lmax {
            return Err(Error::SingularPhi {
                ratio: if lmax > 0.0 { lmin / lmax } else { 0.0 },
            });
        }
        let w: Vec<f64> = eig.values.iter().map(|l| 1.0 / l.sqrt()).collect();
        let inv_sqrt = eig.vectors.scale_cols(&w).mul_tr(&eig.vectors).symmetrize();
        Ok(Phi {
            matrix,
            inv_sqrt,
            lambda_min: lmin,
            lambda_max: lmax,
            condition: lmax / lmin,
        })
    }

    /// `‖Φ^{-1/2}‖₂`.
    pub fn inv_sqrt_norm(&self) -> f64 {
        1.0 / self.lambda_min.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WhitenedGradient {
    /// `r_t x r_s`.
    pub f: DenseMatrix,
    pub loss: LossKind,
    pub phi: Option<Phi>,
    pub gauge: Option<GaugeMatrix>,
}

impl WhitenedGradient {
    pub fn singular_values(&self) -> Result<Vec<f64>> {
        crate::linalg::svd_values(&self.f)
    }
}

fn inv_sqrt(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| 1.0 / v.sqrt()).collect()
}

/// `D_T^{-1/2} U_Tᵀ ∇ U_S D_S^{-1/2}` for an explicit `d_out x d_in` gradient.
pub fn whiten_dense(grad: &DenseMatrix, factors: &KfacFactors) -> Result<DenseMatrix> {
    if grad.shape() != (factors.d_out(), factors.d_in()) {
        return Err(dim_err(format!(
            "gradient is {:?}, factors expect {:?}",
            grad.shape(),
            (factors.d_out(), factors.d_in())
        )));
    }
    Ok(factors
        .u_t
        .tr_mul(grad)
        .mul(&factors.u_s)
        .scale_rows(&inv_sqrt(&factors.d_t))
        .scale_cols(&inv_sqrt(&factors.d_s)))
}

/// Whitened gradient accumulated from `(h, μ)` in the factor bases, without
/// forming `∇ = Σ μ hᵀ`.
pub fn project_gradient(rec: &SignalRecord, factors: &KfacFactors) -> Result<DenseMatrix> {
    let mu = rec
        .loss
        .as_ref()
        .ok_or_else(|| invalid("record carries no loss signals (pooled records drop them)"))?;
    if rec.d_in() != factors.d_in() || mu.rows() != factors.d_out() {
        return Err(dim_err(format!(
            "signals are {}->{}, factors {}->{}",
            rec.d_in(),
            mu.rows(),
            factors.d_in(),
            factors.d_out()
        )));
    }
    let pt = factors.u_t.tr_mul(mu);
    let ps = factors.u_s.tr_mul(&rec.inputs);
    Ok(pt
        .mul_tr(&ps)
        .scale_rows(&inv_sqrt(&factors.d_t))
        .scale_cols(&inv_sqrt(&factors.d_s)))
}

/// Squared-loss whitened gradient.
pub fn whitened_gradient_sq(rec: &SignalRecord, factors: &KfacFactors) -> Result<WhitenedGradient> {
    if !matches!(factors.variant, FactorVariant::Plain | FactorVariant::KfacReduce) {
        return Err(invalid(format!(
            "squared-loss whitening needs plain factors, got {}",
            factors.variant
        )));
    }
    Ok(WhitenedGradient {
        f: project_gradient(rec, factors)?,
        loss: LossKind::Squared,
        phi: None,
        gauge: None,
    })
}

/// `Φ = D_T^{-1/2} (U_Tᵀ U_O) D_O (U_Oᵀ U_T) D_T^{-1/2}` from two sets of
/// factors sharing the output space.
pub fn phi(factors_t: &KfacFactors, weighted: &KfacFactors) -> Result<Phi> {
    if weighted.variant != FactorVariant::CurvatureWeighted {
        return Err(invalid("Φ needs curvature-weighted factors"));
    }
    if weighted.d_out() != factors_t.d_out() {
        return Err(dim_err("T and weighted factors live in different output spaces"));
    }
    let x = factors_t
        .u_t
        .tr_mul(&weighted.u_t)
        .scale_rows(&inv_sqrt(&factors_t.d_t))
        .scale_cols(&weighted.d_t.iter().map(|v| v.sqrt()).collect::<Vec<_>>());
    Phi::from_matrix(&x.mul_tr(&x))
}

/// `Φ` straight from the curvature-weighted signal block `W` with `O = W Wᵀ`.
pub fn phi_from_block(factors_t: &KfacFactors, weighted: &ChannelBlock) -> Result<Phi> {
    if !weighted.kind.is_lambda() {
        return Err(invalid(format!("Φ needs lambda-weighted signals, got {}", weighted.kind)));
    }
    if weighted.matrix.rows() != factors_t.d_out() {
        return Err(dim_err("weighted block does not match the output dimension"));
    }
    let x = factors_t
        .u_t
        .tr_mul(&weighted.matrix)
        .scale_rows(&inv_sqrt(&factors_t.d_t));
    Phi::from_matrix(&x.mul_tr(&x))
}

/// Cross-entropy whitened gradient `Φ^{-1/2} F_sq`. Binary losses use plain
/// factors, multiclass losses centered ones.
pub fn whitened_gradient_ce(rec: &SignalRecord, factors: &KfacFactors, phi: &Phi) -> Result<WhitenedGradient> {
    let (loss, gauge) = if rec.classes == 1 {
        if !matches!(factors.variant, FactorVariant::Plain | FactorVariant::KfacReduce) {
            return Err(invalid("binary whitening needs plain factors"));
        }
        (LossKind::Bce, None)
    } else {
        if factors.variant != FactorVariant::Centered {
            return Err(invalid("multiclass whitening needs centered factors"));
        }
        (LossKind::Ce, Some(make_gauge(rec.classes)?))
    };
    if phi.matrix.rows() != factors.r_t() {
        return Err(dim_err(format!(
            "Φ is {}x{}, factors have r_t = {}",
            phi.matrix.rows(),
            phi.matrix.cols(),
            factors.r_t()
        )));
    }
    let f_sq = project_gradient(rec, factors)?;
    Ok(WhitenedGradient {
        f: phi.inv_sqrt.mul(&f_sq),
        loss,
        phi: Some(phi.clone()),
        gauge,
    })
}

/// Right-multiplies every per-token output block `δ` (exact per-class
/// channels) by `Ψ`, leaving `C - 1` channels whose Gram is `T̃`.
pub fn reduce_signals(rec: &SignalRecord, gauge: &GaugeMatrix) -> Result<SignalRecord> {
    let out = rec
        .output
        .as_ref()
        .ok_or_else(|| invalid("record carries no output signals"))?;
    let c = gauge.classes();
    if out.kind != ProbeKind::Exact || out.channels != c {
        return Err(dim_err(format!(
            "reduction needs exact per-class channels for C = {c}, got {} x {}",
            out.kind, out.channels
        )));
    }
    let psi = gauge.matrix();
    let groups = out.matrix.cols() / c;
    let rows = out.matrix.rows();
    let mut reduced = DenseMatrix::zeros(rows, groups * (c - 1));
    for t in 0..groups {
        for k in 0..c - 1 {
            for a in 0..rows {
                reduced[(a, t * (c - 1) + k)] = (0..c).map(|j| out.matrix[(a, t * c + j)] * psi[(j, k)]).sum();
            }
        }
    }
    let mut rec = rec.clone();
    rec.output = Some(ChannelBlock {
        kind: ProbeKind::ExactCentered,
        channels: c - 1,
        matrix: reduced,
    });
    Ok(rec)
}

/// `g̃ = (I ⊗ Ψᵀ) g` for an `n x C` residual, returned as `n x (C-1)`.
pub fn reduce_residual(residual: &DenseMatrix, gauge: &GaugeMatrix) -> Result<DenseMatrix> {
    if residual.cols() != gauge.classes() {
        return Err(dim_err(format!(
            "residual has {} classes, gauge {}",
            residual.cols(),
            gauge.classes()
        )));
    }
    Ok(residual.mul(gauge.matrix()))
}
