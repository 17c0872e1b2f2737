//! Dense ground truth: linearized (NTK) predictors, Newton first steps for
//! cross-entropy, projection-difference alignment errors and synthetic
//! instances on which the Kronecker curvature model is exact.

use crate::curvature::{FactorVariant, KfacFactors, SideEigen};
use crate::error::{dim_err, invalid, Error, Result};
use crate::init::{LoraInit, ShiftMode};
use crate::linalg::{
    kron, norm2, pinv, range_basis, svd_values, sym_eigen, thin_qr, thin_svd, unvec, vec, DenseMatrix,
    DEFAULT_CUTOFF,
};
use crate::model::{Activation, Batch, LayerSpec, LossKind, Network, Targets, DEFAULT_JACOBIAN_CAP};
use crate::random::{gaussian_matrix, gaussian_vec, stream};
use crate::whitening::{whiten_dense, GaugeMatrix, WhitenedGradient};
use rand::Rng;

/// Shape of a generated positive spectrum (always non-increasing).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Spectrum {
    Flat(f64),
    /// `top * ratio^i`.
    Geometric { top: f64, ratio: f64 },
    /// Sorted draws from `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

impl Spectrum {
    fn values(&self, k: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
        let mut v: Vec<f64> = match *self {
            Spectrum::Flat(c) => vec![c; k],
            Spectrum::Geometric { top, ratio } => (0..k).map(|i| top * ratio.powi(i as i32)).collect(),
            Spectrum::Uniform { lo, hi } => (0..k).map(|_| rng.random_range(lo..=hi)).collect(),
        };
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub r_s: usize,
    pub r_t: usize,
    pub n: usize,
    pub classes: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub s_spectrum: Spectrum,
    pub t_spectrum: Spectrum,
    pub seed: u64,
}

impl SynthSpec {
    /// Dimensions drawn from `seed` with `n <= 10`, `C <= 4`, `d_in, d_out <= 12`
    /// and `r_S, r_T >= 4`, always feasible.
    pub fn random(seed: u64) -> Self {
        let mut rng = stream(seed, &[0xd1]);
        let r_s = rng.random_range(4..=6usize);
        let r_t = rng.random_range(4..=6usize);
        let classes = rng.random_range(2..=4usize).max((r_s * r_t).div_ceil(10));
        let n = rng.random_range((r_s * r_t).div_ceil(classes)..=10);
        let d_in = rng.random_range(r_s..=12);
        let d_out = rng.random_range(r_t..=12);
        SynthSpec::new(r_s, r_t, n, classes, d_in, d_out, seed)
    }

    /// Uniform spectra in `[0.5, 4]` on both sides.
    pub fn new(r_s: usize, r_t: usize, n: usize, classes: usize, d_in: usize, d_out: usize, seed: u64) -> Self {
        SynthSpec {
            r_s,
            r_t,
            n,
            classes,
            d_in,
            d_out,
            s_spectrum: Spectrum::Uniform { lo: 0.5, hi: 4.0 },
            t_spectrum: Spectrum::Uniform { lo: 0.5, hi: 4.0 },
            seed,
        }
    }
}

/// Instance with `J = U (D_S^{1/2} ⊗ D_T^{1/2}) (U_S ⊗ U_T)ᵀ`, so `JᵀJ = S ⊗ T`
/// exactly, and the squared-loss gradient `vec ∇ = -Jᵀ Z`.
#[derive(Clone, Debug)]
pub struct SyntheticKronecker {
    pub spec: SynthSpec,
    /// `nC x r_s r_t`, orthonormal columns ordered `p * r_t + q`.
    pub u: DenseMatrix,
    pub u_s: DenseMatrix,
    pub d_s: Vec<f64>,
    pub u_t: DenseMatrix,
    pub d_t: Vec<f64>,
    pub z: Vec<f64>,
    pub jacobian: DenseMatrix,
    /// `d_out x d_in`.
    pub grad: DenseMatrix,
    /// Constant probability of the binary cross-entropy regime.
    pub p0: Option<f64>,
}

fn orthonormal(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Result<DenseMatrix> {
    Ok(thin_qr(&gaussian_matrix(rows, cols, rng))?.q)
}

pub fn synth_instance(spec: &SynthSpec) -> Result<SyntheticKronecker> {
    let q = spec.r_s * spec.r_t;
    let rows = spec.n * spec.classes;
    if spec.r_s == 0 || spec.r_t == 0 || rows < q || spec.r_s > spec.d_in || spec.r_t > spec.d_out {
        return Err(invalid(format!(
            "infeasible instance: need 1 <= r_s <= d_in, 1 <= r_t <= d_out, nC >= r_s r_t (got {spec:?})"
        )));
    }
    if rows * spec.d_in * spec.d_out > DEFAULT_JACOBIAN_CAP {
        return Err(Error::SizeCap {
            entries: rows * spec.d_in * spec.d_out,
            cap: DEFAULT_JACOBIAN_CAP,
        });
    }
    let mut rng = stream(spec.seed, &[0x5eed]);
    let u = orthonormal(rows, q, &mut rng)?;
    let u_s = orthonormal(spec.d_in, spec.r_s, &mut rng)?;
    let u_t = orthonormal(spec.d_out, spec.r_t, &mut rng)?;
    let d_s = spec.s_spectrum.values(spec.r_s, &mut rng);
    let d_t = spec.t_spectrum.values(spec.r_t, &mut rng);
    let z = gaussian_vec(rows, &mut rng);
    let middle: Vec<f64> = d_s
        .iter()
        .flat_map(|s| d_t.iter().map(move |t| (s * t).sqrt()))
        .collect();
    let jacobian = u.scale_cols(&middle).mul_tr(&kron(&u_s, &u_t));
    let g: Vec<f64> = jacobian.tr_mul_vec(&z).iter().map(|x| -x).collect();
    let grad = unvec(&g, spec.d_out, spec.d_in)?;
    Ok(SyntheticKronecker {
        spec: *spec,
        u,
        u_s,
        d_s,
        u_t,
        d_t,
        z,
        jacobian,
        grad,
        p0: None,
    })
}

/// Binary regime with a constant probability `p` for every sample: the Newton
/// weights are `p(1-p) I`, so `O = p(1-p) T` and `Φ = p(1-p) I`.
pub fn constant_p_instance(spec: &SynthSpec, p: f64) -> Result<SyntheticKronecker> {
    if spec.classes != 1 {
        return Err(invalid("the constant-probability regime is binary (C = 1)"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::BoundaryProbability { sample: 0, value: p });
    }
    let mut inst = synth_instance(spec)?;
    inst.p0 = Some(p);
    Ok(inst)
}

impl SyntheticKronecker {
    /// Exact factors with `S = U_S D_S U_Sᵀ` (normalization 1).
    pub fn factors(&self) -> Result<KfacFactors> {
        KfacFactors::from_parts(
            SideEigen {
                vectors: self.u_s.clone(),
                values: self.d_s.clone(),
            },
            SideEigen {
                vectors: self.u_t.clone(),
                values: self.d_t.clone(),
            },
            FactorVariant::Plain,
            1.0,
            self.spec.seed,
        )
    }

    /// Squared-loss whitened gradient `D_T^{-1/2} U_Tᵀ ∇ U_S D_S^{-1/2}`.
    pub fn whitened(&self) -> Result<WhitenedGradient> {
        Ok(WhitenedGradient {
            f: whiten_dense(&self.grad, &self.factors()?)?,
            loss: LossKind::Squared,
            phi: None,
            gauge: None,
        })
    }

    /// Curvature-weighted factors `O = p(1-p) T` of the constant-p regime.
    pub fn weighted_factors(&self) -> Result<KfacFactors> {
        let p = self.p0.ok_or_else(|| invalid("instance has no probability"))?;
        let mut f = self.factors()?;
        f.d_t.iter_mut().for_each(|v| *v *= p * (1.0 - p));
        f.variant = FactorVariant::CurvatureWeighted;
        Ok(f)
    }

    /// `U [(I - Π_a) ⊗ (I - Π_b)] Uᵀ` with `a = D_S^{1/2}U_SᵀA₀ᵀ`,
    /// `b = D_T^{1/2}U_TᵀB₀`.
    pub fn kron_projector_difference(&self, init: &LoraInit) -> Result<DenseMatrix> {
        let (ca, cb) = self.complements(init)?;
        let mid = kron(&ca, &cb);
        Ok(self.u.mul(&mid).mul_tr(&self.u))
    }

    fn complements(&self, init: &LoraInit) -> Result<(DenseMatrix, DenseMatrix)> {
        let sq = |v: &[f64]| v.iter().map(|x| x.sqrt()).collect::<Vec<_>>();
        let a = self.u_s.tr_mul(&init.a.transpose()).scale_rows(&sq(&self.d_s));
        let b = self.u_t.tr_mul(&init.b).scale_rows(&sq(&self.d_t));
        let comp = |m: &DenseMatrix| -> Result<DenseMatrix> {
            let basis = range_basis(m)?;
            Ok(DenseMatrix::identity(m.rows()).sub(&basis.mul_tr(&basis)))
        };
        Ok((comp(&a)?, comp(&b)?))
    }

    /// Alignment error through the Kronecker sandwich applied to `Z`.
    pub fn kron_alignment_error(&self, init: &LoraInit) -> Result<f64> {
        let (ca, cb) = self.complements(init)?;
        let y = unvec(&self.u.tr_mul_vec(&self.z), self.spec.r_t, self.spec.r_s)?;
        Ok(cb.mul(&y).mul(&ca).frobenius_norm())
    }
}

/// Gaussian adapter pair, deterministic in `seed`.
pub fn random_adapters(d_in: usize, d_out: usize, rank: usize, seed: u64) -> LoraInit {
    let mut rng = stream(seed, &[0xada]);
    LoraInit {
        layer: 0,
        a: gaussian_matrix(rank, d_in, &mut rng),
        b: gaussian_matrix(d_out, rank, &mut rng),
        rank,
        gamma: 1.0,
        eta: 1.0,
        shift: ShiftMode::NoShift,
    }
}

/// `H = (I_{d_in} ⊗ B₀, A₀ᵀ ⊗ I_{d_out})`, mapping `(vec ΔA, vec ΔB)` to
/// `vec(B₀ΔA + ΔB A₀)`.
pub fn lora_jacobian_factor(init: &LoraInit) -> DenseMatrix {
    let left = kron(&DenseMatrix::identity(init.d_in()), &init.b);
    let right = kron(&init.a.transpose(), &DenseMatrix::identity(init.d_out()));
    left.hcat(&right)
}

/// Minimum-norm linearized predictor and its parameter step.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkPrediction {
    pub prediction: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Reusable thin SVD of a Jacobian `J = U_J D_J V_Jᵀ`.
#[derive(Clone, Debug)]
pub struct NtkOracle {
    jacobian: DenseMatrix,
    u: DenseMatrix,
    d: Vec<f64>,
    v: DenseMatrix,
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

impl NtkOracle {
    pub fn new(jacobian: &DenseMatrix) -> Result<Self> {
        NtkOracle::with_cap(jacobian, DEFAULT_JACOBIAN_CAP)
    }

    pub fn with_cap(jacobian: &DenseMatrix, cap: usize) -> Result<Self> {
        let entries = jacobian.rows() * jacobian.cols();
        if entries > cap {
            return Err(Error::SizeCap { entries, cap });
        }
        let svd = thin_svd(jacobian, DEFAULT_CUTOFF)?;
        Ok(NtkOracle {
            jacobian: jacobian.clone(),
            u: svd.u,
            d: svd.d,
            v: svd.v,
        })
    }

    pub fn jacobian(&self) -> &DenseMatrix {
        &self.jacobian
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.d
    }

    /// `Π_J z`.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        self.u.mul_vec(&self.u.tr_mul_vec(z))
    }

    /// Orthonormal basis of `col(JH)` as `U_J · basis(D_J V_Jᵀ H)`.
    pub fn lora_basis(&self, init: &LoraInit) -> Result<DenseMatrix> {
        let h = lora_jacobian_factor(init);
        if h.rows() != self.jacobian.cols() {
            return Err(dim_err(format!(
                "adapters act on {} weights, Jacobian has {} columns",
                h.rows(),
                self.jacobian.cols()
            )));
        }
        let p = self.v.tr_mul(&h).scale_rows(&self.d);
        Ok(self.u.mul(&range_basis(&p)?))
    }

    /// `Π_{JH} z`.
    pub fn project_lora(&self, init: &LoraInit, z: &[f64]) -> Result<Vec<f64>> {
        let basis = self.lora_basis(init)?;
        Ok(basis.mul_vec(&basis.tr_mul_vec(z)))
    }

    /// `f₀ + Π_J Z` with `θ = J† Z`.
    pub fn fft_predict(&self, f0: &[f64], z: &[f64]) -> Result<NtkPrediction> {
        self.check_len(f0)?;
        self.check_len(z)?;
        let coef: Vec<f64> = self.u.tr_mul_vec(z).iter().zip(&self.d).map(|(c, s)| c / s).collect();
        Ok(NtkPrediction {
            prediction: add(f0, &self.project(z)),
            theta: self.v.mul_vec(&coef),
        })
    }

    /// `f₀ + Π_{JH} Z`; `η` only rescales the parameter step
    /// `θ = (1/η)(JH)† Z`, never the prediction.
    pub fn lora_predict(&self, init: &LoraInit, f0: &[f64], z: &[f64], eta: f64) -> Result<NtkPrediction> {
        self.check_len(f0)?;
        self.check_len(z)?;
        let jh = self.jacobian.mul(&lora_jacobian_factor(init));
        let theta = if jh.max_abs() == 0.0 {
            vec![0.0; jh.cols()]
        } else {
            pinv(&jh, DEFAULT_CUTOFF)?.mul_vec(z).iter().map(|x| x / eta).collect()
        };
        Ok(NtkPrediction {
            prediction: add(f0, &self.project_lora(init, z)?),
            theta,
        })
    }

    /// `‖(Π_J - Π_{JH}) Z‖₂`.
    pub fn alignment_error(&self, init: &LoraInit, z: &[f64]) -> Result<f64> {
        self.check_len(z)?;
        Ok(norm2(&sub(&self.project(z), &self.project_lora(init, z)?)))
    }

    /// `Π_J - Π_{JH}` as a dense matrix.
    pub fn projector_difference(&self, init: &LoraInit) -> Result<DenseMatrix> {
        let b = self.lora_basis(init)?;
        Ok(self.u.mul_tr(&self.u).sub(&b.mul_tr(&b)))
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.jacobian.rows() {
            return Err(dim_err(format!(
                "vector has {} entries, Jacobian has {} rows",
                v.len(),
                self.jacobian.rows()
            )));
        }
        Ok(())
    }
}

pub fn ntk_fft_predict(jacobian: &DenseMatrix, f0: &[f64], z: &[f64]) -> Result<NtkPrediction> {
    NtkOracle::new(jacobian)?.fft_predict(f0, z)
}

pub fn ntk_lora_predict(jacobian: &DenseMatrix, init: &LoraInit, f0: &[f64], z: &[f64], eta: f64) -> Result<NtkPrediction> {
    NtkOracle::new(jacobian)?.lora_predict(init, f0, z, eta)
}

pub fn alignment_error(jacobian: &DenseMatrix, init: &LoraInit, z: &[f64]) -> Result<f64> {
    NtkOracle::new(jacobian)?.alignment_error(init, z)
}

/// Alignment error from the explicit `J H` product (independent of the
/// factorized route).
pub fn alignment_error_dense(jacobian: &DenseMatrix, init: &LoraInit, z: &[f64]) -> Result<f64> {
    let pj = crate::linalg::projection(jacobian)?;
    let pjh = crate::linalg::projection(&jacobian.mul(&lora_jacobian_factor(init)))?;
    Ok(norm2(&pj.sub(&pjh).mul_vec(z)))
}

/// `‖Φ^{-1/2}(I - Π_{Φ^{1/2}b}) F (I - Π_a)‖_F` with `a = D_S^{1/2}U_SᵀA₀ᵀ` and
/// `b = D_T^{1/2}U_TᵀB₀`; without `Φ` this is the squared-loss alignment error.
pub fn whitened_alignment_error(
    f: &DenseMatrix,
    factors: &KfacFactors,
    init: &LoraInit,
    phi: Option<&crate::whitening::Phi>,
) -> Result<f64> {
    let sq = |v: &[f64]| v.iter().map(|x| x.sqrt()).collect::<Vec<_>>();
    let a = factors.u_s.tr_mul(&init.a.transpose()).scale_rows(&sq(&factors.d_s));
    let mut b = factors.u_t.tr_mul(&init.b).scale_rows(&sq(&factors.d_t));
    if let Some(phi) = phi {
        let root = crate::linalg::sqrt_spd(&phi.matrix)?;
        b = root.mul(&b);
    }
    let comp = |m: &DenseMatrix| -> Result<DenseMatrix> {
        let basis = range_basis(m)?;
        Ok(DenseMatrix::identity(m.rows()).sub(&basis.mul_tr(&basis)))
    };
    let mut out = comp(&b)?.mul(f).mul(&comp(&a)?);
    if let Some(phi) = phi {
        out = phi.inv_sqrt.mul(&out);
    }
    Ok(out.frobenius_norm())
}

/// `C^{-1/2} Π_{C^{1/2} J} C^{-1/2} g` for a block-diagonal SPD weight with
/// `k x k` blocks; equals `J (Jᵀ C J)† Jᵀ g`.
fn weighted_newton_step(jac: &DenseMatrix, blocks: &[DenseMatrix], g: &[f64]) -> Result<Vec<f64>> {
    let k = blocks.first().map_or(1, |b| b.rows());
    if blocks.len() * k != jac.rows() || g.len() != jac.rows() {
        return Err(dim_err("Newton weights do not match the Jacobian rows"));
    }
    let mut roots = Vec::with_capacity(blocks.len());
    for b in blocks {
        let e = sym_eigen(b)?;
        if e.values.iter().any(|&v| v <= 0.0) {
            return Err(invalid("Newton weight block is not positive definite"));
        }
        let s: Vec<f64> = e.values.iter().map(|v| v.sqrt()).collect();
        let is: Vec<f64> = e.values.iter().map(|v| 1.0 / v.sqrt()).collect();
        roots.push((
            e.vectors.scale_cols(&s).mul_tr(&e.vectors),
            e.vectors.scale_cols(&is).mul_tr(&e.vectors),
        ));
    }
    let apply = |m: &DenseMatrix, inverse: bool| -> DenseMatrix {
        let mut out = m.clone();
        for (i, (root, inv)) in roots.iter().enumerate() {
            let r = if inverse { inv } else { root };
            let blockrows = m.row_block(i * k..(i + 1) * k);
            let prod = r.mul(&blockrows);
            for a in 0..k {
                out.row_mut(i * k + a).copy_from_slice(prod.row(a));
            }
        }
        out
    };
    let wj = apply(jac, false);
    let gm = apply(&DenseMatrix::column_vector(g), true);
    let basis = range_basis(&wj)?;
    let projected = basis.mul(&basis.tr_mul(&gm));
    Ok(apply(&projected, true).column(0))
}

/// Binary Newton first step `f₀ + J (Jᵀ C₀ J)† Jᵀ (y - p₀)`,
/// `C₀ = diag(p₀(1-p₀))`.
pub fn newton_step_binary(jac: &DenseMatrix, f0: &[f64], p0: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_probabilities(p0)?;
    if f0.len() != p0.len() || y.len() != p0.len() {
        return Err(dim_err("f₀, p₀ and y must have one entry per row"));
    }
    let blocks: Vec<DenseMatrix> = p0.iter().map(|p| DenseMatrix::from_diag(&[p * (1.0 - p)])).collect();
    let step = weighted_newton_step(jac, &blocks, &sub(y, p0))?;
    Ok(add(f0, &step))
}

/// Literal pseudo-inverse form of the binary Newton step, for cross-checks.
pub fn newton_step_binary_literal(jac: &DenseMatrix, f0: &[f64], p0: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_probabilities(p0)?;
    let c: Vec<f64> = p0.iter().map(|p| p * (1.0 - p)).collect();
    let gram = jac.tr_mul(&jac.scale_rows(&c));
    let inner = pinv(&gram.symmetrize(), DEFAULT_CUTOFF)?;
    let step = jac.mul_vec(&inner.mul_vec(&jac.tr_mul_vec(&sub(y, p0))));
    Ok(add(f0, &step))
}

fn check_probabilities(p: &[f64]) -> Result<()> {
    match p.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
        Some(i) => Err(Error::BoundaryProbability { sample: i, value: p[i] }),
        None => Ok(()),
    }
}

/// Multiclass Newton first step in the gauge-reduced coordinates, mapped back
/// through `(I ⊗ Ψ)`. `p0` and `y` are `n x C`; rows of `jac` are `i * C + c`.
pub fn newton_step_multiclass(
    jac: &DenseMatrix,
    f0: &DenseMatrix,
    p0: &DenseMatrix,
    y: &DenseMatrix,
    gauge: &GaugeMatrix,
) -> Result<DenseMatrix> {
    let (n, c) = p0.shape();
    if gauge.classes() != c || f0.shape() != (n, c) || y.shape() != (n, c) || jac.rows() != n * c {
        return Err(dim_err("multiclass Newton inputs disagree on (n, C)"));
    }
    crate::model::check_interior(p0)?;
    let psi = gauge.matrix();
    let k = c - 1;
    let mut reduced = DenseMatrix::zeros(n * k, jac.cols());
    let mut blocks = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n * k);
    for i in 0..n {
        let ji = jac.row_block(i * c..(i + 1) * c);
        let jr = psi.tr_mul(&ji);
        for a in 0..k {
            reduced.row_mut(i * k + a).copy_from_slice(jr.row(a));
        }
        let lam = crate::model::lambda_block(p0.row(i));
        blocks.push(psi.tr_mul(&lam).mul(psi).symmetrize());
        let gi: Vec<f64> = sub(y.row(i), p0.row(i));
        g.extend(psi.tr_mul_vec(&gi));
    }
    let step = weighted_newton_step(&reduced, &blocks, &g)?;
    let mut out = f0.clone();
    for i in 0..n {
        let back = psi.mul_vec(&step[i * k..(i + 1) * k]);
        for (o, b) in out.row_mut(i).iter_mut().zip(back) {
            *o += b;
        }
    }
    Ok(out)
}

/// Two-sided bound `s_i(∇)/s_1(J) <= s_i(F) <= s_i(∇)/s_min⁺(J)` for
/// `i < min(r_S, r_T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub lower: Vec<f64>,
    pub values: Vec<f64>,
    pub upper: Vec<f64>,
    /// Largest relative violation (non-positive when the bounds hold).
    pub worst_violation: f64,
}

impl SpectrumReport {
    pub fn holds(&self, rel_tol: f64) -> bool {
        self.worst_violation <= rel_tol
    }
}

pub fn spectrum_bounds(jac: &DenseMatrix, grad: &DenseMatrix, f: &DenseMatrix, count: usize) -> Result<SpectrumReport> {
    let sj = svd_values(jac)?;
    let (s1, smin) = match (sj.first(), sj.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::RankZero),
    };
    let pad = |mut v: Vec<f64>| {
        v.resize(count, 0.0);
        v
    };
    let sg = pad(svd_values(grad)?);
    let sf = pad(svd_values(f)?);
    let lower: Vec<f64> = sg.iter().map(|s| s / s1).collect();
    let upper: Vec<f64> = sg.iter().map(|s| s / smin).collect();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..count {
        let scale = sf[i].max(lower[i]).max(f64::MIN_POSITIVE);
        worst = worst.max((lower[i] - sf[i]) / scale).max((sf[i] - upper[i]) / scale);
    }
    Ok(SpectrumReport {
        lower,
        values: sf,
        upper,
        worst_violation: worst,
    })
}

/// Single linear softmax layer with identical weight rows, so every sample
/// has uniform probabilities: `δ_i = I_C`, `T̃ = n(I - 11ᵀ/C)`, `Θ = (n/C)(I - 11ᵀ/C)`
/// and the curvature model is exact.
pub fn uniform_softmax_regime(n: usize, d_in: usize, classes: usize, seed: u64) -> Result<(Network, Batch)> {
    if classes < 2 {
        return Err(invalid("the uniform softmax regime needs C >= 2"));
    }
    let mut rng = stream(seed, &[0xce]);
    let row = gaussian_vec(d_in, &mut rng);
    let w0 = DenseMatrix::from_fn(classes, d_in, |_, j| row[j]);
    let net = Network::new(&[LayerSpec::new(d_in, classes, Activation::Identity).with_weights(w0)], seed)?;
    let x = gaussian_matrix(n, d_in, &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
    Ok((net, Batch::new(x, 1, Targets::Classes(labels))?))
}

/// Stacks an `n x C` matrix into the `nC` row order `i * C + c`.
pub fn stack_rows(m: &DenseMatrix) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// `vec(B₀A₀)` as a parameter displacement in column-stacked order.
pub fn adapter_displacement(init: &LoraInit) -> Vec<f64> {
    vec(&init.product())
}
