//! Closed-form adapter initialization from the whitened gradient.

use std::fmt;
use std::str::FromStr;

use crate::curvature::KfacFactors;
use crate::error::{dim_err, invalid, Error, Result};
use crate::linalg::{
    cholesky_lower, cholesky_solve, solve_lower_transpose, thin_svd, DenseMatrix, ThinSvd, DEFAULT_CUTOFF,
};
use crate::random::{gaussian_matrix, stream, uniform_matrix};
use crate::whitening::WhitenedGradient;

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_GAMMA: f64 = 16.0;

/// `shift` keeps the effective starting weight at `W₀` by moving the base to
/// `W₀ - η B₀A₀`; `no-shift` keeps the base, so training starts at
/// `W₀ + η B₀A₀`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftMode {
    Shift,
    NoShift,
}

impl ShiftMode {
    pub fn name(self) -> &'static str {
        match self {
            ShiftMode::Shift => "shift",
            ShiftMode::NoShift => "no-shift",
        }
    }
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shift" => Ok(ShiftMode::Shift),
            "no-shift" => Ok(ShiftMode::NoShift),
            other => Err(invalid(format!("unknown shift mode `{other}` (expected shift or no-shift)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitParams {
    pub rank: usize,
    pub gamma: f64,
    pub eta: f64,
    pub shift: ShiftMode,
}

impl InitParams {
    /// `η = 1/√r`.
    pub fn new(rank: usize, gamma: f64, shift: ShiftMode) -> Result<Self> {
        InitParams::with_eta(rank, gamma, 1.0 / (rank.max(1) as f64).sqrt(), shift)
    }

    pub fn with_eta(rank: usize, gamma: f64, eta: f64, shift: ShiftMode) -> Result<Self> {
        if rank == 0 {
            return Err(invalid("rank r must be >= 1"));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid(format!("γ = {gamma} must be positive")));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(invalid(format!("η = {eta} must be positive")));
        }
        Ok(InitParams {
            rank,
            gamma,
            eta,
            shift,
        })
    }
}

impl Default for InitParams {
    fn default() -> Self {
        InitParams::new(DEFAULT_RANK, DEFAULT_GAMMA, ShiftMode::NoShift).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraInit {
    pub layer: usize,
    /// `r x d_in`.
    pub a: DenseMatrix,
    /// `d_out x r`.
    pub b: DenseMatrix,
    pub rank: usize,
    pub gamma: f64,
    pub eta: f64,
    pub shift: ShiftMode,
}

impl LoraInit {
    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// `B₀ A₀`.
    pub fn product(&self) -> DenseMatrix {
        self.b.mul(&self.a)
    }

    /// The norm both adapters carry: `d_out^{1/4} / γ`.
    pub fn target_norm(&self) -> f64 {
        (self.d_out() as f64).powf(0.25) / self.gamma
    }
}

/// Leading modes of the whitened gradient mapped back to weight space.
#[derive(Clone, Debug, PartialEq)]
pub struct Modes {
    pub u_f: DenseMatrix,
    pub d_f: Vec<f64>,
    pub v_f: DenseMatrix,
    /// `D_T^{-1/2} [Φ^{-1/2}] U_{F,r}` (`r_t x k`).
    pub inner_l: DenseMatrix,
    /// `D_S^{-1/2} V_{F,r}` (`r_s x k`).
    pub inner_r: DenseMatrix,
    /// `L_r = U_T inner_l` (`d_out x k`).
    pub l: DenseMatrix,
    /// `R_r = U_S inner_r` (`d_in x k`).
    pub r: DenseMatrix,
    /// Requested rank; `k = d_f.len()` is smaller when `F` has lower rank.
    pub rank: usize,
}

fn inv_sqrt(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| 1.0 / v.sqrt()).collect()
}

/// Top-`r` modes `L_r`, `R_r`. Requires `r <= min(r_S, r_T)`; larger ranks go
/// through [`rank_overflow_init`].
pub fn modes(wg: &WhitenedGradient, factors: &KfacFactors, r: usize) -> Result<Modes> {
    if r == 0 {
        return Err(invalid("rank r must be >= 1"));
    }
    if r > factors.r_s() || r > factors.r_t() {
        return Err(invalid(format!(
            "r = {r} exceeds min(r_S, r_T) = {}; use the rank-overflow initializer",
            factors.r_s().min(factors.r_t())
        )));
    }
    if wg.f.shape() != (factors.r_t(), factors.r_s()) {
        return Err(dim_err(format!(
            "F is {:?}, factors have (r_t, r_s) = {:?}",
            wg.f.shape(),
            (factors.r_t(), factors.r_s())
        )));
    }
    let svd = thin_svd(&wg.f, DEFAULT_CUTOFF)?.truncate(r);
    if svd.rank() == 0 {
        return Err(Error::ZeroGradient);
    }
    let mut left = svd.u.clone();
    if let Some(phi) = &wg.phi {
        left = phi.inv_sqrt.mul(&left);
    }
    let inner_l = left.scale_rows(&inv_sqrt(&factors.d_t));
    let inner_r = svd.v.scale_rows(&inv_sqrt(&factors.d_s));
    Ok(Modes {
        l: factors.u_t.mul(&inner_l),
        r: factors.u_s.mul(&inner_r),
        inner_l,
        inner_r,
        u_f: svd.u,
        d_f: svd.d,
        v_f: svd.v,
        rank: r,
    })
}

/// Cholesky factors of the inner Grams `J_L = L_rᵀL_r` and `J_R = R_rᵀR_r`.
fn inner_cholesky(modes: &Modes) -> Result<(DenseMatrix, DenseMatrix)> {
    let jl = modes.inner_l.tr_mul(&modes.inner_l).symmetrize();
    let jr = modes.inner_r.tr_mul(&modes.inner_r).symmetrize();
    Ok((cholesky_lower(&jl)?, cholesky_lower(&jr)?))
}

/// `Q* = -J_L^{-1} D_{F,r} J_R^{-1}`, so that `L_r Q* R_rᵀ = -Π_L ∇ Π_R`.
pub fn q_star(modes: &Modes) -> Result<DenseMatrix> {
    let (ll, lr) = inner_cholesky(modes)?;
    let x = cholesky_solve(&ll, &DenseMatrix::from_diag(&modes.d_f));
    Ok(cholesky_solve(&lr, &x.transpose()).transpose().scale(-1.0))
}

/// SVD of `M = L_r Q* R_rᵀ` through `K = chol(J_L)ᵀ Q* chol(J_R)`, without
/// forming `M`.
pub fn m_svd_implicit(modes: &Modes, q: &DenseMatrix) -> Result<ThinSvd> {
    let k = modes.d_f.len();
    if q.shape() != (k, k) {
        return Err(dim_err(format!("Q* is {:?}, expected {k}x{k}", q.shape())));
    }
    let (ll, lr) = inner_cholesky(modes)?;
    let kmat = ll.tr_mul(q).mul(&lr);
    let svd = thin_svd(&kmat, DEFAULT_CUTOFF)?;
    Ok(ThinSvd {
        u: modes.l.mul(&solve_lower_transpose(&ll, &svd.u)),
        v: modes.r.mul(&solve_lower_transpose(&lr, &svd.v)),
        d: svd.d,
    })
}

/// Balanced, globally scaled realization of `M`:
/// `A₀ᵀ = s V_M D^{1/2}`, `B₀ = s U_M D^{1/2}` with `s = d_out^{1/4}/(γ √‖M‖₂)`.
/// Missing ranks are zero-padded.
pub fn cg_lora_init(msvd: &ThinSvd, params: &InitParams, layer: usize) -> Result<LoraInit> {
    let norm = msvd.spectral_norm();
    if msvd.rank() == 0 || norm <= 0.0 {
        return Err(Error::ZeroGradient);
    }
    let msvd = msvd.truncate(params.rank);
    let d_out = msvd.u.rows();
    let scale = (d_out as f64).powf(0.25) / (params.gamma * norm.sqrt());
    let root: Vec<f64> = msvd.d.iter().map(|s| scale * s.sqrt()).collect();
    let b = msvd.u.scale_cols(&root).resize_cols(params.rank);
    let a = msvd.v.scale_cols(&root).resize_cols(params.rank).transpose();
    Ok(LoraInit {
        layer,
        a,
        b,
        rank: params.rank,
        gamma: params.gamma,
        eta: params.eta,
        shift: params.shift,
    })
}

/// Base weight handed to training: `W₀ - η B₀A₀` under `shift`, `W₀` under
/// `no-shift`.
pub fn apply_shift(w0: &DenseMatrix, init: &LoraInit) -> Result<DenseMatrix> {
    if w0.shape() != (init.d_out(), init.d_in()) {
        return Err(dim_err(format!(
            "W₀ is {:?}, adapters are {:?}",
            w0.shape(),
            (init.d_out(), init.d_in())
        )));
    }
    Ok(match init.shift {
        ShiftMode::Shift => w0.sub(&init.product().scale(init.eta)),
        ShiftMode::NoShift => w0.clone(),
    })
}

/// Weight the adapted layer computes with at step 0: base `+ η B₀A₀`.
pub fn effective_start(w0: &DenseMatrix, init: &LoraInit) -> Result<DenseMatrix> {
    Ok(apply_shift(w0, init)?.add(&init.product().scale(init.eta)))
}

fn orthonormal_columns(m: &DenseMatrix) -> Result<DenseMatrix> {
    if m.cols() == 0 {
        return Ok(m.clone());
    }
    let svd = thin_svd(m, DEFAULT_CUTOFF)?;
    Ok(svd.u)
}

/// Initializer for `r > r_S` or `r > r_T`: a saturated side spans its whole
/// curvature range, the other side spans the top modes; both are scaled
/// orthonormal bases, zero-padded to `r`.
pub fn rank_overflow_init(
    wg: &WhitenedGradient,
    factors: &KfacFactors,
    params: &InitParams,
    layer: usize,
) -> Result<LoraInit> {
    let r = params.rank;
    let (rs, rt) = (factors.r_s(), factors.r_t());
    if r <= rs && r <= rt {
        return Err(invalid(format!("r = {r} does not exceed r_S = {rs} or r_T = {rt}")));
    }
    if wg.f.shape() != (rt, rs) {
        return Err(dim_err("F does not match the factor ranks"));
    }
    let svd = thin_svd(&wg.f, DEFAULT_CUTOFF)?.truncate(r);
    let b_side = if r > rt {
        factors.u_t.clone()
    } else {
        let mut left = svd.u.clone();
        if let Some(phi) = &wg.phi {
            left = phi.inv_sqrt.mul(&left);
        }
        orthonormal_columns(&factors.u_t.mul(&left.scale_rows(&inv_sqrt(&factors.d_t))))?
    };
    let a_side = if r > rs {
        factors.u_s.clone()
    } else {
        orthonormal_columns(&factors.u_s.mul(&svd.v.scale_rows(&inv_sqrt(&factors.d_s))))?
    };
    let scale = (factors.d_out() as f64).powf(0.25) / params.gamma;
    Ok(LoraInit {
        layer,
        a: a_side.scale(scale).resize_cols(r).transpose(),
        b: b_side.scale(scale).resize_cols(r),
        rank: r,
        gamma: params.gamma,
        eta: params.eta,
        shift: params.shift,
    })
}

/// Result of the full initializer, with intermediates for reporting.
#[derive(Clone, Debug)]
pub struct InitOutcome {
    pub init: LoraInit,
    pub modes: Option<Modes>,
    pub m_svd: Option<ThinSvd>,
    pub overflow: bool,
}

/// Dispatches to the low-rank closed form or the rank-overflow initializer.
pub fn cg_lora(wg: &WhitenedGradient, factors: &KfacFactors, params: &InitParams, layer: usize) -> Result<InitOutcome> {
    if params.rank > factors.r_s() || params.rank > factors.r_t() {
        return Ok(InitOutcome {
            init: rank_overflow_init(wg, factors, params, layer)?,
            modes: None,
            m_svd: None,
            overflow: true,
        });
    }
    let modes = modes(wg, factors, params.rank)?;
    let q = q_star(&modes)?;
    let msvd = m_svd_implicit(&modes, &q)?;
    Ok(InitOutcome {
        init: cg_lora_init(&msvd, params, layer)?,
        modes: Some(modes),
        m_svd: Some(msvd),
        overflow: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    /// Kaiming-uniform `A₀`, `B₀ = 0`.
    Zero,
    /// Gaussian adapters rescaled to the norm `d_out^{1/4}/γ`.
    Random,
    /// Balanced realization of the top-`r` SVD of `-∇`, an approximation of
    /// gradient-aligned schemes.
    GradientSvd,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Zero => "zero",
            BaselineKind::Random => "random",
            BaselineKind::GradientSvd => "gradient-svd",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(BaselineKind::Zero),
            "random" => Ok(BaselineKind::Random),
            "gradient-svd" => Ok(BaselineKind::GradientSvd),
            other => Err(invalid(format!("unknown baseline `{other}`"))),
        }
    }
}

fn spectral_normalize(m: &DenseMatrix, target: f64) -> Result<DenseMatrix> {
    let s = thin_svd(m, DEFAULT_CUTOFF)?.spectral_norm();
    Ok(if s > 0.0 { m.scale(target / s) } else { m.clone() })
}

/// Comparison initializers, deterministic in `seed`.
pub fn baseline_init(kind: BaselineKind, grad: &DenseMatrix, params: &InitParams, seed: u64, layer: usize) -> Result<LoraInit> {
    let (d_out, d_in) = grad.shape();
    let r = params.rank;
    let mut rng = stream(seed, &[layer as u64, kind as u64]);
    let (a, b) = match kind {
        BaselineKind::Zero => (
            uniform_matrix(r, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng),
            DenseMatrix::zeros(d_out, r),
        ),
        BaselineKind::Random => {
            let target = (d_out as f64).powf(0.25) / params.gamma;
            let a = gaussian_matrix(r, d_in, &mut rng);
            let b = gaussian_matrix(d_out, r, &mut rng);
            (spectral_normalize(&a, target)?, spectral_normalize(&b, target)?)
        }
        BaselineKind::GradientSvd => {
            let svd = thin_svd(grad, DEFAULT_CUTOFF)?.truncate(r);
            let neg = ThinSvd {
                u: svd.u.scale(-1.0),
                d: svd.d,
                v: svd.v,
            };
            let init = cg_lora_init(&neg, params, layer)?;
            (init.a, init.b)
        }
    };
    Ok(LoraInit {
        layer,
        a,
        b,
        rank: r,
        gamma: params.gamma,
        eta: params.eta,
        shift: params.shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(r: usize, gamma: f64) -> InitParams {
        InitParams::new(r, gamma, ShiftMode::NoShift).unwrap()
    }

    #[test]
    fn rank_one_closed_form() {
        let mut u = vec![0.0; 16];
        u[0] = 1.0;
        let mut v = vec![0.0; 5];
        v[2] = 1.0;
        let msvd = ThinSvd {
            u: DenseMatrix::from_columns(16, &[u.iter().map(|x| -x).collect()]),
            d: vec![1.0],
            v: DenseMatrix::from_columns(5, &[v]),
        };
        let init = cg_lora_init(&msvd, &p(1, 16.0), 0).unwrap();
        assert!((init.a[(0, 2)] - 0.125).abs() < 1e-15);
        assert!((init.b[(0, 0)] + 0.125).abs() < 1e-15);
        assert!((init.target_norm() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_an_error() {
        let msvd = ThinSvd {
            u: DenseMatrix::zeros(3, 0),
            d: vec![],
            v: DenseMatrix::zeros(2, 0),
        };
        assert!(matches!(cg_lora_init(&msvd, &p(2, 16.0), 0), Err(Error::ZeroGradient)));
    }

    #[test]
    fn shift_modes() {
        let w0 = DenseMatrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let init = LoraInit {
            layer: 0,
            a: DenseMatrix::from_fn(1, 3, |_, j| j as f64),
            b: DenseMatrix::from_fn(2, 1, |i, _| 1.0 + i as f64),
            rank: 1,
            gamma: 16.0,
            eta: 0.5,
            shift: ShiftMode::Shift,
        };
        assert!(effective_start(&w0, &init).unwrap().max_abs_diff(&w0) < 1e-15);
        let no = LoraInit {
            shift: ShiftMode::NoShift,
            ..init.clone()
        };
        assert_eq!(apply_shift(&w0, &no).unwrap(), w0);
        let zero = LoraInit {
            b: DenseMatrix::zeros(2, 1),
            ..init
        };
        assert_eq!(apply_shift(&w0, &zero).unwrap(), w0);
    }

    #[test]
    fn names_roundtrip() {
        for s in [ShiftMode::Shift, ShiftMode::NoShift] {
            assert_eq!(s.name().parse::<ShiftMode>().unwrap(), s);
        }
        for b in [BaselineKind::Zero, BaselineKind::Random, BaselineKind::GradientSvd] {
            assert_eq!(b.name().parse::<BaselineKind>().unwrap(), b);
        }
        assert!(InitParams::new(0, 16.0, ShiftMode::Shift).is_err());
        assert!((InitParams::default().eta - 1.0 / 8f64.sqrt()).abs() < 1e-15);
    }
}
