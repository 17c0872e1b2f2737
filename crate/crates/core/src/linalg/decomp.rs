//! Deterministic dense factorizations: one-sided Jacobi SVD, cyclic Jacobi
//! symmetric eigensolver, Householder thin QR and Cholesky.

use super::matrix::{dot, DenseMatrix};
use crate::error::{invalid, Error, Result};

/// Default relative rank cutoff: singular values `<= cutoff * s_1` are dropped.
pub const DEFAULT_CUTOFF: f64 = 1e-10;

/// Relative eigenvalue floor used by the SPD matrix functions.
pub const SPD_FLOOR: f64 = 1e-12;

const JACOBI_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 100;

/// Thin singular value decomposition `M = U diag(D) Vᵀ`.
#[derive(Clone, Debug)]
pub struct ThinSvd {
    /// `d1 x k`, orthonormal columns.
    pub u: DenseMatrix,
    /// Positive singular values, non-increasing.
    pub d: Vec<f64>,
    /// `d2 x k`, orthonormal columns.
    pub v: DenseMatrix,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.d.len()
    }

    /// `U diag(D) Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.u.scale_cols(&self.d).mul_tr(&self.v)
    }

    /// Keeps the leading `k` triplets (or all of them when `k >= rank`).
    pub fn truncate(&self, k: usize) -> ThinSvd {
        let k = k.min(self.rank());
        ThinSvd {
            u: self.u.columns(0..k),
            d: self.d[..k].to_vec(),
            v: self.v.columns(0..k),
        }
    }

    /// Spectral norm (0 for the empty decomposition).
    pub fn spectral_norm(&self) -> f64 {
        self.d.first().copied().unwrap_or(0.0)
    }
}

fn validate(m: &DenseMatrix) -> Result<()> {
    if m.is_empty() {
        return Err(Error::Empty);
    }
    m.check_finite()
}

/// Thin SVD keeping singular values strictly above `cutoff * s_1`.
///
/// The zero matrix yields a rank-0 decomposition. Signs are normalized so that
/// the largest-magnitude entry of every left singular vector is positive.
pub fn thin_svd(m: &DenseMatrix, cutoff: f64) -> Result<ThinSvd> {
    validate(m)?;
    if !(0.0..1.0).contains(&cutoff) {
        return Err(invalid(format!("cutoff {cutoff} outside [0, 1)")));
    }
    if m.rows() >= m.cols() {
        Ok(jacobi_svd_tall(m, cutoff))
    } else {
        let t = jacobi_svd_tall(&m.transpose(), cutoff);
        let mut svd = ThinSvd {
            u: t.v,
            d: t.d,
            v: t.u,
        };
        normalize_signs(&mut svd);
        Ok(svd)
    }
}

/// Every singular triplet, including numerically zero ones (no cutoff applied
/// except exact zeros).
pub fn svd_values(m: &DenseMatrix) -> Result<Vec<f64>> {
    Ok(thin_svd(m, 0.0)?.d)
}

/// Column-pivoted Householder QR, `M P = Q R`, returning `Q` as contiguous
/// columns, `R` as contiguous rows and the permutation (`MP[:, j] = M[:, perm[j]]`).
fn pivoted_qr(m: &DenseMatrix) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
    let (rows, n) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for j in 0..n {
        let tail_norm = |c: &Vec<f64>| c[j..].iter().map(|t| t * t).sum::<f64>();
        let best = (j..n).fold(j, |b, c| if tail_norm(&a[c]) > tail_norm(&a[b]) { c } else { b });
        a.swap(j, best);
        perm.swap(j, best);
        let x = &a[j][j..];
        let tail: f64 = x[1..].iter().map(|t| t * t).sum();
        if tail == 0.0 {
            reflectors.push(None);
            continue;
        }
        let norm = (x[0] * x[0] + tail).sqrt();
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|t| *t /= vn);
        for col in a[j..].iter_mut() {
            reflect(&mut col[j..], &v);
        }
        reflectors.push(Some(v));
    }
    let mut q: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; rows];
            e[j] = 1.0;
            e
        })
        .collect();
    for j in (0..n).rev() {
        if let Some(v) = &reflectors[j] {
            for col in q.iter_mut() {
                reflect(&mut col[j..], v);
            }
        }
    }
    let r = (0..n).map(|i| (0..n).map(|j| if j >= i { a[j][i] } else { 0.0 }).collect()).collect();
    (q, r, perm)
}

/// One-sided Jacobi on `Rᵀ` from a pivoted QR of `M` (`rows >= cols`). With
/// `Rᵀ Z = W Σ` the decomposition is `M = (Q Z) Σ (P W)ᵀ`.
fn jacobi_svd_tall(m: &DenseMatrix, cutoff: f64) -> ThinSvd {
    let (rows, n) = m.shape();
    let (q, mut x, perm) = pivoted_qr(m);
    let mut z: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for r in (p + 1)..n {
                let (alpha, beta, gamma) = x[p].iter().zip(&x[r]).fold((0.0, 0.0, 0.0), |(a, b, g), (&s, &t)| {
                    (a + s * s, b + t * t, g + s * t)
                });
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut x, p, r, c, s);
                rotate_pair(&mut z, p, r, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = x.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let s1 = norms[order[0]];
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&j| norms[j] > 0.0 && norms[j] > cutoff * s1)
        .collect();

    let k = keep.len();
    let mut u = DenseMatrix::zeros(rows, k);
    let mut vv = DenseMatrix::zeros(n, k);
    let mut d = Vec::with_capacity(k);
    for (c, &j) in keep.iter().enumerate() {
        let s = norms[j];
        d.push(s);
        for (qc, &w) in q.iter().zip(&z[j]) {
            if w != 0.0 {
                for i in 0..rows {
                    u[(i, c)] += qc[i] * w;
                }
            }
        }
        for i in 0..n {
            vv[(perm[i], c)] = x[j][i] / s;
        }
    }
    let mut svd = ThinSvd { u, d, v: vv };
    normalize_signs(&mut svd);
    svd
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (xp, xq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in xp.iter_mut().zip(xq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn normalize_signs(svd: &mut ThinSvd) {
    for c in 0..svd.rank() {
        let col = svd.u.column(c);
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            for i in 0..svd.u.rows() {
                svd.u[(i, c)] = -svd.u[(i, c)];
            }
            for i in 0..svd.v.rows() {
                svd.v[(i, c)] = -svd.v[(i, c)];
            }
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, matching `values`.
    pub vectors: DenseMatrix,
}

fn check_symmetric(m: &DenseMatrix, tol: f64) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {:?}",
            m.shape()
        )));
    }
    let asym = m.max_asymmetry();
    if asym > tol * m.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Cyclic Jacobi eigensolver for symmetric matrices (symmetric to 1e-10).
pub fn sym_eigen(m: &DenseMatrix) -> Result<SymEigen> {
    validate(m)?;
    check_symmetric(m, 1e-10)?;
    let n = m.rows();
    let mut a = m.symmetrize();
    let mut v = DenseMatrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            diag += a[(i, i)] * a[(i, i)];
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off == 0.0 || off <= 1e-32 * diag {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                if apq.abs() <= 1e-18 * (app.abs() + aqq.abs()) {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let diag = a.diagonal();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (c, &j) in order.iter().enumerate() {
        let mut col = v.column(j);
        let best = col
            .iter()
            .enumerate()
            .fold(0, |b, (i, x)| if x.abs() > col[b].abs() { i } else { b });
        if col[best] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        vectors.set_column(c, &col);
    }
    Ok(SymEigen { values, vectors })
}

/// Householder thin QR of a tall matrix.
#[derive(Clone, Debug)]
pub struct ThinQr {
    /// `rows x cols`, orthonormal columns.
    pub q: DenseMatrix,
    /// `cols x cols`, upper triangular with non-negative diagonal.
    pub r: DenseMatrix,
    /// Some diagonal entry of `R` is (numerically) zero.
    pub rank_deficient: bool,
}

pub fn thin_qr(m: &DenseMatrix) -> Result<ThinQr> {
    validate(m)?;
    let (rows, n) = m.shape();
    if rows < n {
        return Err(Error::Dimension(format!(
            "thin QR needs rows >= cols, got {rows}x{n}"
        )));
    }
    // Columns stored contiguously.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for j in 0..n {
        let x = &a[j][j..];
        let tail: f64 = x[1..].iter().map(|t| t * t).sum();
        if tail == 0.0 {
            reflectors.push(None);
            continue;
        }
        let norm = (x[0] * x[0] + tail).sqrt();
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|t| *t /= vn);
        for col in a[j..].iter_mut() {
            reflect(&mut col[j..], &v);
        }
        reflectors.push(Some(v));
    }

    let mut qc: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; rows];
            e[j] = 1.0;
            e
        })
        .collect();
    for j in (0..n).rev() {
        if let Some(v) = &reflectors[j] {
            for col in qc.iter_mut() {
                reflect(&mut col[j..], v);
            }
        }
    }
    let mut q = DenseMatrix::from_columns(rows, &qc);
    let mut r = DenseMatrix::from_fn(n, n, |i, j| if j >= i { a[j][i] } else { 0.0 });
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for c in 0..n {
                r[(j, c)] = -r[(j, c)];
            }
            for i in 0..rows {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let rmax = r.diagonal().iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let rank_deficient = r
        .diagonal()
        .iter()
        .any(|x| x.abs() <= 1e-12 * rmax || *x == 0.0);
    Ok(ThinQr {
        q,
        r,
        rank_deficient,
    })
}

fn reflect(x: &mut [f64], v: &[f64]) {
    let s = 2.0 * dot(v, x);
    for (t, &w) in x.iter_mut().zip(v) {
        *t -= s * w;
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = M`.
pub fn cholesky_lower(m: &DenseMatrix) -> Result<DenseMatrix> {
    validate(m)?;
    check_symmetric(m, 1e-10)?;
    let n = m.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    assert_eq!(n, b.rows());
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    assert_eq!(n, b.rows());
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `(L Lᵀ) X = B` given the Cholesky factor.
pub fn cholesky_solve(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    solve_lower_transpose(l, &solve_lower(l, b))
}

fn spd_power(m: &DenseMatrix, power: f64) -> Result<DenseMatrix> {
    let eig = sym_eigen(m)?;
    let lmax = eig.values[0];
    let lmin = *eig.values.last().unwrap();
    if lmax <= 0.0 || lmin <= SPD_FLOOR * lmax {
        return Err(Error::Degenerate {
            ratio: if lmax > 0.0 { lmin / lmax } else { 0.0 },
            floor: SPD_FLOOR,
        });
    }
    let scaled: Vec<f64> = eig.values.iter().map(|l| l.powf(power)).collect();
    Ok(eig
        .vectors
        .scale_cols(&scaled)
        .mul_tr(&eig.vectors)
        .symmetrize())
}

/// Symmetric inverse square root `R` with `R M R = I`.
pub fn inv_sqrt_spd(m: &DenseMatrix) -> Result<DenseMatrix> {
    spd_power(m, -0.5)
}

/// Symmetric square root of an SPD matrix.
pub fn sqrt_spd(m: &DenseMatrix) -> Result<DenseMatrix> {
    spd_power(m, 0.5)
}

/// Moore-Penrose pseudo-inverse through the thin SVD.
pub fn pinv(m: &DenseMatrix, cutoff: f64) -> Result<DenseMatrix> {
    let svd = thin_svd(m, cutoff)?;
    let inv: Vec<f64> = svd.d.iter().map(|s| 1.0 / s).collect();
    Ok(svd.v.scale_cols(&inv).mul_tr(&svd.u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_diagonal_case() {
        let m = DenseMatrix::from_diag(&[3.0, 0.0, 2.0]);
        let svd = thin_svd(&m, DEFAULT_CUTOFF).unwrap();
        assert_eq!(svd.rank(), 2);
        assert!((svd.d[0] - 3.0).abs() < 1e-15 && (svd.d[1] - 2.0).abs() < 1e-15);
        assert!(svd.reconstruct().max_abs_diff(&m) < 1e-15);
    }

    #[test]
    fn svd_identity_case() {
        let i4 = DenseMatrix::identity(4);
        let svd = thin_svd(&i4, DEFAULT_CUTOFF).unwrap();
        assert_eq!(svd.d, vec![1.0; 4]);
        assert!(svd.u.mul_tr(&svd.v).max_abs_diff(&i4) < 1e-15);
    }

    #[test]
    fn svd_errors_and_zero() {
        assert!(matches!(
            thin_svd(&DenseMatrix::zeros(0, 3), 0.1),
            Err(Error::Empty)
        ));
        let mut m = DenseMatrix::zeros(2, 2);
        m.as_mut_slice()[3] = f64::INFINITY;
        assert!(matches!(thin_svd(&m, 0.1), Err(Error::NonFinite { .. })));
        assert!(thin_svd(&DenseMatrix::identity(2), 1.0).is_err());
        let z = thin_svd(&DenseMatrix::zeros(3, 2), DEFAULT_CUTOFF).unwrap();
        assert_eq!(z.rank(), 0);
        assert_eq!(z.u.shape(), (3, 0));
    }

    #[test]
    fn wide_matrix_svd() {
        let m = DenseMatrix::from_fn(2, 5, |i, j| ((i + 1) * (j + 2)) as f64 + (j as f64).cos());
        let svd = thin_svd(&m, DEFAULT_CUTOFF).unwrap();
        assert_eq!(svd.u.shape(), (2, 2));
        assert_eq!(svd.v.shape(), (5, 2));
        assert!(svd.reconstruct().max_abs_diff(&m) < 1e-13);
    }

    #[test]
    fn qr_examples() {
        let qr = thin_qr(&DenseMatrix::from_diag(&[2.0, 3.0])).unwrap();
        assert_eq!(qr.q, DenseMatrix::identity(2));
        assert_eq!(qr.r, DenseMatrix::from_diag(&[2.0, 3.0]));
        assert!(!qr.rank_deficient);

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let q0 = DenseMatrix::from_rows(&[vec![s, 0.0], vec![-s, 0.0], vec![0.0, -1.0]]).unwrap();
        let qr = thin_qr(&q0).unwrap();
        for j in 0..2 {
            let dot: f64 = (0..3).map(|i| qr.q[(i, j)] * q0[(i, j)]).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-15);
            assert!((qr.r[(j, j)].abs() - 1.0).abs() < 1e-15);
        }
        assert!(qr.r[(0, 1)].abs() < 1e-15);

        let deficient = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let qr = thin_qr(&deficient).unwrap();
        assert!(qr.rank_deficient);
        assert!(qr.q.mul(&qr.r).max_abs_diff(&deficient) < 1e-14);
        assert!(thin_qr(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn cholesky_examples() {
        assert_eq!(
            cholesky_lower(&DenseMatrix::identity(3)).unwrap(),
            DenseMatrix::identity(3)
        );
        assert_eq!(
            cholesky_lower(&DenseMatrix::from_diag(&[4.0, 9.0])).unwrap(),
            DenseMatrix::from_diag(&[2.0, 3.0])
        );
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let l = cholesky_lower(&m).unwrap();
        assert!(l.mul_tr(&l).max_abs_diff(&m) < 1e-14);
        assert!(l[(0, 1)] == 0.0 && l.diagonal().iter().all(|&d| d > 0.0));

        let bad = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky_lower(&bad),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
        let asym = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_lower(&asym), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn triangular_solves() {
        let m = DenseMatrix::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 2.0],
        ])
        .unwrap();
        let l = cholesky_lower(&m).unwrap();
        let b = DenseMatrix::from_fn(3, 2, |i, j| (i as f64) - (j as f64) * 0.3 + 1.0);
        let x = cholesky_solve(&l, &b);
        assert!(m.mul(&x).max_abs_diff(&b) < 1e-13);
    }

    #[test]
    fn inv_sqrt_examples() {
        assert!(inv_sqrt_spd(&DenseMatrix::identity(3))
            .unwrap()
            .max_abs_diff(&DenseMatrix::identity(3))
            < 1e-15);
        let r = inv_sqrt_spd(&DenseMatrix::from_diag(&[4.0, 16.0])).unwrap();
        assert!(r.max_abs_diff(&DenseMatrix::from_diag(&[0.5, 0.25])) < 1e-15);
        let degenerate = DenseMatrix::from_diag(&[1.0, 1e-14]);
        assert!(matches!(
            inv_sqrt_spd(&degenerate),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn sym_eigen_small() {
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = sym_eigen(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let rebuilt = e.vectors.scale_cols(&e.values).mul_tr(&e.vectors);
        assert!(rebuilt.max_abs_diff(&m) < 1e-14);
    }
}
