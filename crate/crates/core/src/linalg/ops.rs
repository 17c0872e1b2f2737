use super::decomp::{thin_svd, DEFAULT_CUTOFF};
use super::matrix::DenseMatrix;
use crate::error::{dim_err, Result};

/// Column-stacked vectorization: `vec(M)[j * rows + i] = M[i, j]`.
pub fn vec(m: &DenseMatrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for j in 0..cols {
        for i in 0..rows {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<DenseMatrix> {
    if v.len() != rows * cols {
        return Err(dim_err(format!(
            "cannot unvec {} entries into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DenseMatrix::from_fn(rows, cols, |i, j| v[j * rows + i]))
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DenseMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..br {
                let row = out.row_mut(i * br + k);
                for (l, x) in b.row(k).iter().enumerate() {
                    row[j * bc + l] = s * x;
                }
            }
        }
    }
    out
}

/// Orthonormal basis of `col(M)` from the thin SVD (`rows x rank`).
pub fn range_basis(m: &DenseMatrix) -> Result<DenseMatrix> {
    if m.cols() == 0 || m.rows() == 0 {
        return Ok(DenseMatrix::zeros(m.rows(), 0));
    }
    Ok(thin_svd(m, DEFAULT_CUTOFF)?.u)
}

/// Orthogonal projection `Π_M = M M†` onto the column space of `M`.
pub fn projection(m: &DenseMatrix) -> Result<DenseMatrix> {
    let u = range_basis(m)?;
    Ok(u.mul_tr(&u))
}

/// Applies `Π_M` to `v` without forming the projector.
pub fn project_onto(basis: &DenseMatrix, v: &[f64]) -> Vec<f64> {
    basis.mul_vec(&basis.tr_mul_vec(v))
}

/// `(Σ_{i >= k} s_i²)^{1/2}` with zero-based `k`: the energy left after keeping
/// the leading `k` values.
pub fn tail_energy(singular_values: &[f64], k: usize) -> f64 {
    singular_values
        .iter()
        .skip(k)
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_energy_examples() {
        assert!((tail_energy(&[3.0, 2.0, 1.0], 1) - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(tail_energy(&[3.0, 2.0, 1.0], 3), 0.0);
        assert_eq!(tail_energy(&[3.0, 2.0, 1.0], 7), 0.0);
        assert!((tail_energy(&[5.0, 4.0, 3.0, 2.0, 1.0], 2) - 14f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn kron_identity() {
        let i2 = DenseMatrix::identity(2);
        assert_eq!(kron(&i2, &i2), DenseMatrix::identity(4));
    }

    #[test]
    fn vec_roundtrip_and_layout() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let v = vec(&m);
        assert_eq!(v, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(unvec(&v, 2, 3).unwrap(), m);
        assert!(unvec(&v, 4, 2).is_err());
    }

    #[test]
    fn projection_examples() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let p = projection(&m).unwrap();
        let mut e = DenseMatrix::zeros(3, 3);
        e[(0, 0)] = 1.0;
        assert!(p.max_abs_diff(&e) < 1e-15);

        let full = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        assert!(projection(&full).unwrap().max_abs_diff(&DenseMatrix::identity(2)) < 1e-14);

        let z = projection(&DenseMatrix::zeros(3, 2)).unwrap();
        assert_eq!(z, DenseMatrix::zeros(3, 3));
    }
}
