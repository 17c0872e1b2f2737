//! Dense kernels and matrix vocabulary: column-stacked `vec`, Kronecker
//! products, projections and thin factorizations.

mod decomp;
mod matrix;
mod ops;

pub use decomp::{
    cholesky_lower, cholesky_solve, inv_sqrt_spd, pinv, solve_lower, solve_lower_transpose,
    sqrt_spd, svd_values, sym_eigen, thin_qr, thin_svd, SymEigen, ThinQr, ThinSvd,
    DEFAULT_CUTOFF, SPD_FLOOR,
};
pub use matrix::{dot, norm2, DenseMatrix};
pub use ops::{kron, project_onto, projection, range_basis, tail_energy, unvec, vec};
