//! Row-major vectorisation and the structured matrices used to write
//! Jacobians of matrix-valued maps as ordinary matrices.
//!
//! Everything downstream uses the row-major layout `rvec(A)[i*cols + j] = A[i, j]`,
//! i.e. `rvec(A) = vec(Aᵀ)`. Under this layout
//! `rvec(A B C) = (A ⊗ Cᵀ) rvec(B)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row-major vectorisation.
pub fn rvec(a: &DMatrix<f64>) -> DVector<f64> {
    let (rows, cols) = a.shape();
    DVector::from_fn(rows * cols, |k, _| a[(k / cols, k % cols)])
}

/// Inverse of [`rvec`].
pub fn rvec_inv(v: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "cannot reshape {} entries into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}

/// Column-major vectorisation, kept for interop with the `vec` identities.
pub fn vec_col(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let (p, q) = b.shape();
    let mut out = DMatrix::zeros(m * p, n * q);
    for i in 0..m {
        for j in 0..n {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for r in 0..p {
                for s in 0..q {
                    out[(i * p + r, j * q + s)] = aij * b[(r, s)];
                }
            }
        }
    }
    out
}

/// The commutation matrix `K_mn`, stored as a permutation.
///
/// Follows the classical definition `K_mn vec(A) = vec(Aᵀ)` for `A ∈ R^{m×n}`.
/// Since `vec(A) = rvec(Aᵀ)`, the same matrix maps `rvec(B)` to `rvec(Bᵀ)`
/// for `B ∈ R^{n×m}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommutationMatrix {
    m: usize,
    n: usize,
    /// `source[out] = in`: output entry `out` copies input entry `source[out]`.
    source: Vec<usize>,
}

impl CommutationMatrix {
    pub fn new(m: usize, n: usize) -> Self {
        assert!(m >= 1 && n >= 1, "commutation matrix needs m, n >= 1");
        // vec(A)[j*m + i] = A[i,j]; vec(Aᵀ)[i*n + j] = A[i,j]
        let mut source = vec![0; m * n];
        for i in 0..m {
            for j in 0..n {
                source[i * n + j] = j * m + i;
            }
        }
        Self { m, n, source }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn size(&self) -> usize {
        self.source.len()
    }

    /// Row `r` has its single one in column `source()[r]`.
    pub fn source(&self) -> &[usize] {
        &self.source
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.size(), "commutation matrix size mismatch");
        DVector::from_fn(self.size(), |r, _| v[self.source[r]])
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let k = self.size();
        let mut out = DMatrix::zeros(k, k);
        for (r, &c) in self.source.iter().enumerate() {
            out[(r, c)] = 1.0;
        }
        out
    }
}

/// Elimination matrix `L_n` acting on the row-major vectorisation of an
/// `n×n` matrix.
///
/// `L_n rvec(A)` returns the lower triangle of `A` in column-major order
/// (`(0,0), (1,0), …, (n-1,0), (1,1), …`). For symmetric `A` that is the
/// full set of `n(n+1)/2` independent entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EliminationMatrix {
    n: usize,
    /// Row `r` selects `rvec(A)[columns[r]]`.
    columns: Vec<usize>,
    /// `(i, j)` with `i >= j` for each row.
    pairs: Vec<(usize, usize)>,
}

impl EliminationMatrix {
    /// Builds `L_n = Σ_{i≥j} u_ij vec(E_ij)ᵀ`, where `u_ij` has its one at
    /// position `(j-1)n + i - j(j-1)/2` (1-based), then composes with `K_nn`
    /// so that it reads from `rvec` rather than `vec`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "elimination matrix needs n >= 1");
        let rows = n * (n + 1) / 2;
        let mut vec_columns = vec![usize::MAX; rows];
        let mut pairs = vec![(0, 0); rows];
        for j in 1..=n {
            for i in j..=n {
                let row = (j - 1) * n + i - j * (j - 1) / 2;
                // vec(E_ij) has its one at (j-1)n + i
                vec_columns[row - 1] = (j - 1) * n + i - 1;
                pairs[row - 1] = (i - 1, j - 1);
            }
        }
        // rvec(A) = vec(Aᵀ) and K_nn vec(Aᵀ) = vec(A), so L_vec · K_nn reads rvec.
        let k = CommutationMatrix::new(n, n);
        let columns = vec_columns.iter().map(|&p| k.source()[p]).collect();
        Self { n, columns, pairs }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    /// Matrix position `(i, j)` extracted by each row.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.n * self.n, "elimination matrix size mismatch");
        DVector::from_fn(self.rows(), |r, _| v[self.columns[r]])
    }

    /// `Lᵀ x`: scatter half-vectorised entries back into an `n²` vector.
    pub fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.rows(), "elimination matrix size mismatch");
        let mut out = DVector::zeros(self.n * self.n);
        for (r, &c) in self.columns.iter().enumerate() {
            out[c] += x[r];
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows(), self.n * self.n);
        for (r, &c) in self.columns.iter().enumerate() {
            out[(r, c)] = 1.0;
        }
        out
    }
}

/// Row-major half vectorisation, `L_n rvec(A)`.
pub fn rvech(a: &DMatrix<f64>) -> DVector<f64> {
    assert!(a.is_square(), "rvech needs a square matrix");
    EliminationMatrix::new(a.nrows()).apply(&rvec(a))
}

/// `I_d ⊗ K` for a square block `K`, kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityKron {
    pub d: usize,
    pub block: DMatrix<f64>,
}

impl IdentityKron {
    pub fn new(d: usize, block: DMatrix<f64>) -> Self {
        assert!(block.is_square());
        Self { d, block }
    }

    pub fn dim(&self) -> usize {
        self.d * self.block.nrows()
    }

    /// `(I_d ⊗ K) rvec(V) = rvec(V Kᵀ)` for a `d×C` matrix `V`.
    pub fn apply_mat(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        v * self.block.transpose()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        kron(&DMatrix::identity(self.d, self.d), &self.block)
    }
}
