//! Dense linear algebra used by the decompositions.
//!
//! Matrices are plain [`ndarray::Array2`] values of any memory layout; the
//! heavy lifting (matrix products, the symmetric eigensolver and the SVD) is
//! delegated to `faer` through zero-copy views. The tall-skinny QR is the
//! reorthogonalized classical Gram-Schmidt procedure and is implemented here.

use faer::linalg::matmul::matmul as faer_matmul;
use faer::{Accum, Mat, MatMut, MatRef, Par, Side};
use ndarray::{Array2, ArrayView2, ArrayViewMut2, ShapeBuilder};

use crate::error::{Error, Result};

/// Row/column indexed real matrix. Logical order is row-major regardless of
/// the storage layout chosen by the routine that produced it.
pub type DenseMatrix = Array2<f64>;

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymmetricEvd {
    pub eigenvectors: DenseMatrix,
    pub eigenvalues: Vec<f64>,
}

/// Thin singular value decomposition `A = U diag(s) Vᵀ`, `s` descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub left: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub right: DenseMatrix,
}

/// Reduced QR factors of a tall matrix.
#[derive(Debug, Clone)]
pub struct QrFactors {
    pub q: DenseMatrix,
    pub r: DenseMatrix,
    /// Columns whose residual vanished after both orthogonalization passes.
    /// Their `R` diagonal entry is zero and `Q` holds a fresh orthonormal
    /// direction in their place.
    pub deficient_columns: Vec<usize>,
}

impl QrFactors {
    pub fn rank_deficient(&self) -> bool {
        !self.deficient_columns.is_empty()
    }
}

const SYMMETRY_TOL: f64 = 1e-12;
const QR_BLOCK: usize = 32;
const DEFICIENCY_TOL: f64 = 1e-14;

pub(crate) fn par() -> Par {
    faer::get_global_parallelism()
}

pub(crate) fn faer_ref(a: ArrayView2<'_, f64>) -> MatRef<'_, f64> {
    let (m, n) = a.dim();
    let s = a.strides();
    // SAFETY: the view guarantees m x n readable elements at these strides
    // for its whole lifetime.
    unsafe { MatRef::from_raw_parts(a.as_ptr(), m, n, s[0], s[1]) }
}

pub(crate) fn faer_mut(mut a: ArrayViewMut2<'_, f64>) -> MatMut<'_, f64> {
    let (m, n) = a.dim();
    let (s0, s1) = (a.strides()[0], a.strides()[1]);
    // SAFETY: as above, and the mutable view is consumed so no alias remains.
    unsafe { MatMut::from_raw_parts_mut(a.as_mut_ptr(), m, n, s0, s1) }
}

pub(crate) fn from_faer(m: MatRef<'_, f64>) -> DenseMatrix {
    let mut out = Array2::zeros((m.nrows(), m.ncols()).f());
    faer_mut(out.view_mut()).copy_from(m);
    out
}

/// `a · b`.
pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> DenseMatrix {
    assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
    let mut out = Array2::zeros((a.nrows(), b.ncols()).f());
    faer_matmul(
        faer_mut(out.view_mut()),
        Accum::Replace,
        faer_ref(a),
        faer_ref(b),
        1.0,
        par(),
    );
    out
}

/// `aᵀ · b`.
pub fn matmul_tn(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> DenseMatrix {
    matmul(a.t(), b)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> DenseMatrix {
    matmul(a, b.t())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub fn frobenius_norm(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_finite(a: ArrayView2<'_, f64>, what: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Eigendecomposition of a symmetric matrix.
///
/// Only the lower triangle is read once symmetry has been verified to
/// `1e-12 · ‖A‖_F`.
pub fn sym_evd(a: ArrayView2<'_, f64>) -> Result<SymmetricEvd> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::Size(format!(
            "sym_evd needs a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    check_finite(a, "sym_evd input")?;
    let allowed = SYMMETRY_TOL * frobenius_norm(a);
    let mut asymmetry = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asymmetry = asymmetry.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    if asymmetry > allowed {
        return Err(Error::NotSymmetric { asymmetry, allowed });
    }

    let evd = faer_ref(a)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::NoConvergence("symmetric eigensolver"))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    // faer sorts ascending.
    let eigenvalues = (0..n).rev().map(|i| s[i]).collect();
    let mut eigenvectors = Array2::zeros((n, n).f());
    faer_mut(eigenvectors.view_mut()).copy_from(u.reverse_cols());
    Ok(SymmetricEvd {
        eigenvectors,
        eigenvalues,
    })
}

/// Thin SVD of a (small) dense matrix.
pub fn svd_small(a: ArrayView2<'_, f64>) -> Result<Svd> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::Size("svd of an empty matrix".into()));
    }
    check_finite(a, "svd input")?;
    let svd = faer_ref(a)
        .thin_svd()
        .map_err(|_| Error::NoConvergence("singular value decomposition"))?;
    let s = svd.S().column_vector();
    Ok(Svd {
        left: from_faer(svd.U()),
        singular_values: (0..s.nrows()).map(|i| s[i]).collect(),
        right: from_faer(svd.V()),
    })
}

/// Reduced QR factorization of a tall matrix by classical Gram-Schmidt with
/// one full reorthogonalization pass.
///
/// Columns are processed in blocks of 32: each block is projected twice
/// against all previously finished columns with matrix products, then its
/// columns are orthogonalized among themselves, again with two passes. `R`
/// has a nonnegative diagonal.
///
/// A column whose norm after both passes falls below `1e-14` times its
/// original norm is marked deficient: `R[j, j]` is set to zero and `Q[:, j]`
/// is filled with a fresh unit vector orthogonal to the preceding columns, so
/// `QᵀQ = I` holds regardless.
pub fn qr_cgs2(a: ArrayView2<'_, f64>) -> Result<QrFactors> {
    let (n, k) = a.dim();
    if k == 0 || n < k {
        return Err(Error::InvalidParameter(format!(
            "qr_cgs2 needs N >= r >= 1, got {n}x{k}"
        )));
    }
    check_finite(a, "qr input")?;

    let mut w = Array2::<f64>::zeros((n, k).f());
    w.assign(&a);
    let original_norms: Vec<f64> = (0..k).map(|j| dot(col_of(&w, j), col_of(&w, j)).sqrt()).collect();
    let mut r = Mat::<f64>::zeros(k, k);
    let mut deficient = Vec::new();
    let parallelism = par();

    for j0 in (0..k).step_by(QR_BLOCK) {
        let j1 = (j0 + QR_BLOCK).min(k);
        let width = j1 - j0;

        // Each pass projects the block against the finished columns and then
        // orthonormalizes it internally; the second pass repairs the loss of
        // orthogonality the first one leaves behind.
        let mut r_block = Mat::<f64>::zeros(k, width);
        for c in 0..width {
            r_block[(j0 + c, c)] = 1.0;
        }
        for pass in 0..2 {
            let mut h = Mat::<f64>::zeros(j0, width);
            if j0 > 0 {
                let (done, rest) = faer_mut(w.view_mut()).split_at_col_mut(j0);
                let mut block = rest.subcols_mut(0, width);
                faer_matmul(h.as_mut(), Accum::Replace, done.as_ref().transpose(), block.as_ref(), 1.0, parallelism);
                faer_matmul(block.as_mut(), Accum::Add, done.as_ref(), h.as_ref(), -1.0, parallelism);
            }
            let mut r_in = Mat::<f64>::zeros(width, width);
            let mut col = vec![0.0; n];
            for j in j0..j1 {
                col.copy_from_slice(col_of(&w, j));
                let before = dot(&col, &col).sqrt();
                for _ in 0..2 {
                    for p in j0..j {
                        let qp = col_of(&w, p);
                        let h = dot(qp, &col);
                        r_in[(p - j0, j - j0)] += h;
                        col.iter_mut().zip(qp).for_each(|(c, q)| *c -= h * q);
                    }
                }
                let norm = dot(&col, &col).sqrt();
                let reference = if pass == 0 { original_norms[j] } else { before };
                if norm == 0.0 || norm <= DEFICIENCY_TOL * reference {
                    if pass == 0 {
                        deficient.push(j);
                    }
                    fresh_direction(&w, j, &mut col);
                } else {
                    r_in[(j - j0, j - j0)] = norm;
                    col.iter_mut().for_each(|c| *c /= norm);
                }
                col_of_mut(&mut w, j).copy_from_slice(&col);
            }
            // accumulate: A_block = Q_done H + Q_block R_in, applied to the
            // factor carried from the previous pass
            let prev = r_block.clone();
            let mut top = Mat::<f64>::zeros(j0, width);
            faer_matmul(top.as_mut(), Accum::Replace, h.as_ref(), prev.as_ref().subrows(j0, width), 1.0, parallelism);
            let mut diag = Mat::<f64>::zeros(width, width);
            faer_matmul(diag.as_mut(), Accum::Replace, r_in.as_ref(), prev.as_ref().subrows(j0, width), 1.0, parallelism);
            for c in 0..width {
                for i in 0..j0 {
                    r_block[(i, c)] = prev[(i, c)] + top[(i, c)];
                }
                for i in 0..width {
                    r_block[(j0 + i, c)] = diag[(i, c)];
                }
            }
        }
        for c in 0..width {
            for i in 0..j1 {
                r[(i, j0 + c)] = r_block[(i, c)];
            }
        }
    }

    Ok(QrFactors {
        q: w,
        r: from_faer(r.as_ref()),
        deficient_columns: deficient,
    })
}

fn col_of(a: &DenseMatrix, j: usize) -> &[f64] {
    let n = a.nrows();
    &a.as_slice_memory_order().expect("contiguous")[j * n..(j + 1) * n]
}

fn col_of_mut(a: &mut DenseMatrix, j: usize) -> &mut [f64] {
    let n = a.nrows();
    &mut a.as_slice_memory_order_mut().expect("contiguous")[j * n..(j + 1) * n]
}

/// Writes into `out` a unit vector orthogonal to the first `j` columns of `q`.
fn fresh_direction(q: &DenseMatrix, j: usize, out: &mut [f64]) {
    let n = out.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for t in 0..n {
        let idx = (j + t) % n;
        out.iter_mut().for_each(|x| *x = 0.0);
        out[idx] = 1.0;
        for _ in 0..2 {
            for p in 0..j {
                let qp = col_of(q, p);
                let h = dot(qp, out);
                out.iter_mut().zip(qp).for_each(|(c, q)| *c -= h * q);
            }
        }
        let norm = dot(out, out).sqrt();
        if norm > 0.5 {
            out.iter_mut().for_each(|x| *x /= norm);
            return;
        }
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, out.to_vec()));
        }
    }
    let (norm, v) = best.expect("j < n leaves a nonzero complement");
    out.iter_mut().zip(&v).for_each(|(o, x)| *o = x / norm);
}
