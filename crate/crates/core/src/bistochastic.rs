//! Bistochastic normalization `P = D⁻¹ K Q⁻¹ K D⁻¹` and its eigenpairs.
//!
//! Here `D = diag(K 1)` and `Q = diag(K D⁻¹ 1)`. Two low-rank routes are
//! provided. [`dilution_evd`] approximates `K ≈ F Fᵀ` and works with the
//! factor alone. [`subsample_evd`] normalizes the kernel restricted to
//! the pivot states and extends its eigenvectors to every state with the
//! Nyström formula. [`dense_bistochastic`] is the `O(N²)` reference.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::kernel::{gaussian_entry, DelayEmbeddedProductStates, GaussianKernelConfig, GaussianOracle};
use crate::linalg::{matmul, matmul_nt, matmul_tn, qr_cgs2, svd_small, sym_evd, DenseMatrix};
use crate::rpcholesky::PartialCholeskyFactor;

/// Relative threshold below which a row sum counts as nonpositive.
pub const POSITIVITY_TOL: f64 = 1e-12;
/// Subsampled eigenpairs with λ at or below this are not extended.
pub const EXTENSION_TOL: f64 = 1e-10;
/// `FᵀF` is rejected when `λ_min ≤ RANK_TOL · λ_max`.
pub const RANK_TOL: f64 = 1e-12;

const EXTENSION_CHUNK: usize = 4096;

/// Diagonals of `D` and `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct BistochasticNormalizers {
    pub d: Vec<f64>,
    pub q: Vec<f64>,
}

/// Orthonormal eigenvectors and eigenvalues of a bistochastic kernel, sorted
/// so that eigenvalues descend.
#[derive(Debug, Clone, PartialEq)]
pub struct BistochasticEvd {
    /// `N × k`, columns orthonormal; each column's largest-magnitude entry is
    /// positive.
    pub eigenvectors: DenseMatrix,
    /// Clamped to `[0, 1]`.
    pub eigenvalues: Vec<f64>,
    /// Values before clamping.
    pub raw_eigenvalues: Vec<f64>,
}

impl BistochasticEvd {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Eigenpairs of the symmetric normalization `D^{-1/2} K D^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedEvd {
    pub eigenvectors: DenseMatrix,
    pub eigenvalues: Vec<f64>,
}

fn check_positive(v: &[f64], which: &'static str) -> Result<()> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = POSITIVITY_TOL * max.max(0.0);
    match v.iter().position(|&x| !(x > threshold)) {
        Some(index) => Err(Error::Normalization {
            which,
            index,
            value: v[index],
        }),
        None => Ok(()),
    }
}

fn column(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("length matches")
}

fn normalizers_dense(k: ArrayView2<'_, f64>) -> Result<BistochasticNormalizers> {
    let d = k.sum_axis(Axis(1)).to_vec();
    check_positive(&d, "d")?;
    let inv_d = column(d.iter().map(|x| 1.0 / x).collect());
    let q = matmul(k, inv_d.view()).into_raw_vec_and_offset().0;
    check_positive(&q, "q")?;
    Ok(BistochasticNormalizers { d, q })
}

/// Dense `P = D⁻¹ K Q⁻¹ K D⁻¹`. The result is symmetric with unit row sums.
pub fn dense_bistochastic(k: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(dense_bistochastic_with(k)?.0)
}

fn dense_bistochastic_with(k: &DenseMatrix) -> Result<(DenseMatrix, BistochasticNormalizers)> {
    if k.nrows() != k.ncols() {
        return Err(Error::Size("kernel matrix must be square".into()));
    }
    let norm = normalizers_dense(k.view())?;
    // A = D⁻¹ K Q^{-1/2}, P = A Aᵀ
    let mut a = k.clone();
    for ((i, j), v) in a.indexed_iter_mut() {
        *v /= norm.d[i] * norm.q[j].sqrt();
    }
    let p = matmul_nt(a.view(), a.view());
    Ok((symmetrize(p), norm))
}

fn symmetrize(mut p: DenseMatrix) -> DenseMatrix {
    let n = p.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (p[[i, j]] + p[[j, i]]);
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
    p
}

/// `d = F (Fᵀ 1)` and `q = F (Fᵀ d⁻¹)` without forming `F Fᵀ`.
pub fn normalizers_from_factor(factor: &PartialCholeskyFactor) -> Result<BistochasticNormalizers> {
    normalizers_from_matrix(factor.factor.view())
}

/// [`normalizers_from_factor`] for a bare factor matrix.
pub fn normalizers_from_matrix(f: ArrayView2<'_, f64>) -> Result<BistochasticNormalizers> {
    let n = f.nrows();
    let ones = Array2::<f64>::ones((n, 1));
    let d = matmul(f, matmul_tn(f, ones.view()).view()).into_raw_vec_and_offset().0;
    check_positive(&d, "d")?;
    let inv_d = column(d.iter().map(|x| 1.0 / x).collect());
    let q = matmul(f, matmul_tn(f, inv_d.view()).view()).into_raw_vec_and_offset().0;
    check_positive(&q, "q")?;
    Ok(BistochasticNormalizers { d, q })
}

/// Flips each column so its largest-magnitude entry is positive.
pub(crate) fn fix_signs(v: &mut DenseMatrix) {
    for mut col in v.columns_mut() {
        let mut best = 0.0f64;
        for &x in col.iter() {
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
}

fn finish(mut phi: DenseMatrix, raw: Vec<f64>, set_constant_leading: bool) -> Result<BistochasticEvd> {
    if set_constant_leading && phi.ncols() > 0 {
        let c = 1.0 / (phi.nrows() as f64).sqrt();
        phi.column_mut(0).fill(c);
        phi = qr_cgs2(phi.view())?.q;
    }
    fix_signs(&mut phi);
    Ok(BistochasticEvd {
        eigenvectors: phi,
        eigenvalues: raw.iter().map(|x| x.clamp(0.0, 1.0)).collect(),
        raw_eigenvalues: raw,
    })
}

/// Eigenpairs of `P̃` for `K̃ = F Fᵀ` by the dilution cascade:
/// `FᵀF = V Σ² Vᵀ`, `U = F V Σ⁻¹`, `D̃⁻¹ U = Q₁ R₁`,
/// `Q̃^{-1/2} U = Q₂ R₂`, `R₁ Σ² R₂ᵀ = U₁ Σ₁ W₁ᵀ`, giving `Φ = Q₁ U₁` and
/// `Λ = Σ₁²`.
///
/// With `set_constant_leading` the first eigenvector is replaced by the
/// normalized constant vector and the basis is reorthonormalized.
pub fn dilution_evd(factor: &PartialCholeskyFactor, set_constant_leading: bool) -> Result<BistochasticEvd> {
    dilution_evd_matrix(factor.factor.view(), set_constant_leading)
}

/// [`dilution_evd`] for a bare factor matrix.
pub fn dilution_evd_matrix(f: ArrayView2<'_, f64>, set_constant_leading: bool) -> Result<BistochasticEvd> {
    let (n, r) = f.dim();
    if r == 0 || r > n {
        return Err(Error::Size(format!("dilution needs 1 <= r <= N, got r = {r}, N = {n}")));
    }
    let norm = normalizers_from_matrix(f)?;

    let gram = symmetrize(matmul_tn(f, f));
    let evd = sym_evd(gram.view())?;
    let largest = evd.eigenvalues[0];
    let smallest = evd.eigenvalues[r - 1];
    if !(largest > 0.0 && smallest > RANK_TOL * largest) {
        return Err(Error::RankDeficient {
            ratio: smallest / largest,
        });
    }
    let sigma: Vec<f64> = evd.eigenvalues.iter().map(|x| x.sqrt()).collect();

    let mut u = matmul(f, evd.eigenvectors.view());
    drop(evd.eigenvectors);
    for (j, mut col) in u.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|x| x / sigma[j]);
    }

    let mut scaled = u.clone();
    for (mut row, d) in scaled.rows_mut().into_iter().zip(&norm.d) {
        row.mapv_inplace(|x| x / d);
    }
    let qr1 = qr_cgs2(scaled.view())?;
    scaled.assign(&u);
    drop(u);
    for (mut row, q) in scaled.rows_mut().into_iter().zip(&norm.q) {
        row.mapv_inplace(|x| x / q.sqrt());
    }
    let r2 = qr_cgs2(scaled.view())?.r;
    drop(scaled);

    // R₁ Σ² R₂ᵀ
    let mut r1s = qr1.r.clone();
    for (j, mut col) in r1s.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|x| x * sigma[j] * sigma[j]);
    }
    let core = matmul_nt(r1s.view(), r2.view());
    let svd = svd_small(core.view())?;
    let phi = matmul(qr1.q.view(), svd.left.view());
    let raw: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    finish(phi, raw, set_constant_leading)
}

/// Eigenpairs of `P̃` computed on the pivot states and extended to every
/// product state by `φ̂(x) = d(x)⁻¹ Σ_z k(x, x̃_z) [Q̃⁻¹ K̃ D̃⁻¹ Φ̃ Λ⁻¹]_z`,
/// with `d(x) = Σ_z k(x, x̃_z)`. Eigenpairs with `λ ≤ 1e-10` are dropped.
pub fn subsample_evd(
    embedded: &DelayEmbeddedProductStates,
    cfg: &GaussianKernelConfig,
    pivots: &[usize],
    set_constant_leading: bool,
) -> Result<BistochasticEvd> {
    subsample_evd_points(embedded.vectors(), cfg, pivots, set_constant_leading)
}

/// [`subsample_evd`] over arbitrary points stored as rows.
pub fn subsample_evd_points(
    points: ArrayView2<'_, f64>,
    cfg: &GaussianKernelConfig,
    pivots: &[usize],
    set_constant_leading: bool,
) -> Result<BistochasticEvd> {
    let r = pivots.len();
    if r < 2 {
        return Err(Error::InsufficientRank(format!(
            "subsampling needs at least 2 pivots, got {r}"
        )));
    }
    let n = points.nrows();
    if let Some(&bad) = pivots.iter().find(|&&p| p >= n) {
        return Err(Error::InvalidParameter(format!("pivot {bad} out of range for {n} states")));
    }
    let oracle = GaussianOracle::from_points(points, *cfg)?;

    let rows: Vec<&[f64]> = pivots
        .iter()
        .map(|&p| points.row(p).to_slice().expect("row-major points"))
        .collect();
    let k_sub = Array2::from_shape_fn((r, r), |(i, j)| gaussian_entry(rows[i], rows[j], cfg));
    let (p_sub, norm) = dense_bistochastic_with(&k_sub)?;
    let evd = sym_evd(p_sub.view())?;

    let kept: Vec<usize> = (0..r).filter(|&i| evd.eigenvalues[i] > EXTENSION_TOL).collect();
    if kept.len() < 2 {
        return Err(Error::InsufficientRank(format!(
            "only {} subsampled eigenvalues exceed {EXTENSION_TOL}",
            kept.len()
        )));
    }
    let k = kept.len();
    let lambda: Vec<f64> = kept.iter().map(|&i| evd.eigenvalues[i]).collect();

    // C = Q̃⁻¹ K̃ D̃⁻¹ Φ̃ Λ⁻¹
    let mut phi_scaled = Array2::zeros((r, k));
    for (c, &i) in kept.iter().enumerate() {
        for z in 0..r {
            phi_scaled[[z, c]] = evd.eigenvectors[[z, i]] / (norm.d[z] * lambda[c]);
        }
    }
    let mut c_mat = matmul(k_sub.view(), phi_scaled.view());
    for (mut row, q) in c_mat.rows_mut().into_iter().zip(&norm.q) {
        row.mapv_inplace(|x| x / q);
    }

    let mut extended = Array2::zeros((n, k));
    let mut weights = vec![0.0; n];
    for start in (0..n).step_by(EXTENSION_CHUNK) {
        let end = (start + EXTENSION_CHUNK).min(n);
        let block = oracle.block(start..end, pivots);
        let values = matmul(block.view(), c_mat.view());
        for (a, i) in (start..end).enumerate() {
            let dx: f64 = block.row(a).sum();
            weights[i] = dx;
            for c in 0..k {
                extended[[i, c]] = values[[a, c]] / dx;
            }
        }
    }
    check_positive(&weights, "d(x)")?;

    let phi = qr_cgs2(extended.view())?.q;
    finish(phi, lambda, set_constant_leading)
}

/// Eigenpairs of `L̃ = D̃^{-1/2} F Fᵀ D̃^{-1/2}` from the thin SVD of
/// `D̃^{-1/2} F`.
pub fn diluted_normalized_evd(factor: &PartialCholeskyFactor) -> Result<NormalizedEvd> {
    diluted_normalized_evd_matrix(factor.factor.view())
}

/// [`diluted_normalized_evd`] for a bare factor matrix.
pub fn diluted_normalized_evd_matrix(f: ArrayView2<'_, f64>) -> Result<NormalizedEvd> {
    let norm = normalizers_from_matrix(f)?;
    let mut b = f.to_owned();
    for (mut row, d) in b.rows_mut().into_iter().zip(&norm.d) {
        row.mapv_inplace(|x| x / d.sqrt());
    }
    let qr = qr_cgs2(b.view())?;
    let svd = svd_small(qr.r.view())?;
    let mut u = matmul(qr.q.view(), svd.left.view());
    fix_signs(&mut u);
    Ok(NormalizedEvd {
        eigenvectors: u,
        eigenvalues: svd.singular_values.iter().map(|s| s * s).collect(),
    })
}
