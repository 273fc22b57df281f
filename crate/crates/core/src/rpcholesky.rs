//! Randomly pivoted partial Cholesky.
//!
//! Pivots are drawn with probability proportional to the current residual
//! diagonal. After `r` steps, `F Fᵀ` equals the column Nyström approximation
//! of the matrix on the chosen columns, and the oracle has been asked for
//! at most `N (r + 1)` entries.

use faer::linalg::matmul::matmul as faer_matmul;
use faer::Accum;
use ndarray::{s, Array2, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::KernelOracle;
use crate::linalg::{faer_ref, matmul, matmul_nt, par, sym_evd, DenseMatrix};

/// Output of [`rpcholesky`].
#[derive(Debug, Clone, PartialEq)]
pub struct PartialCholeskyFactor {
    /// `N × r` factor, column-major storage.
    pub factor: DenseMatrix,
    /// Chosen pivots in selection order.
    pub pivots: Vec<usize>,
    /// Diagonal of `A - F Fᵀ`, clamped at zero.
    pub residual_diag: Vec<f64>,
    /// `tr(A)`.
    pub initial_trace: f64,
    /// `tr(A - F Fᵀ) / tr(A)`.
    pub rel_trace_error: f64,
    /// Relative trace error after each accepted pivot.
    pub trace_history: Vec<f64>,
    /// Set when the residual vanished before `r` pivots were found.
    pub truncated: bool,
}

impl PartialCholeskyFactor {
    pub fn n(&self) -> usize {
        self.factor.nrows()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }
}

/// Relative trace error of a factorization.
pub fn trace_error(factor: &PartialCholeskyFactor) -> f64 {
    factor.rel_trace_error
}

/// Draws an index with probability proportional to `weights` (nonnegative,
/// summing to `total > 0`) by inverting the cumulative sum.
fn sample_proportional(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if acc > u {
                return i;
            }
        }
    }
    last_positive
}

/// Rank-`r` randomly pivoted Cholesky of the matrix behind `oracle`.
///
/// Stops early, with `truncated` set, once the sampled residual pivot falls
/// below `N · ε_mach · max(diag A)`; the factor then has fewer columns.
/// `r = 0` returns an empty factor.
pub fn rpcholesky<O: KernelOracle + ?Sized>(oracle: &O, r: usize, seed: u64) -> Result<PartialCholeskyFactor> {
    let n = oracle.size();
    if n == 0 {
        return Err(Error::Size("empty kernel matrix".into()));
    }
    if r > n {
        return Err(Error::InvalidParameter(format!(
            "rank {r} exceeds matrix size {n}"
        )));
    }

    let mut d = oracle.diagonal();
    if d.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::NonFinite("kernel diagonal"));
    }
    let initial_trace: f64 = d.iter().sum();
    let d_max = d.iter().copied().fold(0.0, f64::max);
    let stop_below = n as f64 * f64::EPSILON * d_max;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factor = Array2::<f64>::zeros((n, r).f());
    let mut pivots = Vec::with_capacity(r);
    let mut history = Vec::with_capacity(r);
    let mut g = vec![0.0; n];
    let mut truncated = false;
    let mut trace = initial_trace;

    for i in 0..r {
        if trace <= 0.0 {
            truncated = true;
            break;
        }
        let s = sample_proportional(&d, trace, &mut rng);
        oracle.column_into(s, &mut g);

        if i > 0 {
            let done = faer_ref(factor.view()).subcols(0, i);
            let fs = done.row(s).transpose().to_owned();
            let gm = faer::MatMut::from_column_major_slice_mut(&mut g, n, 1);
            faer_matmul(gm, Accum::Add, done, fs.as_mat(), -1.0, par());
        }

        let pivot = g[s];
        if !(pivot > stop_below) {
            truncated = true;
            break;
        }
        let inv = 1.0 / pivot.sqrt();
        let mut col = factor.column_mut(i);
        let col = col.as_slice_mut().expect("column-major factor");
        col.par_iter_mut()
            .zip(g.par_iter())
            .zip(d.par_iter_mut())
            .for_each(|((c, &gv), dv)| {
                *c = gv * inv;
                *dv = (*dv - *c * *c).max(0.0);
            });
        d[s] = 0.0;
        pivots.push(s);
        trace = d.iter().sum();
        history.push(trace / initial_trace);
    }

    let k = pivots.len();
    let factor = if k < r {
        factor.slice(s![.., ..k]).to_owned()
    } else {
        factor
    };
    let rel_trace_error = if initial_trace > 0.0 {
        (trace / initial_trace).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(PartialCholeskyFactor {
        factor,
        pivots,
        residual_diag: d,
        initial_trace,
        rel_trace_error,
        trace_history: history,
        truncated,
    })
}

/// `A[:, S] · A[S, S]⁺ · A[:, S]ᵀ` with the pseudoinverse truncated at
/// `1e-12 · λ_max`. Test oracle for [`rpcholesky`].
pub fn column_nystrom(a: &DenseMatrix, pivots: &[usize]) -> Result<DenseMatrix> {
    let n = a.nrows();
    let a_s = Array2::from_shape_fn((n, pivots.len()), |(i, j)| a[[i, pivots[j]]]);
    let w = Array2::from_shape_fn((pivots.len(), pivots.len()), |(i, j)| a[[pivots[i], pivots[j]]]);
    let evd = sym_evd(w.view())?;
    let cutoff = 1e-12 * evd.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    // A_S V Λ^{-1/2}, keeping only the retained eigenpairs
    let kept: Vec<usize> = (0..evd.eigenvalues.len())
        .filter(|&j| evd.eigenvalues[j] > cutoff)
        .collect();
    let mut scaled = Array2::zeros((pivots.len(), kept.len()));
    for (c, &j) in kept.iter().enumerate() {
        let f = 1.0 / evd.eigenvalues[j].sqrt();
        for i in 0..pivots.len() {
            scaled[[i, c]] = evd.eigenvectors[[i, j]] * f;
        }
    }
    let b = matmul(a_s.view(), scaled.view());
    Ok(matmul_nt(b.view(), b.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{CountingOracle, DenseOracle};
    use crate::linalg::matmul_nt;

    fn random_gram(n: usize, rank: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Array2::from_shape_fn((n, rank), |_| rng.random::<f64>() - 0.5);
        matmul_nt(g.view(), g.view())
    }

    fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn reconstruction(f: &PartialCholeskyFactor) -> DenseMatrix {
        matmul_nt(f.factor.view(), f.factor.view())
    }

    #[test]
    fn full_rank_is_exact() {
        let a = random_gram(20, 30, 1);
        let oracle = DenseOracle::new(a.clone()).unwrap();
        let f = rpcholesky(&oracle, 20, 7).unwrap();
        assert!(!f.truncated);
        assert!(f.rel_trace_error <= 1e-10);
        assert!(max_abs_diff(&reconstruction(&f), &a) < 1e-8);
        let mut p = f.pivots.clone();
        p.sort_unstable();
        assert_eq!(p, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn exact_recovery_at_true_rank() {
        let a = random_gram(50, 3, 2);
        let f = rpcholesky(&DenseOracle::new(a.clone()).unwrap(), 3, 3).unwrap();
        assert!(f.rel_trace_error <= 1e-10);
        assert!(max_abs_diff(&reconstruction(&f), &a) < 1e-10);
    }

    #[test]
    fn stops_early_past_true_rank() {
        let a = random_gram(50, 3, 4);
        let f = rpcholesky(&DenseOracle::new(a).unwrap(), 10, 5).unwrap();
        assert!(f.truncated);
        assert_eq!(f.rank(), 3);
        assert_eq!(f.pivots.len(), 3);
    }

    #[test]
    fn empty_factor_has_unit_error() {
        let a = random_gram(10, 10, 6);
        let f = rpcholesky(&DenseOracle::new(a).unwrap(), 0, 0).unwrap();
        assert_eq!(f.rank(), 0);
        assert_eq!(trace_error(&f), 1.0);
        assert!(rpcholesky(&DenseOracle::new(random_gram(4, 4, 0)).unwrap(), 5, 0).is_err());
    }

    #[test]
    fn matches_column_nystrom() {
        let a = random_gram(40, 40, 8);
        let f = rpcholesky(&DenseOracle::new(a.clone()).unwrap(), 8, 9).unwrap();
        let nys = column_nystrom(&a, &f.pivots).unwrap();
        assert!(max_abs_diff(&reconstruction(&f), &nys) < 1e-8);
        // agreement on the pivot rows
        let rec = reconstruction(&f);
        for &s in &f.pivots {
            for j in 0..40 {
                assert!((rec[[s, j]] - a[[s, j]]).abs() < 1e-10);
            }
            assert!(f.residual_diag[s] == 0.0);
        }
    }

    #[test]
    fn column_nystrom_special_cases() {
        let a = random_gram(12, 12, 10);
        let all: Vec<usize> = (0..12).collect();
        assert!(max_abs_diff(&column_nystrom(&a, &all).unwrap(), &a) < 1e-9);
        let d = ndarray::array![[4.0, 0.0], [0.0, 1.0]];
        let one = column_nystrom(&d, &[0]).unwrap();
        assert!(max_abs_diff(&one, &ndarray::array![[4.0, 0.0], [0.0, 0.0]]) < 1e-15);
    }

    #[test]
    fn trace_error_is_monotone() {
        let a = random_gram(60, 60, 11);
        let f = rpcholesky(&DenseOracle::new(a).unwrap(), 30, 12).unwrap();
        assert_eq!(f.trace_history.len(), 30);
        for w in f.trace_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(*f.trace_history.last().unwrap(), f.rel_trace_error);
    }

    #[test]
    fn dominant_diagonal_is_picked_first() {
        let mut a = Array2::eye(20);
        a[[0, 0]] = 1000.0;
        let oracle = DenseOracle::new(a).unwrap();
        let hits = (0..500)
            .filter(|&seed| rpcholesky(&oracle, 1, seed).unwrap().pivots[0] == 0)
            .count();
        assert!(hits as f64 / 500.0 > 0.95, "{hits} of 500");
    }

    #[test]
    fn evaluation_budget() {
        let a = random_gram(70, 70, 13);
        for r in [0, 1, 10, 70] {
            let oracle = CountingOracle::new(DenseOracle::new(a.clone()).unwrap());
            rpcholesky(&oracle, r, 14).unwrap();
            assert!(oracle.evaluations() <= 70 * (r + 1));
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = random_gram(30, 30, 15);
        let o = DenseOracle::new(a).unwrap();
        assert_eq!(rpcholesky(&o, 10, 3).unwrap(), rpcholesky(&o, 10, 3).unwrap());
        assert_ne!(rpcholesky(&o, 10, 3).unwrap().pivots, rpcholesky(&o, 10, 4).unwrap().pivots);
    }
}
