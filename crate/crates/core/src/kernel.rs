//! Delay-embedded product states and the Gaussian kernel on them.
//!
//! A product state is a pair (snapshot time `n`, grid point `m`). Its delay
//! vector collects the field at `m` over `Q` consecutive snapshots, newest
//! first. Rows of [`DelayEmbeddedProductStates`] are ordered `i = n·M + m`.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ks::SpatiotemporalDataset;
use crate::linalg::squared_distance;

/// Delay coordinates of every usable product state.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayEmbeddedProductStates {
    vectors: Array2<f64>,
    n_time: usize,
    n_space: usize,
    delays: usize,
    sample_dt: f64,
}

impl DelayEmbeddedProductStates {
    /// `NM × Q` matrix of delay vectors (standard layout).
    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    pub fn delays(&self) -> usize {
        self.delays
    }

    pub fn sample_dt(&self) -> f64 {
        self.sample_dt
    }

    /// Number of product states, `N·M`.
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let q = self.delays;
        &self.vectors.as_slice().expect("standard layout")[i * q..(i + 1) * q]
    }

    /// `(n, m)` of row `i`.
    pub fn product_state(&self, i: usize) -> (usize, usize) {
        (i / self.n_space, i % self.n_space)
    }

    /// Delay vectors of the listed rows, in order.
    pub fn select(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.delays));
        for (k, &i) in rows.iter().enumerate() {
            out.row_mut(k)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(self.row(i));
        }
        out
    }
}

/// Builds the delay vectors `(u(t_{n+Q-1}, s_m), …, u(t_n, s_m))` for all
/// `n < snapshots - Q + 1` and all grid points `m`.
pub fn delay_embed(data: &SpatiotemporalDataset, delays: usize) -> Result<DelayEmbeddedProductStates> {
    let total = data.n_snapshots();
    if delays == 0 || delays > total {
        return Err(Error::Size(format!(
            "{delays} delays requested from {total} snapshots"
        )));
    }
    let n_time = total - delays + 1;
    let n_space = data.n_space();
    let mut vectors = Array2::zeros((n_time * n_space, delays));
    for n in 0..n_time {
        for m in 0..n_space {
            let mut row = vectors.row_mut(n * n_space + m);
            for d in 0..delays {
                row[d] = data.snapshots[[n + delays - 1 - d, m]];
            }
        }
    }
    Ok(DelayEmbeddedProductStates {
        vectors,
        n_time,
        n_space,
        delays,
        sample_dt: data.sample_dt,
    })
}

/// Bandwidth and delay count of the kernel
/// `k(w, w') = exp(-‖w - w'‖² / (ε Q))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernelConfig {
    pub epsilon: f64,
    pub delays: usize,
}

impl GaussianKernelConfig {
    pub fn new(epsilon: f64, delays: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be positive, got {epsilon}"
            )));
        }
        if delays == 0 {
            return Err(Error::InvalidParameter("delay count must be at least 1".into()));
        }
        Ok(Self { epsilon, delays })
    }

    fn scale(&self) -> f64 {
        1.0 / (self.epsilon * self.delays as f64)
    }
}

pub fn gaussian_entry(wi: &[f64], wj: &[f64], cfg: &GaussianKernelConfig) -> f64 {
    debug_assert_eq!(wi.len(), cfg.delays);
    debug_assert_eq!(wj.len(), cfg.delays);
    (-squared_distance(wi, wj) * cfg.scale()).exp()
}

/// Read access to an implicit symmetric positive semidefinite matrix.
pub trait KernelOracle: Sync {
    fn size(&self) -> usize;

    fn entry(&self, i: usize, j: usize) -> f64;

    fn column_into(&self, j: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.entry(i, j);
        }
    }

    fn column(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.size()];
        self.column_into(j, &mut out);
        out
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.size()).map(|i| self.entry(i, i)).collect()
    }

    /// The full matrix. Only sensible for small instances.
    fn to_dense(&self) -> Array2<f64> {
        let n = self.size();
        let mut out = Array2::zeros((n, n));
        let mut col = vec![0.0; n];
        for j in 0..n {
            self.column_into(j, &mut col);
            for i in 0..n {
                out[[i, j]] = col[i];
            }
        }
        out
    }
}

/// Gaussian kernel over delay-embedded product states.
#[derive(Debug, Clone, Copy)]
pub struct GaussianOracle<'a> {
    states: ArrayView2<'a, f64>,
    cfg: GaussianKernelConfig,
}

impl<'a> GaussianOracle<'a> {
    pub fn new(states: &'a DelayEmbeddedProductStates, cfg: GaussianKernelConfig) -> Result<Self> {
        Self::from_points(states.vectors(), cfg)
    }

    /// Kernel over arbitrary points given as rows.
    pub fn from_points(points: ArrayView2<'a, f64>, cfg: GaussianKernelConfig) -> Result<Self> {
        if points.ncols() != cfg.delays {
            return Err(Error::Size(format!(
                "points have dimension {} but the kernel expects {}",
                points.ncols(),
                cfg.delays
            )));
        }
        if !points.is_standard_layout() {
            return Err(Error::Size("points must be stored row-major".into()));
        }
        Ok(Self { states: points, cfg })
    }

    pub fn config(&self) -> GaussianKernelConfig {
        self.cfg
    }

    fn point(&self, i: usize) -> &'a [f64] {
        let q = self.cfg.delays;
        let all: &'a [f64] = self.states.to_slice().expect("standard layout");
        &all[i * q..(i + 1) * q]
    }

    /// `rows.len() × cols.len()` block `k(x_rows[a], x_cols[b])`, row-major.
    pub fn block(&self, rows: std::ops::Range<usize>, cols: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), cols.len()));
        let centers: Vec<&[f64]> = cols.iter().map(|&c| self.point(c)).collect();
        let scale = self.cfg.scale();
        out.as_slice_mut()
            .expect("fresh array")
            .par_chunks_mut(cols.len().max(1))
            .zip(rows.into_par_iter())
            .for_each(|(dst, i)| {
                let xi = self.point(i);
                for (d, c) in dst.iter_mut().zip(&centers) {
                    *d = (-squared_distance(xi, c) * scale).exp();
                }
            });
        out
    }
}

impl KernelOracle for GaussianOracle<'_> {
    fn size(&self) -> usize {
        self.states.nrows()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        gaussian_entry(self.point(i), self.point(j), &self.cfg)
    }

    fn column_into(&self, j: usize, out: &mut [f64]) {
        let xj = self.point(j);
        let scale = self.cfg.scale();
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            *o = (-squared_distance(self.point(i), xj) * scale).exp();
        });
    }

    fn diagonal(&self) -> Vec<f64> {
        vec![1.0; self.size()]
    }
}

/// An explicitly stored symmetric matrix.
#[derive(Debug, Clone)]
pub struct DenseOracle {
    matrix: Array2<f64>,
}

impl DenseOracle {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Size("dense oracle needs a square matrix".into()));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

impl KernelOracle for DenseOracle {
    fn size(&self) -> usize {
        self.matrix.nrows()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[[i, j]]
    }

    fn to_dense(&self) -> Array2<f64> {
        self.matrix.clone()
    }
}

/// Wraps an oracle and counts how many matrix entries it was asked for.
pub struct CountingOracle<O> {
    inner: O,
    evaluations: AtomicUsize,
}

impl<O: KernelOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            evaluations: AtomicUsize::new(0),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }
}

impl<O: KernelOracle> KernelOracle for CountingOracle<O> {
    fn size(&self) -> usize {
        self.inner.size()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.inner.entry(i, j)
    }

    fn column_into(&self, j: usize, out: &mut [f64]) {
        self.evaluations.fetch_add(out.len(), Ordering::Relaxed);
        self.inner.column_into(j, out)
    }

    fn diagonal(&self) -> Vec<f64> {
        self.evaluations.fetch_add(self.size(), Ordering::Relaxed);
        self.inner.diagonal()
    }
}

fn pairwise_squared_distances(points: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = points.nrows();
    let rows: Vec<&[f64]> = points
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("row-major points"))
        .collect();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let rows = &rows;
            (i + 1..n).map(move |j| squared_distance(rows[i], rows[j]))
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    let (left, upper, _) = values.select_nth_unstable_by(n / 2, cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = left.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Median heuristic: ε₀ = median pairwise squared distance of a seeded
/// uniform subsample, divided by `Q`, so that the kernel evaluates to `e⁻¹`
/// at the median distance.
pub fn median_bandwidth(embedded: &DelayEmbeddedProductStates, subsample: usize, seed: u64) -> Result<f64> {
    if subsample < 2 {
        return Err(Error::InvalidParameter(format!(
            "median rule needs at least 2 samples, got {subsample}"
        )));
    }
    let n = embedded.len();
    if n < 2 {
        return Err(Error::DegenerateData("fewer than two product states".into()));
    }
    let mut rows: Vec<usize> = if subsample >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, n, subsample).into_vec()
    };
    rows.sort_unstable();
    let points = embedded.select(&rows);
    median_bandwidth_of_points(points.view())
}

pub(crate) fn median_bandwidth_of_points(points: ArrayView2<'_, f64>) -> Result<f64> {
    let mut d2 = pairwise_squared_distances(points);
    let med = median(&mut d2);
    if med <= 0.0 {
        return Err(Error::DegenerateData(
            "median pairwise distance is zero".into(),
        ));
    }
    Ok(med / points.ncols() as f64)
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Result of the kernel-sum scan used for bandwidth refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingScan {
    pub grid: Vec<f64>,
    /// `log T(ε)` for each grid point.
    pub log_sums: Vec<f64>,
    /// Centered slopes `d log T / d log ε` at interior grid points
    /// (`slopes[k]` belongs to `grid[k + 1]`).
    pub slopes: Vec<f64>,
    pub selected: f64,
}

/// Scans `T(ε) = Σ_{i,j} exp(-‖w_i - w_j‖²/(εQ))` over `grid` and selects
/// the interior grid point of steepest log-log slope. Ties go to the
/// smallest ε.
pub fn scaling_refine_bandwidth(points: ArrayView2<'_, f64>, grid: &[f64]) -> Result<ScalingScan> {
    if grid.len() < 3 {
        return Err(Error::InvalidParameter(
            "bandwidth grid needs at least 3 points".into(),
        ));
    }
    if grid.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidParameter(
            "bandwidth grid values must be positive".into(),
        ));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "bandwidth grid must be strictly increasing".into(),
        ));
    }
    if points.nrows() == 0 {
        return Err(Error::DegenerateData("empty subset".into()));
    }
    let q = points.ncols() as f64;
    let d2 = pairwise_squared_distances(points);
    let n = points.nrows() as f64;
    let log_sums: Vec<f64> = grid
        .iter()
        .map(|&eps| {
            let s = 1.0 / (eps * q);
            let off: f64 = d2.par_chunks(1 << 16).map(|c| c.iter().map(|&d| (-d * s).exp()).sum::<f64>()).collect::<Vec<_>>().iter().sum();
            (n + 2.0 * off).ln()
        })
        .collect();
    let slopes: Vec<f64> = (1..grid.len() - 1)
        .map(|k| (log_sums[k + 1] - log_sums[k - 1]) / (grid[k + 1].ln() - grid[k - 1].ln()))
        .collect();
    let mut best = 0;
    for (k, &s) in slopes.iter().enumerate() {
        if s > slopes[best] {
            best = k;
        }
    }
    Ok(ScalingScan {
        grid: grid.to_vec(),
        log_sums,
        selected: grid[best + 1],
        slopes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_evd;
    use ndarray::array;

    fn dataset(rows: Array2<f64>) -> SpatiotemporalDataset {
        SpatiotemporalDataset {
            snapshots: rows,
            length: 1.0,
            sample_dt: 1.0,
            start_time: 0.0,
        }
    }

    fn pseudo_random_dataset(n: usize, m: usize) -> SpatiotemporalDataset {
        dataset(Array2::from_shape_fn((n, m), |(i, j)| {
            ((i * 31 + j * 17) as f64 * 0.37).sin() + 0.3 * ((i * j) as f64 * 0.11).cos()
        }))
    }

    #[test]
    fn single_delay_rows_are_samples() {
        let data = pseudo_random_dataset(6, 4);
        let e = delay_embed(&data, 1).unwrap();
        assert_eq!(e.n_time(), 6);
        assert_eq!(e.len(), 24);
        assert_eq!(e.row(4 * 2 + 3), &[data.snapshots[[2, 3]]]);
    }

    #[test]
    fn embedding_counts_for_experiment_shape() {
        let data = dataset(Array2::zeros((563, 64)));
        let e = delay_embed(&data, 64).unwrap();
        assert_eq!(e.n_time(), 500);
        assert_eq!(e.len(), 32_000);
    }

    #[test]
    fn present_sample_comes_first() {
        let data = pseudo_random_dataset(10, 3);
        let e = delay_embed(&data, 4).unwrap();
        let (n, m) = (2, 1);
        let row = e.row(n * 3 + m);
        assert_eq!(row[0], data.snapshots[[n + 3, m]]);
        assert_eq!(row[3], data.snapshots[[n, m]]);
        assert_eq!(e.product_state(n * 3 + m), (n, m));
    }

    #[test]
    fn constant_in_time_field() {
        let g = [0.5, -1.0, 2.0];
        let data = dataset(Array2::from_shape_fn((8, 3), |(_, j)| g[j]));
        let e = delay_embed(&data, 5).unwrap();
        for i in 0..e.len() {
            let (_, m) = e.product_state(i);
            assert!(e.row(i).iter().all(|&x| x == g[m]));
        }
    }

    #[test]
    fn too_many_delays() {
        let data = pseudo_random_dataset(5, 3);
        assert!(matches!(delay_embed(&data, 6), Err(Error::Size(_))));
    }

    #[test]
    fn gaussian_closed_forms() {
        let cfg = GaussianKernelConfig::new(1.0, 2).unwrap();
        assert_eq!(gaussian_entry(&[0.3, 0.4], &[0.3, 0.4], &cfg), 1.0);
        let v = gaussian_entry(&[0.0, 0.0], &[1.0, 1.0], &cfg);
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        // ‖Δ‖² = εQ gives e⁻¹ for any ε
        let cfg = GaussianKernelConfig::new(2.5, 2).unwrap();
        let v = gaussian_entry(&[0.0, 0.0], &[5f64.sqrt(), 0.0], &cfg);
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!(GaussianKernelConfig::new(0.0, 2).is_err());
        assert!(GaussianKernelConfig::new(1.0, 0).is_err());
    }

    #[test]
    fn median_rule_small_cases() {
        // two points at squared distance 8 in Q = 2
        let pts = array![[0.0, 0.0], [2.0, 2.0]];
        assert_eq!(median_bandwidth_of_points(pts.view()).unwrap(), 4.0);
        // collinear: distances² {1, 1, 4}
        let pts = array![[0.0], [1.0], [2.0]];
        assert_eq!(median_bandwidth_of_points(pts.view()).unwrap(), 1.0);
        let same = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(matches!(
            median_bandwidth_of_points(same.view()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn median_rule_through_embedding() {
        let data = dataset(array![[0.0, 1.0, 2.0]]);
        let e = delay_embed(&data, 1).unwrap();
        assert_eq!(median_bandwidth(&e, 3, 0).unwrap(), 1.0);
        assert!(median_bandwidth(&e, 1, 0).is_err());
        let big = delay_embed(&pseudo_random_dataset(40, 16), 4).unwrap();
        assert_eq!(
            median_bandwidth(&big, 100, 17).unwrap(),
            median_bandwidth(&big, 100, 17).unwrap()
        );
    }

    #[test]
    fn scaling_single_point_picks_smallest() {
        let pts = array![[1.0, 2.0]];
        let scan = scaling_refine_bandwidth(pts.view(), &[0.1, 1.0, 10.0, 100.0]).unwrap();
        assert!(scan.slopes.iter().all(|&s| s == 0.0));
        assert_eq!(scan.selected, 1.0);
    }

    #[test]
    fn scaling_two_points_closed_form() {
        let pts = array![[0.0], [1.0]];
        let grid = [0.1, 1.0, 10.0];
        let scan = scaling_refine_bandwidth(pts.view(), &grid).unwrap();
        let t = |e: f64| 2.0 + 2.0 * (-1.0 / e).exp();
        let slope = (t(10.0).ln() - t(0.1).ln()) / (10f64.ln() - 0.1f64.ln());
        assert!((scan.slopes[0] - slope).abs() < 1e-14);
        assert_eq!(scan.selected, 1.0);
    }

    #[test]
    fn scaling_rejects_bad_grids() {
        let pts = array![[0.0], [1.0]];
        assert!(scaling_refine_bandwidth(pts.view(), &[1.0, 2.0]).is_err());
        assert!(scaling_refine_bandwidth(pts.view(), &[-1.0, 2.0, 3.0]).is_err());
        assert!(scaling_refine_bandwidth(pts.view(), &[1.0, 3.0, 2.0]).is_err());
    }

    #[test]
    fn gaussian_oracle_properties() {
        let e = delay_embed(&pseudo_random_dataset(30, 6), 5).unwrap();
        let cfg = GaussianKernelConfig::new(0.5, 5).unwrap();
        let oracle = GaussianOracle::new(&e, cfg).unwrap();
        assert!(oracle.diagonal().iter().all(|&d| d == 1.0));
        let k = oracle.to_dense();
        for i in 0..k.nrows() {
            assert_eq!(k[[i, i]], 1.0);
            for j in 0..i {
                assert_eq!(k[[i, j]], k[[j, i]]);
            }
        }
        let min_eig = *sym_evd(k.view()).unwrap().eigenvalues.last().unwrap();
        assert!(min_eig >= -1e-10, "min eigenvalue {min_eig}");
        let col = oracle.column(7);
        for i in 0..e.len() {
            assert_eq!(col[i], oracle.entry(i, 7));
        }
        let block = oracle.block(3..9, &[0, 5, 7]);
        for (a, i) in (3..9).enumerate() {
            for (b, &j) in [0usize, 5, 7].iter().enumerate() {
                assert_eq!(block[[a, b]], oracle.entry(i, j));
            }
        }
    }

    #[test]
    fn kernel_is_shift_equivariant() {
        let data = pseudo_random_dataset(12, 8);
        let shift = 3;
        let shifted = data.circular_shift(shift);
        let (q, m) = (4, 8);
        let cfg = GaussianKernelConfig::new(0.7, q).unwrap();
        let e0 = delay_embed(&data, q).unwrap();
        let e1 = delay_embed(&shifted, q).unwrap();
        let k0 = GaussianOracle::new(&e0, cfg).unwrap().to_dense();
        let k1 = GaussianOracle::new(&e1, cfg).unwrap().to_dense();
        let perm = |i: usize| (i / m) * m + (i % m + m - shift) % m;
        for i in 0..e0.len() {
            for j in 0..e0.len() {
                assert_eq!(k1[[i, j]], k0[[perm(i), perm(j)]]);
            }
        }
    }

    #[test]
    fn counting_oracle_counts_entries() {
        let oracle = CountingOracle::new(DenseOracle::new(Array2::eye(5)).unwrap());
        oracle.diagonal();
        oracle.column(2);
        oracle.entry(1, 1);
        assert_eq!(oracle.evaluations(), 11);
    }
}
