use kevd::bistochastic::{dense_bistochastic, dilution_evd, subsample_evd_points};
use kevd::kernel::{delay_embed, gaussian_entry, DenseOracle, GaussianKernelConfig, GaussianOracle, KernelOracle};
use kevd::ks::{KsConfig, KsSolver, SpatiotemporalDataset};
use kevd::linalg::{matmul, matmul_nt, matmul_tn, qr_cgs2, svd_small, sym_evd, DenseMatrix};
use kevd::pipeline::project_states;
use kevd::rpcholesky::{column_nystrom, rpcholesky};
use ndarray::Array2;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Product of `count` Householder reflectors: orthogonal to rounding.
fn orthogonal(n: usize, count: usize, seed: u64) -> DenseMatrix {
    let v = uniform(count, n, seed);
    let mut q = Array2::<f64>::eye(n);
    for row in v.rows() {
        let nrm2: f64 = row.iter().map(|x| x * x).sum();
        // Q ← Q (I - 2 v vᵀ / vᵀv)
        let qv = q.dot(&row);
        for i in 0..n {
            for j in 0..n {
                q[[i, j]] -= 2.0 * qv[i] * row[j] / nrm2;
            }
        }
    }
    q
}

fn max_abs(a: &DenseMatrix) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn gaussian_kernel(points: &DenseMatrix, epsilon: f64) -> DenseMatrix {
    let cfg = GaussianKernelConfig::new(epsilon, points.ncols()).unwrap();
    GaussianOracle::from_points(points.view(), cfg).unwrap().to_dense()
}

fn field(n_time: usize, m: usize, seed: u64) -> SpatiotemporalDataset {
    SpatiotemporalDataset {
        snapshots: uniform(n_time, m, seed),
        length: 22.0,
        sample_dt: 1.0,
        start_time: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spd_spectrum_is_positive(n in 2usize..40, seed in any::<u64>()) {
        let g = uniform(n, n, seed);
        let mut a = matmul_nt(g.view(), g.view());
        for i in 0..n {
            a[[i, i]] += 1e-3;
        }
        let evd = sym_evd(a.view()).unwrap();
        prop_assert!(evd.eigenvalues.iter().all(|&l| l > 0.0));
        prop_assert!(evd.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn qr_stays_orthogonal_when_ill_conditioned(
        cols in 2usize..70,
        extra in 0usize..60,
        log_kappa in 0.0f64..12.0,
        seed in any::<u64>(),
    ) {
        let rows = cols + extra;
        let u = orthogonal(rows, 4, seed);
        let v = orthogonal(cols, 4, seed ^ 1);
        let mut us = u.slice(ndarray::s![.., ..cols]).to_owned();
        for j in 0..cols {
            let sigma = 10f64.powf(-log_kappa * j as f64 / (cols - 1) as f64);
            us.column_mut(j).mapv_inplace(|x| x * sigma);
        }
        let a = matmul_nt(us.view(), v.view());
        let qr = qr_cgs2(a.view()).unwrap();
        let gram = matmul_tn(qr.q.view(), qr.q.view()) - Array2::<f64>::eye(cols);
        prop_assert!(max_abs(&gram) < 1e-12, "orthogonality {}", max_abs(&gram));
        let rec = matmul(qr.q.view(), qr.r.view()) - &a;
        prop_assert!(max_abs(&rec) < 1e-12);
    }

    #[test]
    fn singular_values_square_to_gram_eigenvalues(rows in 1usize..40, cols in 1usize..20, seed in any::<u64>()) {
        let a = uniform(rows, cols, seed);
        let svd = svd_small(a.view()).unwrap();
        let evd = sym_evd(matmul_tn(a.view(), a.view()).view()).unwrap();
        let s1 = svd.singular_values[0];
        for (s, l) in svd.singular_values.iter().zip(&evd.eigenvalues) {
            prop_assert!((s * s - l).abs() <= 1e-9 * s1 * s1);
        }
    }

    #[test]
    fn kernel_symmetry_and_unit_diagonal(
        q in 1usize..12,
        eps in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        let pts = uniform(2, q, seed);
        let cfg = GaussianKernelConfig::new(eps, q).unwrap();
        let (a, b) = (pts.row(0).to_vec(), pts.row(1).to_vec());
        prop_assert_eq!(gaussian_entry(&a, &b, &cfg), gaussian_entry(&b, &a, &cfg));
        let oracle = GaussianOracle::from_points(pts.view(), cfg).unwrap();
        prop_assert!(oracle.diagonal().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn kernel_matrix_is_psd(n in 2usize..200, q in 1usize..6, eps in 0.01f64..10.0, seed in any::<u64>()) {
        let k = gaussian_kernel(&uniform(n, q, seed), eps);
        let evd = sym_evd(k.view()).unwrap();
        prop_assert!(*evd.eigenvalues.last().unwrap() >= -1e-10);
    }

    #[test]
    fn grid_shift_permutes_the_kernel(shift in 0usize..8, seed in any::<u64>()) {
        let data = field(12, 8, seed);
        let cfg = GaussianKernelConfig::new(0.7, 3).unwrap();
        let orig = GaussianOracle::new(&delay_embed(&data, 3).unwrap(), cfg).unwrap().to_dense();
        let moved = delay_embed(&data.circular_shift(shift), 3).unwrap();
        let shifted = GaussianOracle::new(&moved, cfg).unwrap().to_dense();
        // product state (n, m) moves to (n, m + shift)
        let perm = |i: usize| (i / 8) * 8 + (i % 8 + shift) % 8;
        for i in 0..orig.nrows() {
            for j in 0..orig.ncols() {
                prop_assert_eq!(shifted[[perm(i), perm(j)]], orig[[i, j]]);
            }
        }
    }

    #[test]
    fn partial_cholesky_is_column_nystrom(n in 2usize..120, r in 1usize..20, seed in any::<u64>()) {
        let r = r.min(n);
        let g = uniform(n, 25, seed);
        let a = matmul_nt(g.view(), g.view());
        let f = rpcholesky(&DenseOracle::new(a.clone()).unwrap(), r, seed).unwrap();
        prop_assert!(f.trace_history.windows(2).all(|w| w[1] <= w[0]));
        let diff = matmul_nt(f.factor.view(), f.factor.view()) - column_nystrom(&a, &f.pivots).unwrap();
        prop_assert!(max_abs(&diff) < 1e-8);
    }

    #[test]
    fn bistochastic_rows_and_spectrum(n in 3usize..150, q in 1usize..5, eps in 0.05f64..5.0, seed in any::<u64>()) {
        let pts = uniform(n, q, seed);
        let k = gaussian_kernel(&pts, eps);
        let p = dense_bistochastic(&k).unwrap();
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12 * n as f64);
        }
        let r = (n / 3).max(2);
        let f = rpcholesky(&DenseOracle::new(k).unwrap(), r, seed).unwrap();
        let cfg = GaussianKernelConfig::new(eps, q).unwrap();
        let outputs = [
            dilution_evd(&f, true),
            dilution_evd(&f, false),
            subsample_evd_points(pts.view(), &cfg, &f.pivots, false),
        ];
        let produced: Vec<_> = outputs.into_iter().flatten().collect();
        prop_assert!(!produced.is_empty());
        for evd in produced {
            prop_assert!(evd.eigenvalues.iter().all(|&l| (0.0..=1.0).contains(&l)));
            prop_assert!(evd.raw_eigenvalues.iter().all(|&l| l >= -1e-8 && l <= 1.0 + 1e-8));
            prop_assert!((evd.raw_eigenvalues[0] - 1.0).abs() < 1e-8);
            let c = evd.eigenvectors.column(0);
            let mean = c.mean().unwrap();
            prop_assert!(c.iter().all(|x| ((x - mean) / mean).abs() < 1e-6));
        }
    }

    #[test]
    fn ks_field_stays_real(amp in 0.01f64..1.0, phase in 0.0f64..6.28, steps in 1usize..200) {
        let cfg = KsConfig { spinup_steps: 0, ..KsConfig::default() };
        let mut solver = KsSolver::new(&cfg).unwrap();
        let mut v = cfg.initial_spectrum();
        v[3] = Complex64::from_polar(amp, phase);
        for _ in 0..steps {
            solver.step(&mut v);
            let (_, imag) = solver.grid().to_physical_checked(&v);
            prop_assert!(imag < 1e-10);
        }
    }

    #[test]
    fn projection_error_is_monotone(k in 1usize..30, seed in any::<u64>()) {
        let data = field(10, 6, seed);
        let n_states = 8 * 6;
        let k = k.min(n_states);
        let basis = orthogonal(n_states, 5, seed);
        let mut prev = f64::INFINITY;
        for t in 1..=k {
            let e = project_states("test", basis.view(), &data, 3, t).unwrap().rel_l2_error;
            prop_assert!(e <= prev + 1e-12);
            prev = e;
        }
    }
}
