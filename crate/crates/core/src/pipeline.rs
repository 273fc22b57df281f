//! End-to-end experiment: simulate, embed, calibrate, factor, decompose,
//! project, persist.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bistochastic::{dense_bistochastic, dilution_evd, fix_signs, subsample_evd, BistochasticEvd};
use crate::error::{Error, Result};
use crate::io;
use crate::kernel::{
    delay_embed, log_spaced, median_bandwidth, scaling_refine_bandwidth, DelayEmbeddedProductStates,
    GaussianKernelConfig, GaussianOracle, KernelOracle,
};
use crate::ks::{etdrk4_integrate, KsConfig, SpatiotemporalDataset};
use crate::linalg::{sym_evd, DenseMatrix};
use crate::rpcholesky::{rpcholesky, PartialCholeskyFactor};

/// Eigendecomposition routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dilution,
    Subsampling,
    Dense,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dilution, Method::Subsampling, Method::Dense];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dilution => "dilution",
            Method::Subsampling => "subsampling",
            Method::Dense => "dense",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Kernel bandwidth: a fixed value or `"auto"` for the two-stage
/// calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BandwidthRepr", into = "BandwidthRepr")]
pub enum Bandwidth {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BandwidthRepr {
    Fixed(f64),
    Keyword(String),
}

impl TryFrom<BandwidthRepr> for Bandwidth {
    type Error = String;

    fn try_from(r: BandwidthRepr) -> std::result::Result<Self, String> {
        match r {
            BandwidthRepr::Fixed(v) => Ok(Bandwidth::Fixed(v)),
            BandwidthRepr::Keyword(s) if s == "auto" => Ok(Bandwidth::Auto),
            BandwidthRepr::Keyword(s) => Err(format!("epsilon must be a number or \"auto\", got {s:?}")),
        }
    }
}

impl From<Bandwidth> for BandwidthRepr {
    fn from(b: Bandwidth) -> Self {
        match b {
            Bandwidth::Auto => BandwidthRepr::Keyword("auto".into()),
            Bandwidth::Fixed(v) => BandwidthRepr::Fixed(v),
        }
    }
}

impl FromStr for Bandwidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Bandwidth::Auto);
        }
        s.parse()
            .map(Bandwidth::Fixed)
            .map_err(|_| Error::Config(format!("epsilon must be a number or \"auto\", got {s:?}")))
    }
}

/// Settings of the median-rule plus scaling-refinement bandwidth search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Points drawn for the median rule.
    pub median_subsample: usize,
    /// States selected by RPCholesky for the refinement scan.
    pub refine_states: usize,
    pub grid_points: usize,
    /// The grid spans `[ε₀ / span, ε₀ · span]`.
    pub grid_span: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            median_subsample: 2048,
            refine_states: 8192,
            grid_points: 64,
            grid_span: 1e3,
        }
    }
}

/// Outcome of [`calibrate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub median: f64,
    pub refined: f64,
    pub refine_states: usize,
    pub grid: Vec<f64>,
    pub slopes: Vec<f64>,
}

/// Full description of a run. Every field has a default matching the
/// small reference experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub ks: KsConfig,
    pub delays: usize,
    pub epsilon: Bandwidth,
    pub rank: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Eigenfunctions used in the projection; all of them when absent.
    pub truncation: Option<usize>,
    pub output_dir: Option<PathBuf>,
    /// Largest state count for which the dense method is allowed.
    pub dense_cap: usize,
    pub calibration: CalibrationConfig,
    pub dilution_constant_leading: bool,
    pub subsampling_constant_leading: bool,
    /// Leading eigenfunctions written to the eigenfunction tables.
    pub export_eigenfunctions: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            ks: KsConfig::default(),
            delays: 64,
            epsilon: Bandwidth::Fixed(50.0),
            rank: 2048,
            seed: 0,
            methods: vec![Method::Dilution, Method::Subsampling],
            truncation: None,
            output_dir: None,
            dense_cap: 8000,
            calibration: CalibrationConfig::default(),
            dilution_constant_leading: true,
            subsampling_constant_leading: false,
            export_eigenfunctions: 8,
        }
    }
}

impl ExperimentConfig {
    /// Number of product states `N·M`.
    pub fn n_states(&self) -> usize {
        (self.ks.n_snapshots + 1).saturating_sub(self.delays) * self.ks.modes
    }

    pub fn validate(&self) -> Result<()> {
        self.ks.validate()?;
        if self.delays == 0 || self.delays > self.ks.n_snapshots {
            return Err(Error::Config(format!(
                "delays must lie in 1..={}, got {}",
                self.ks.n_snapshots, self.delays
            )));
        }
        let nm = self.n_states();
        if self.rank == 0 || self.rank > nm {
            return Err(Error::Config(format!("rank must lie in 1..={nm}, got {}", self.rank)));
        }
        if let Some(t) = self.truncation {
            if t == 0 || t > self.rank {
                return Err(Error::Config(format!(
                    "truncation must lie in 1..={}, got {t}",
                    self.rank
                )));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        let unique: HashSet<_> = self.methods.iter().collect();
        if unique.len() != self.methods.len() {
            return Err(Error::Config("methods listed twice".into()));
        }
        if self.methods.contains(&Method::Dense) && nm > self.dense_cap {
            return Err(Error::Config(format!(
                "dense method needs N·M <= {} but N·M = {nm}",
                self.dense_cap
            )));
        }
        if let Bandwidth::Fixed(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config(format!("epsilon must be positive, got {e}")));
            }
        }
        let c = &self.calibration;
        if c.median_subsample < 2 || c.refine_states == 0 || c.grid_points < 3 || !(c.grid_span > 1.0) {
            return Err(Error::Config("invalid calibration settings".into()));
        }
        Ok(())
    }

    /// Reads a config file. A run manifest is accepted as well, in which
    /// case its recorded config is used.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let value: serde_json::Value = io::read_json(path)?;
        let inner = match value.get("config") {
            Some(c) if value.get("manifest_version").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(inner).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn stage_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Two-stage bandwidth selection: the median rule gives `ε₀`, then the
/// kernel-sum scaling scan over RPCholesky-selected states refines it.
pub fn calibrate(embedded: &DelayEmbeddedProductStates, cfg: &CalibrationConfig, seed: u64) -> Result<Calibration> {
    let median = median_bandwidth(embedded, cfg.median_subsample, stage_seed(seed, 1))?;
    let kernel = GaussianKernelConfig::new(median, embedded.delays())?;
    let states = cfg.refine_states.min(embedded.len());
    let factor = factorize(embedded, kernel, states, stage_seed(seed, 2))?;
    let points = embedded.select(&factor.pivots);
    drop(factor);
    let grid = log_spaced(median / cfg.grid_span, median * cfg.grid_span, cfg.grid_points);
    let scan = scaling_refine_bandwidth(points.view(), &grid)?;
    Ok(Calibration {
        median,
        refined: scan.selected,
        refine_states: points.nrows(),
        grid: scan.grid,
        slopes: scan.slopes,
    })
}

/// RPCholesky of the Gaussian kernel over all product states.
pub fn factorize(
    embedded: &DelayEmbeddedProductStates,
    kernel: GaussianKernelConfig,
    rank: usize,
    seed: u64,
) -> Result<PartialCholeskyFactor> {
    let oracle = GaussianOracle::new(embedded, kernel)?;
    rpcholesky(&oracle, rank, seed)
}

/// Leading `count` eigenpairs of the dense bistochastic kernel.
pub fn dense_evd(embedded: &DelayEmbeddedProductStates, kernel: GaussianKernelConfig, count: usize) -> Result<BistochasticEvd> {
    let k = GaussianOracle::new(embedded, kernel)?.to_dense();
    let p = dense_bistochastic(&k)?;
    drop(k);
    let evd = sym_evd(p.view())?;
    let count = count.min(evd.eigenvalues.len());
    let mut phi = evd.eigenvectors.slice(ndarray::s![.., ..count]).to_owned();
    fix_signs(&mut phi);
    let raw = evd.eigenvalues[..count].to_vec();
    Ok(BistochasticEvd {
        eigenvectors: phi,
        eigenvalues: raw.iter().map(|x| x.clamp(0.0, 1.0)).collect(),
        raw_eigenvalues: raw,
    })
}

/// The `N` snapshots aligned with the product states: indices
/// `Q-1 ..= Q-1+N-1`.
pub fn aligned_snapshots(data: &SpatiotemporalDataset, delays: usize) -> Result<SpatiotemporalDataset> {
    if delays == 0 || delays > data.n_snapshots() {
        return Err(Error::Size(format!(
            "{delays} delays requested from {} snapshots",
            data.n_snapshots()
        )));
    }
    Ok(SpatiotemporalDataset {
        snapshots: data.snapshots.slice(ndarray::s![delays - 1.., ..]).to_owned(),
        length: data.length,
        sample_dt: data.sample_dt,
        start_time: data.time(delays - 1),
    })
}

/// Relative projection error of the training field onto leading
/// eigenfunctions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionReport {
    pub method: String,
    /// `‖u - Φ_t Φ_tᵀ u‖ / ‖u‖` over the flattened field.
    pub rel_l2_error: f64,
    pub truncation: usize,
    pub projected_field: SpatiotemporalDataset,
}

/// Projects the aligned snapshots, flattened as `u[n·M + m]`, onto the span
/// of the first `truncation` eigenvectors.
///
/// Sums run in a fixed order independent of how `Φ` is stored, so the
/// result is reproducible from a persisted eigenvector file.
pub fn project_states(
    method: &str,
    eigenvectors: ArrayView2<'_, f64>,
    data: &SpatiotemporalDataset,
    delays: usize,
    truncation: usize,
) -> Result<ProjectionReport> {
    let aligned = aligned_snapshots(data, delays)?;
    let m = aligned.n_space();
    let n_states = aligned.n_snapshots() * m;
    if eigenvectors.nrows() != n_states {
        return Err(Error::Size(format!(
            "eigenvectors have {} rows but the dataset has {n_states} product states",
            eigenvectors.nrows()
        )));
    }
    if truncation == 0 || truncation > eigenvectors.ncols() {
        return Err(Error::Size(format!(
            "truncation {truncation} outside 1..={}",
            eigenvectors.ncols()
        )));
    }
    let u: Vec<f64> = aligned.snapshots.iter().copied().collect();
    let coeffs: Vec<f64> = (0..truncation)
        .into_par_iter()
        .map(|k| (0..n_states).map(|i| eigenvectors[[i, k]] * u[i]).sum())
        .collect();
    let projected: Vec<f64> = (0..n_states)
        .into_par_iter()
        .map(|i| (0..truncation).map(|k| eigenvectors[[i, k]] * coeffs[k]).sum())
        .collect();
    let norm_u = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_e = u
        .iter()
        .zip(&projected)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if norm_u == 0.0 {
        return Err(Error::DegenerateData("training field is identically zero".into()));
    }
    Ok(ProjectionReport {
        method: method.to_owned(),
        rel_l2_error: norm_e / norm_u,
        truncation,
        projected_field: SpatiotemporalDataset {
            snapshots: Array2::from_shape_vec((aligned.n_snapshots(), m), projected).expect("sizes match"),
            ..aligned
        },
    })
}

pub const DECAY_THRESHOLDS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Decay diagnostics of one eigenvalue sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySummary {
    pub method: String,
    pub count: usize,
    pub lambda_0: f64,
    /// First index with `λ < threshold`, per entry of [`DECAY_THRESHOLDS`].
    pub below: [Option<usize>; 3],
}

pub fn eigenvalue_report(results: &[(&str, &[f64])]) -> Vec<DecaySummary> {
    results
        .iter()
        .map(|(method, lambda)| DecaySummary {
            method: (*method).to_owned(),
            count: lambda.len(),
            lambda_0: lambda.first().copied().unwrap_or(f64::NAN),
            below: DECAY_THRESHOLDS.map(|t| lambda.iter().position(|&l| l < t)),
        })
        .collect()
}

/// Per-method outcome kept after a run. Eigenvectors are only persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: Method,
    pub eigenvalues: Vec<f64>,
    pub raw_eigenvalues: Vec<f64>,
    pub projection: ProjectionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub method: String,
    pub truncation: usize,
    pub rel_l2_error: f64,
}

/// Everything needed to reproduce and audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub package_version: String,
    pub config: ExperimentConfig,
    pub epsilon: f64,
    pub calibration: Option<Calibration>,
    pub n_states: usize,
    pub rank: usize,
    pub truncated: bool,
    pub rel_trace_error: f64,
    pub errors: Vec<ErrorRecord>,
    pub summary: Vec<DecaySummary>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub dataset: SpatiotemporalDataset,
    pub epsilon: f64,
    pub calibration: Option<Calibration>,
    pub pivots: Vec<usize>,
    pub rank: usize,
    pub truncated: bool,
    pub rel_trace_error: f64,
    pub trace_history: Vec<f64>,
    pub methods: Vec<MethodOutcome>,
    pub summary: Vec<DecaySummary>,
    pub manifest: Manifest,
}

impl ExperimentReport {
    pub fn method(&self, method: Method) -> Option<&MethodOutcome> {
        self.methods.iter().find(|m| m.method == method)
    }
}

fn file_name(stem: &str, method: Method, ext: &str) -> String {
    format!("{stem}_{method}.{ext}")
}

/// Writes eigenvectors (binary plus sidecar) and the eigenvalue table.
pub fn write_eigenpairs(dir: &Path, evd: &BistochasticEvd, pivots: &[usize], sidecar: &io::EigenSidecar) -> Result<Vec<String>> {
    let method: Method = sidecar.method.parse()?;
    let names = [
        file_name("eigenvectors", method, "bin"),
        file_name("eigenvectors", method, "json"),
        file_name("eigenvalues", method, "csv"),
    ];
    io::write_matrix_bin(&dir.join(&names[0]), evd.eigenvectors.view(), pivots)?;
    io::write_json(&dir.join(&names[1]), sidecar)?;
    io::write_eigenvalues_csv(&dir.join(&names[2]), &evd.eigenvalues)?;
    Ok(names.to_vec())
}

/// Reads back what [`write_eigenpairs`] wrote.
pub fn read_eigenpairs(dir: &Path, method: Method) -> Result<(DenseMatrix, Vec<usize>, io::EigenSidecar)> {
    let (phi, pivots) = io::read_matrix_bin(&dir.join(file_name("eigenvectors", method, "bin")))?;
    let side: io::EigenSidecar = io::read_json(&dir.join(file_name("eigenvectors", method, "json")))?;
    if side.n != phi.nrows() || side.count != phi.ncols() {
        return Err(Error::Format {
            path: dir.join(file_name("eigenvectors", method, "json")),
            reason: "sidecar does not match the eigenvector file".into(),
        });
    }
    Ok((phi, pivots, side))
}

/// Writes the projected field and the leading eigenfunctions. These depend
/// only on the eigenvectors and the dataset, so a run and a later report
/// produce identical bytes.
pub fn write_projection_tables(
    dir: &Path,
    method: Method,
    eigenvectors: ArrayView2<'_, f64>,
    projection: &ProjectionReport,
    export: usize,
) -> Result<Vec<String>> {
    let aligned = &projection.projected_field;
    let times: Vec<f64> = (0..aligned.n_snapshots()).map(|n| aligned.time(n)).collect();
    let names = [
        file_name("field", method, "csv"),
        file_name("eigenfunctions", method, "csv"),
        file_name("projection", method, "bin"),
    ];
    io::write_field_csv(&dir.join(&names[0]), aligned)?;
    io::write_eigenfunctions_csv(&dir.join(&names[1]), eigenvectors, export, &times, &aligned.grid())?;
    io::write_dataset_bin(&dir.join(&names[2]), aligned)?;
    Ok(names.to_vec())
}

fn write_summary_tables(dir: &Path, errors: &[ErrorRecord], rel_trace_error: f64, summary: &[DecaySummary]) -> Result<Vec<String>> {
    let fmt_opt = |o: Option<usize>| o.map(|i| i.to_string()).unwrap_or_default();
    io::write_table(
        &dir.join("errors.csv"),
        &io::ERROR_COLUMNS,
        errors.iter().map(|e| {
            [
                e.method.clone(),
                e.truncation.to_string(),
                e.rel_l2_error.to_string(),
                rel_trace_error.to_string(),
            ]
        }),
    )?;
    io::write_table(
        &dir.join("eigenvalue_summary.csv"),
        &io::SUMMARY_COLUMNS,
        summary.iter().map(|s| {
            [
                s.method.clone(),
                s.count.to_string(),
                s.lambda_0.to_string(),
                fmt_opt(s.below[0]),
                fmt_opt(s.below[1]),
                fmt_opt(s.below[2]),
            ]
        }),
    )?;
    Ok(vec!["errors.csv".into(), "eigenvalue_summary.csv".into()])
}

fn persist_stage<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at("persist"))
}

/// Runs the configured experiment. When `output_dir` is set, every
/// artifact and a manifest are written there.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut files = Vec::new();

    let data = etdrk4_integrate(&cfg.ks).map_err(|e| e.at("simulate"))?;
    if let Some(d) = dir {
        persist_stage(io::write_dataset_bin(&d.join("dataset.bin"), &data))?;
        persist_stage(io::write_json(&d.join("dataset.json"), &dataset_sidecar(&data, &cfg.ks)))?;
        let truth = aligned_snapshots(&data, cfg.delays)?;
        persist_stage(io::write_field_csv(&d.join("field_truth.csv"), &truth))?;
        files.extend(["dataset.bin", "dataset.json", "field_truth.csv"].map(String::from));
    }
    let embedded = delay_embed(&data, cfg.delays).map_err(|e| e.at("embed"))?;

    let calibration = match cfg.epsilon {
        Bandwidth::Auto => Some(calibrate(&embedded, &cfg.calibration, cfg.seed).map_err(|e| e.at("calibrate"))?),
        Bandwidth::Fixed(_) => None,
    };
    let epsilon = match (cfg.epsilon, &calibration) {
        (Bandwidth::Fixed(e), _) => e,
        (Bandwidth::Auto, Some(c)) => c.refined,
        (Bandwidth::Auto, None) => unreachable!("calibration ran"),
    };
    if let (Some(d), Some(c)) = (dir, &calibration) {
        persist_stage(io::write_json(&d.join("calibration.json"), c))?;
        files.push("calibration.json".into());
    }
    let kernel = GaussianKernelConfig::new(epsilon, cfg.delays)?;

    let needs_factor = cfg.methods.iter().any(|m| *m != Method::Dense);
    let mut factor = if needs_factor {
        Some(factorize(&embedded, kernel, cfg.rank, cfg.seed).map_err(|e| e.at("rpcholesky"))?)
    } else {
        None
    };
    let (pivots, rank, truncated, rel_trace_error, trace_history) = match &factor {
        Some(f) => (f.pivots.clone(), f.rank(), f.truncated, f.rel_trace_error, f.trace_history.clone()),
        None => (Vec::new(), cfg.rank, false, f64::NAN, Vec::new()),
    };
    if let (Some(d), Some(f)) = (dir, &factor) {
        persist_stage(io::write_matrix_bin(&d.join("factor.bin"), f.factor.view(), &f.pivots))?;
        persist_stage(io::write_json(
            &d.join("factor.json"),
            &io::FactorSidecar {
                n: f.n(),
                rank: f.rank(),
                seed: cfg.seed,
                epsilon,
                delays: cfg.delays,
                rel_trace_error: f.rel_trace_error,
                truncated: f.truncated,
            },
        ))?;
        persist_stage(io::write_pivots_csv(&d.join("pivots.csv"), &f.pivots, embedded.n_space()))?;
        files.extend(["factor.bin", "factor.json", "pivots.csv"].map(String::from));
    }

    // dilution first so the factor can be released before the others
    let mut order = cfg.methods.clone();
    order.sort_by_key(|m| match m {
        Method::Dilution => 0,
        Method::Subsampling => 1,
        Method::Dense => 2,
    });
    let mut outcomes = Vec::new();
    for method in order {
        let evd = match method {
            Method::Dilution => {
                let f = factor.as_ref().expect("factor computed");
                dilution_evd(f, cfg.dilution_constant_leading)
            }
            Method::Subsampling => {
                factor = None;
                subsample_evd(&embedded, &kernel, &pivots, cfg.subsampling_constant_leading)
            }
            Method::Dense => {
                factor = None;
                dense_evd(&embedded, kernel, rank)
            }
        }
        .map_err(|e| e.at(method.name()))?;
        let truncation = cfg.truncation.unwrap_or(evd.len()).min(evd.len());
        let projection = project_states(method.name(), evd.eigenvectors.view(), &data, cfg.delays, truncation)
            .map_err(|e| e.at("project"))?;
        if let Some(d) = dir {
            let sidecar = io::EigenSidecar {
                method: method.name().into(),
                n: evd.eigenvectors.nrows(),
                count: evd.len(),
                rank,
                seed: cfg.seed,
                epsilon,
                delays: cfg.delays,
                eigenvalues: evd.eigenvalues.clone(),
            };
            files.extend(persist_stage(write_eigenpairs(d, &evd, &pivots, &sidecar))?);
            files.extend(persist_stage(write_projection_tables(
                d,
                method,
                evd.eigenvectors.view(),
                &projection,
                cfg.export_eigenfunctions,
            ))?);
        }
        outcomes.push(MethodOutcome {
            method,
            eigenvalues: evd.eigenvalues,
            raw_eigenvalues: evd.raw_eigenvalues,
            projection,
        });
    }
    drop(factor);

    let errors: Vec<ErrorRecord> = outcomes
        .iter()
        .map(|o| ErrorRecord {
            method: o.method.name().into(),
            truncation: o.projection.truncation,
            rel_l2_error: o.projection.rel_l2_error,
        })
        .collect();
    let named: Vec<(&str, &[f64])> = outcomes
        .iter()
        .map(|o| (o.method.name(), o.eigenvalues.as_slice()))
        .collect();
    let summary = eigenvalue_report(&named);
    if let Some(d) = dir {
        files.extend(persist_stage(write_summary_tables(d, &errors, rel_trace_error, &summary))?);
        files.push("manifest.json".into());
    }

    let manifest = Manifest {
        manifest_version: 1,
        package_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        epsilon,
        calibration: calibration.clone(),
        n_states: embedded.len(),
        rank,
        truncated,
        rel_trace_error,
        errors,
        summary: summary.clone(),
        files,
    };
    if let Some(d) = dir {
        persist_stage(io::write_json(&d.join("manifest.json"), &manifest))?;
    }

    Ok(ExperimentReport {
        dataset: data,
        epsilon,
        calibration,
        pivots,
        rank,
        truncated,
        rel_trace_error,
        trace_history,
        methods: outcomes,
        summary,
        manifest,
    })
}

pub fn dataset_sidecar(data: &SpatiotemporalDataset, ks: &KsConfig) -> io::DatasetSidecar {
    io::DatasetSidecar {
        n_snapshots: data.n_snapshots(),
        n_space: data.n_space(),
        length: data.length,
        sample_dt: data.sample_dt,
        start_time: data.start_time,
        ks: ks.clone(),
    }
}

/// Rebuilds every table of a finished run from its persisted dataset,
/// eigenvector files and manifest.
pub fn regenerate_report(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = io::read_json(&dir.join("manifest.json"))?;
    let data = io::read_dataset_bin(&dir.join("dataset.bin"))?;
    let cfg = &manifest.config;
    let truth = aligned_snapshots(&data, cfg.delays)?;
    io::write_field_csv(&dir.join("field_truth.csv"), &truth)?;

    let mut errors = Vec::new();
    let mut eigenvalues = Vec::new();
    for rec in &manifest.errors {
        let method: Method = rec.method.parse()?;
        let (phi, pivots, side) = read_eigenpairs(dir, method)?;
        if !pivots.is_empty() {
            io::write_pivots_csv(&dir.join("pivots.csv"), &pivots, data.n_space())?;
        }
        let projection = project_states(method.name(), phi.view(), &data, cfg.delays, rec.truncation)?;
        io::write_eigenvalues_csv(&dir.join(file_name("eigenvalues", method, "csv")), &side.eigenvalues)?;
        write_projection_tables(dir, method, phi.view(), &projection, cfg.export_eigenfunctions)?;
        errors.push(ErrorRecord {
            method: rec.method.clone(),
            truncation: rec.truncation,
            rel_l2_error: projection.rel_l2_error,
        });
        eigenvalues.push((rec.method.clone(), side.eigenvalues));
    }
    let named: Vec<(&str, &[f64])> = eigenvalues.iter().map(|(m, l)| (m.as_str(), l.as_slice())).collect();
    let summary = eigenvalue_report(&named);
    write_summary_tables(dir, &errors, manifest.rel_trace_error, &summary)?;
    Ok(manifest)
}
