use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kevd::bistochastic::{dilution_evd_matrix, subsample_evd};
use kevd::io::{self, EigenSidecar, FactorSidecar};
use kevd::kernel::{delay_embed, GaussianKernelConfig};
use kevd::ks::{etdrk4_integrate, KsConfig, SpatiotemporalDataset};
use kevd::pipeline::{
    self, calibrate, dense_evd, factorize, project_states, run_experiment, Bandwidth, CalibrationConfig,
    ExperimentConfig, Method,
};
use kevd::{Error, Result};

/// Low-rank eigenfunctions of bistochastic kernels on Kuramoto-Sivashinsky data.
#[derive(Parser)]
#[command(name = "kevd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the KS equation and write dataset.bin / dataset.json.
    Simulate(SimulateArgs),
    /// Median rule plus scaling refinement; prints both bandwidths.
    Calibrate(CalibrateArgs),
    /// RPCholesky factor of the kernel; writes factor.bin / factor.json / pivots.csv.
    Factorize(FactorizeArgs),
    /// Eigenpairs by one method; writes eigenvectors_<method>.* and eigenvalues_<method>.csv.
    Evd(EvdArgs),
    /// Projects the training field onto persisted eigenvectors.
    Project(ProjectArgs),
    /// Full pipeline.
    Run(RunArgs),
    /// Rebuilds every table of a finished run from its persisted artifacts.
    Report(ReportArgs),
}

#[derive(Args)]
struct DirArg {
    /// Working directory holding the run's artifacts.
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    dir: DirArg,
    /// JSON file with KS settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_snapshots: Option<usize>,
    #[arg(long)]
    spinup_steps: Option<usize>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    dir: DirArg,
    #[arg(long, default_value_t = 64)]
    delays: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    median_subsample: Option<usize>,
    #[arg(long)]
    refine_states: Option<usize>,
}

#[derive(Args)]
struct FactorizeArgs {
    #[command(flatten)]
    dir: DirArg,
    #[arg(long, default_value_t = 64)]
    delays: usize,
    #[arg(long, default_value_t = 50.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 2048)]
    rank: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct EvdArgs {
    #[command(flatten)]
    dir: DirArg,
    #[arg(long)]
    method: Method,
    /// Replace the leading eigenvector by the constant vector
    /// (default: on for dilution, off otherwise).
    #[arg(long)]
    constant_leading: Option<bool>,
}

#[derive(Args)]
struct ProjectArgs {
    #[command(flatten)]
    dir: DirArg,
    #[arg(long)]
    method: Method,
    /// Number of leading eigenfunctions; all by default.
    #[arg(long)]
    truncation: Option<usize>,
    #[arg(long, default_value_t = 8)]
    export_eigenfunctions: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    seed: u64,
    /// Experiment config or a previous run's manifest.json.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// A number or "auto".
    #[arg(long)]
    epsilon: Option<Bandwidth>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    delays: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    truncation: Option<usize>,
    #[arg(long)]
    n_snapshots: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    dir: DirArg,
}

fn read_dataset(dir: &Path) -> Result<SpatiotemporalDataset> {
    io::read_dataset_bin(&dir.join("dataset.bin"))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut ks: KsConfig = match &args.config {
        Some(p) => io::read_json(p)?,
        None => KsConfig::default(),
    };
    if let Some(v) = args.n_snapshots {
        ks.n_snapshots = v;
    }
    if let Some(v) = args.spinup_steps {
        ks.spinup_steps = v;
    }
    if let Some(v) = args.modes {
        ks.modes = v;
    }
    if let Some(v) = args.dt {
        ks.dt = v;
    }
    let data = etdrk4_integrate(&ks)?;
    let dir = &args.dir.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    io::write_dataset_bin(&dir.join("dataset.bin"), &data)?;
    io::write_json(&dir.join("dataset.json"), &pipeline::dataset_sidecar(&data, &ks))?;
    println!("{} snapshots of {} points written to {}", data.n_snapshots(), data.n_space(), dir.display());
    Ok(())
}

fn calibrate_cmd(args: CalibrateArgs) -> Result<()> {
    let dir = &args.dir.dir;
    let data = read_dataset(dir)?;
    let embedded = delay_embed(&data, args.delays)?;
    let mut cfg = CalibrationConfig::default();
    if let Some(v) = args.median_subsample {
        cfg.median_subsample = v;
    }
    if let Some(v) = args.refine_states {
        cfg.refine_states = v;
    }
    let c = calibrate(&embedded, &cfg, args.seed)?;
    io::write_json(&dir.join("calibration.json"), &c)?;
    println!("median epsilon: {}", c.median);
    println!("refined epsilon: {}", c.refined);
    Ok(())
}

fn factorize_cmd(args: FactorizeArgs) -> Result<()> {
    let dir = &args.dir.dir;
    let data = read_dataset(dir)?;
    let embedded = delay_embed(&data, args.delays)?;
    let kernel = GaussianKernelConfig::new(args.epsilon, args.delays)?;
    let f = factorize(&embedded, kernel, args.rank, args.seed)?;
    io::write_matrix_bin(&dir.join("factor.bin"), f.factor.view(), &f.pivots)?;
    io::write_json(
        &dir.join("factor.json"),
        &FactorSidecar {
            n: f.n(),
            rank: f.rank(),
            seed: args.seed,
            epsilon: args.epsilon,
            delays: args.delays,
            rel_trace_error: f.rel_trace_error,
            truncated: f.truncated,
        },
    )?;
    io::write_pivots_csv(&dir.join("pivots.csv"), &f.pivots, embedded.n_space())?;
    println!("rank {} factor, relative trace error {}", f.rank(), f.rel_trace_error);
    if f.truncated {
        println!("residual vanished before the requested rank");
    }
    Ok(())
}

fn evd_cmd(args: EvdArgs) -> Result<()> {
    let dir = &args.dir.dir;
    let side: FactorSidecar = io::read_json(&dir.join("factor.json"))?;
    let kernel = GaussianKernelConfig::new(side.epsilon, side.delays)?;
    let (factor, pivots) = io::read_matrix_bin(&dir.join("factor.bin"))?;
    let constant = args.constant_leading.unwrap_or(args.method == Method::Dilution);
    let evd = match args.method {
        Method::Dilution => dilution_evd_matrix(factor.view(), constant)?,
        Method::Subsampling => {
            drop(factor);
            let data = read_dataset(dir)?;
            let embedded = delay_embed(&data, side.delays)?;
            subsample_evd(&embedded, &kernel, &pivots, constant)?
        }
        Method::Dense => {
            drop(factor);
            let data = read_dataset(dir)?;
            let embedded = delay_embed(&data, side.delays)?;
            let cap = ExperimentConfig::default().dense_cap;
            if embedded.len() > cap {
                return Err(Error::Config(format!(
                    "dense method needs N·M <= {cap} but N·M = {}",
                    embedded.len()
                )));
            }
            dense_evd(&embedded, kernel, side.rank)?
        }
    };
    let sidecar = EigenSidecar {
        method: args.method.name().into(),
        n: evd.eigenvectors.nrows(),
        count: evd.len(),
        rank: side.rank,
        seed: side.seed,
        epsilon: side.epsilon,
        delays: side.delays,
        eigenvalues: evd.eigenvalues.clone(),
    };
    pipeline::write_eigenpairs(dir, &evd, &pivots, &sidecar)?;
    println!("{} eigenpairs, leading eigenvalue {}", evd.len(), evd.eigenvalues[0]);
    Ok(())
}

fn project_cmd(args: ProjectArgs) -> Result<()> {
    let dir = &args.dir.dir;
    let data = read_dataset(dir)?;
    let (phi, _, side) = pipeline::read_eigenpairs(dir, args.method)?;
    let truncation = args.truncation.unwrap_or(phi.ncols());
    let report = project_states(args.method.name(), phi.view(), &data, side.delays, truncation)?;
    pipeline::write_projection_tables(dir, args.method, phi.view(), &report, args.export_eigenfunctions)?;
    println!("{} projection error ({} eigenfunctions): {}", args.method, truncation, report.rel_l2_error);
    Ok(())
}

fn run_cmd(args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.seed = args.seed;
    if let Some(v) = args.output_dir {
        cfg.output_dir = Some(v);
    }
    if let Some(v) = args.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = args.rank {
        cfg.rank = v;
    }
    if let Some(v) = args.delays {
        cfg.delays = v;
    }
    if let Some(v) = args.methods {
        cfg.methods = v;
    }
    if let Some(v) = args.truncation {
        cfg.truncation = Some(v);
    }
    if let Some(v) = args.n_snapshots {
        cfg.ks.n_snapshots = v;
    }
    let report = run_experiment(&cfg)?;
    if let Some(c) = &report.calibration {
        println!("median epsilon: {}", c.median);
        println!("refined epsilon: {}", c.refined);
    }
    println!("epsilon: {}", report.epsilon);
    println!("rank: {}", report.rank);
    println!("relative trace error: {}", report.rel_trace_error);
    for m in &report.methods {
        println!(
            "{} projection error ({} eigenfunctions): {}",
            m.method, m.projection.truncation, m.projection.rel_l2_error
        );
    }
    for s in &report.summary {
        let fmt = |o: Option<usize>| o.map_or("-".to_string(), |i| i.to_string());
        println!(
            "{} eigenvalues below 1e-1/1e-2/1e-3 from index: {} / {} / {}",
            s.method,
            fmt(s.below[0]),
            fmt(s.below[1]),
            fmt(s.below[2])
        );
    }
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let manifest = pipeline::regenerate_report(&args.dir.dir)?;
    println!("regenerated tables for {} methods", manifest.errors.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Factorize(a) => factorize_cmd(a),
        Command::Evd(a) => evd_cmd(a),
        Command::Project(a) => project_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
