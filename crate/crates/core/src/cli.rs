//! Command-line front end: `run`, `validate` and `sweep`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{metrics_report, MetricsReport};
use crate::robot::{
    calibrate_uncertainty, frames, jacobian_from_frames, mass_matrix_from_frames, mass_matrix_partials, rnea,
    JointState, KinematicChain, UncertaintyBound, VecN,
};
use crate::simulator::{initial_state, run_scenario, EnergyLedger, Plant, ScenarioConfig, SimError, SimLog};
use crate::spatial::{MatMN, UnitQuaternion};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable read for the log filter.
pub const LOG_ENV: &str = "PHRI_LOG_LEVEL";

pub const ENERGY_TOLERANCE: f64 = 1e-6;
pub const SKEW_TOLERANCE: f64 = 1e-8;
pub const JACOBIAN_TOLERANCE: f64 = 1e-5;

/// Integration step of the free-fall energy audit (s).
pub const AUDIT_DT: f64 = 2.5e-4;

#[derive(Debug, Parser)]
#[command(name = "phri", version, about = "Hybrid force/velocity/attitude control simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write log.csv, metrics.json and meta.json.
    Run(RunArgs),
    /// Run the robot-model oracle suite and the uncertainty calibration.
    Validate(ValidateArgs),
    /// Run a grid of scenarios concurrently, one directory per run.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the integration step (s).
    #[arg(long)]
    pub dt: Option<f64>,
    /// Overrides the run length (s).
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of random states per oracle.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// One or more scenario files.
    #[arg(long, required = true, num_args = 1..)]
    pub config: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds to run for every config (default: the config's own seed).
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Step sizes to run for every config (default: the config's own dt).
    #[arg(long, value_delimiter = ',')]
    pub dt: Vec<f64>,
    #[arg(long)]
    pub duration: Option<f64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExitStatus {
    Success = 0,
    ConfigError = 1,
    Aborted = 2,
    OracleFailure = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_path_to_error::Error<serde_json::Error> },
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

/// Resolved request for one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub seed_override: Option<u64>,
    pub scenario: String,
    pub tool_version: String,
}

/// Reads a scenario file. Parse errors keep serde's field and line diagnostics.
pub fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    ScenarioConfig::from_json(&text).map_err(|source| CliError::Parse { path: path.to_path_buf(), source })
}

pub fn apply_overrides(cfg: &mut ScenarioConfig, seed: Option<u64>, dt: Option<f64>, duration: Option<f64>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = dt {
        cfg.dt = d;
    }
    if let Some(d) = duration {
        cfg.duration = d;
    }
}

/// What a finished `run` produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub metrics: MetricsReport,
    pub status: ExitStatus,
    pub abort_reason: Option<String>,
}

pub fn write_run(log: &SimLog, dir: &Path) -> Result<MetricsReport, CliError> {
    fs::create_dir_all(dir)?;
    log.write_csv(BufWriter::new(File::create(dir.join("log.csv"))?))?;
    log.write_meta(BufWriter::new(File::create(dir.join("meta.json"))?))?;
    let metrics = metrics_report(log);
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("metrics.json"))?), &metrics)
        .map_err(std::io::Error::from)?;
    Ok(metrics)
}

/// Runs an already-loaded scenario into `out`.
pub fn execute_run(cfg: &ScenarioConfig, manifest: RunManifest) -> Result<RunOutcome, CliError> {
    let (log, status, abort_reason) = match run_scenario(cfg) {
        Ok(log) => (log, ExitStatus::Success, None),
        Err(SimError::Aborted { source, log }) => (*log, ExitStatus::Aborted, Some(source.to_string())),
        Err(e) => return Err(e.into()),
    };
    let metrics = write_run(&log, &manifest.out_dir)?;
    Ok(RunOutcome { manifest, metrics, status, abort_reason })
}

pub fn cmd_run(args: &RunArgs) -> ExitStatus {
    let run = || -> Result<RunOutcome, CliError> {
        let mut cfg = load_config(&args.config)?;
        apply_overrides(&mut cfg, args.seed, args.dt, args.duration);
        cfg.validate()?;
        let manifest = RunManifest {
            config_path: args.config.clone(),
            out_dir: args.out.clone(),
            seed_override: args.seed,
            scenario: cfg.name.clone(),
            tool_version: TOOL_VERSION.to_string(),
        };
        execute_run(&cfg, manifest)
    };
    match run() {
        Ok(outcome) => {
            report_run(&outcome);
            outcome.status
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitStatus::ConfigError
        }
    }
}

fn report_run(o: &RunOutcome) {
    let m = &o.metrics;
    match &o.abort_reason {
        Some(r) => eprintln!("{}: aborted ({r}); partial log in {}", o.manifest.scenario, o.manifest.out_dir.display()),
        None => {
            print!("{}: W = {:.6} J, W_excess bound = {:.6} J", m.scenario, m.w, m.w_excess_bound);
            if let Some(s) = &m.steady {
                print!(", force err max = {:.4} N, quat err max = {:.4}", s.force_err_max, s.quat_err_max);
            }
            println!(" -> {}", o.manifest.out_dir.display());
        }
    }
}

/// One oracle residual against its tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleCheck {
    fn new(name: &str, residual: f64, tolerance: f64) -> Self {
        Self { name: name.into(), residual, tolerance, passed: residual.is_finite() && residual < tolerance }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    /// Random states drawn per oracle.
    pub samples: usize,
    pub checks: Vec<OracleCheck>,
    /// Structural problems reported by the chain itself.
    pub chain_issues: Vec<String>,
    pub calibrated_bound: Option<UncertaintyBound>,
    pub calibration_error: Option<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&OracleCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn random_state(chain: &KinematicChain, rng: &mut ChaCha8Rng) -> JointState {
    let q = VecN::from_iterator(chain.dof(), chain.joints.iter().map(|j| rng.random_range(j.limits[0]..j.limits[1])));
    let qdot = VecN::from_iterator(chain.dof(), (0..chain.dof()).map(|_| rng.random_range(-1.0..1.0)));
    JointState { q, qdot }
}

/// Largest `|q̇ᵀ(Ṁ − 2C)q̇|`, with `Ṁ` from the analytic mass-matrix partials
/// and `C q̇` from the Newton–Euler recursion.
pub fn skew_residual(chain: &KinematicChain, states: &[JointState]) -> f64 {
    let n = chain.dof();
    states
        .iter()
        .map(|s| {
            let f = frames(chain, &s.q);
            let partials = mass_matrix_partials(chain, &f);
            let mdot = partials.iter().zip(s.qdot.iter()).fold(MatMN::zeros(n, n), |acc, (p, &v)| acc + p * v);
            let cq = rnea(chain, &f, &s.qdot, &VecN::zeros(n), false);
            (s.qdot.dot(&(&mdot * &s.qdot)) - 2.0 * s.qdot.dot(&cq)).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest entry of `J − J_fd`, the finite-difference geometric Jacobian.
pub fn jacobian_fd_residual(chain: &KinematicChain, states: &[JointState]) -> f64 {
    let h = 1e-6;
    let n = chain.dof();
    let mut worst = 0.0f64;
    for s in states {
        let j = jacobian_from_frames(&frames(chain, &s.q));
        for k in 0..n {
            let mut qp = s.q.clone();
            let mut qm = s.q.clone();
            qp[k] += h;
            qm[k] -= h;
            let (fp, fm) = (frames(chain, &qp), frames(chain, &qm));
            let dp = (fp.ee_pos - fm.ee_pos) / (2.0 * h);
            let dr = fp.ee_rot * fm.ee_rot.transpose();
            let rel = UnitQuaternion::from_rotation(&dr);
            let dw = rel.v * (rel.w.signum() * 2.0 / (2.0 * h));
            let col = [dp.x, dp.y, dp.z, dw.x, dw.y, dw.z];
            for (r, c) in col.iter().enumerate() {
                worst = worst.max((j[(r, k)] - c).abs());
            }
        }
    }
    worst
}

/// Smallest eigenvalue of `M` over the states (positive iff definite everywhere).
pub fn min_mass_eigenvalue(chain: &KinematicChain, states: &[JointState]) -> f64 {
    states
        .iter()
        .map(|s| {
            let m = mass_matrix_from_frames(chain, &frames(chain, &s.q));
            (0.5 * (&m + m.transpose())).symmetric_eigenvalues().min()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Relative drift of `KE + PE` during an unforced, frictionless, contact-free
/// fall, normalised by the peak kinetic energy.
pub fn free_fall_energy_residual(chain: &KinematicChain, q0: &VecN, duration: f64, dt: f64) -> Result<f64, SimError> {
    let plant = Plant {
        chain: chain.clone(),
        friction: None,
        surface: None,
        env: crate::environment::EnvParams { k_e: 0.0, b_e: 0.0, damping_point: Default::default() },
        tool: crate::environment::EndToolGeometry { r_off: 0.03, r_r: 0.06 },
    };
    let tau = VecN::zeros(chain.dof());
    let mut state = JointState::rest(q0.clone());
    let mut ledger = EnergyLedger::default();
    let (k0, p0) = plant.mechanical_energy(&state);
    let e0 = k0 + p0;
    let (mut drift, mut peak) = (0.0f64, 0.0f64);
    for k in 0..(duration / dt).round() as usize {
        (state, ledger) = plant
            .rk4_step(&state, &ledger, &tau, dt)
            .map_err(|source| SimError::Plant { t: k as f64 * dt, source })?;
        let (ke, pe) = plant.mechanical_energy(&state);
        drift = drift.max((ke + pe - e0).abs());
        peak = peak.max(ke);
    }
    Ok(if peak > 0.0 { drift / peak } else { drift })
}

/// Runs the oracle suite for the chain, friction and model errors in `cfg`.
pub fn validate_config(cfg: &ScenarioConfig, samples: usize) -> ValidationReport {
    let chain = &cfg.chain;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let states: Vec<JointState> = (0..samples).map(|_| random_state(chain, &mut rng)).collect();
    let nominal = initial_state(cfg).map(|s| s.q).unwrap_or_else(|_| {
        VecN::from_iterator(chain.dof(), chain.joints.iter().map(|j| 0.5 * (j.limits[0] + j.limits[1]) + 0.3))
    });
    let energy = free_fall_energy_residual(chain, &nominal, 1.0, AUDIT_DT).unwrap_or(f64::INFINITY);
    let min_eig = min_mass_eigenvalue(chain, &states);
    let checks = vec![
        OracleCheck::new("energy_audit", energy, ENERGY_TOLERANCE),
        OracleCheck::new("skew_symmetry", skew_residual(chain, &states), SKEW_TOLERANCE),
        OracleCheck::new("jacobian_fd", jacobian_fd_residual(chain, &states), JACOBIAN_TOLERANCE),
        // Residual is the negated smallest eigenvalue, so it passes when M is definite.
        OracleCheck::new("mass_positive_definite", -min_eig, 0.0),
    ];
    let settings = cfg.calibration.as_ref().map(|c| c.settings.clone()).unwrap_or_default();
    let margin = cfg.calibration.as_ref().map_or(1.5, |c| c.margin);
    let mut cal_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let (calibrated_bound, calibration_error) =
        match calibrate_uncertainty(chain, cfg.friction.as_ref(), &cfg.model_errors, &nominal, &settings, &mut cal_rng) {
            Ok(b) => (Some(b.scaled(margin)), None),
            Err(e) => (None, Some(e.to_string())),
        };
    ValidationReport { samples, checks, chain_issues: chain.validate(), calibrated_bound, calibration_error }
}

pub fn cmd_validate(args: &ValidateArgs) -> ExitStatus {
    let mut cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitStatus::ConfigError;
        }
    };
    apply_overrides(&mut cfg, args.seed, None, None);
    let report = validate_config(&cfg, args.samples);
    for c in &report.checks {
        println!("{:<24} residual {:>12.3e}  tolerance {:>9.1e}  {}", c.name, c.residual, c.tolerance, if c.passed { "ok" } else { "FAIL" });
    }
    for issue in &report.chain_issues {
        println!("chain: {issue}");
    }
    match (&report.calibrated_bound, &report.calibration_error) {
        (Some(b), _) => println!("calibrated bound: b_D0 = {:.6}, b_D1 = {:.6}, b_D2 = {:.6} ({} samples)", b.b0, b.b1, b.b2, b.samples),
        (None, Some(e)) => println!("calibration failed: {e}"),
        _ => {}
    }
    if let Some(out) = &args.out {
        let write = || -> std::io::Result<()> {
            fs::create_dir_all(out)?;
            serde_json::to_writer_pretty(BufWriter::new(File::create(out.join("validate.json"))?), &report)?;
            Ok(())
        };
        if let Err(e) = write() {
            eprintln!("error: cannot write report: {e}");
            return ExitStatus::ConfigError;
        }
    }
    if report.passed() {
        ExitStatus::Success
    } else {
        ExitStatus::OracleFailure
    }
}

/// One cell of a sweep grid.
#[derive(Debug, Clone)]
pub struct SweepJob {
    pub cfg: ScenarioConfig,
    pub manifest: RunManifest,
}

pub fn sweep_jobs(args: &SweepArgs) -> Result<Vec<SweepJob>, CliError> {
    let mut jobs = Vec::new();
    for path in &args.config {
        let base = load_config(path)?;
        let seeds = if args.seed.is_empty() { vec![base.seed] } else { args.seed.clone() };
        let dts = if args.dt.is_empty() { vec![base.dt] } else { args.dt.clone() };
        for &seed in &seeds {
            for &dt in &dts {
                let mut cfg = base.clone();
                apply_overrides(&mut cfg, Some(seed), Some(dt), args.duration);
                cfg.validate()?;
                let dir = args.out.join(format!("{}_seed{}_dt{}", cfg.name, seed, dt));
                let manifest = RunManifest {
                    config_path: path.clone(),
                    out_dir: dir,
                    seed_override: Some(seed),
                    scenario: cfg.name.clone(),
                    tool_version: TOOL_VERSION.to_string(),
                };
                jobs.push(SweepJob { cfg, manifest });
            }
        }
    }
    Ok(jobs)
}

/// Runs every job on a pool of scoped threads; results keep the job order.
pub fn run_jobs(jobs: &[SweepJob], workers: usize) -> Vec<Result<RunOutcome, CliError>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunOutcome, CliError>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = execute_run(&job.cfg, job.manifest.clone());
                results.lock().expect("sweep result lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("sweep result lock").into_iter().map(|r| r.expect("every job ran")).collect()
}

pub fn cmd_sweep(args: &SweepArgs) -> ExitStatus {
    let jobs = match sweep_jobs(args) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitStatus::ConfigError;
        }
    };
    let workers = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut status = ExitStatus::Success;
    for r in run_jobs(&jobs, workers) {
        match r {
            Ok(o) => {
                report_run(&o);
                status = status.max(o.status);
            }
            Err(e) => {
                eprintln!("error: {e}");
                status = status.max(ExitStatus::ConfigError);
            }
        }
    }
    status
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

pub fn dispatch(cli: &Cli) -> ExitStatus {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}
