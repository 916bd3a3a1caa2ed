//! Command-line front end: `simulate`, `gradcheck`, `dualcheck`, `optimize`
//! and `replay`.
//!
//! Every run writes `manifest.json` next to its CSV outputs. The manifest is
//! the only file that carries a timestamp; `replay` re-executes it.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adjoint::duality_check;
use crate::config::ProblemConfig;
use crate::dynamics::{energy, solve_forward, SolveOptions, StoragePolicy};
use crate::error::{Error, Result};
use crate::model::Problem;
use crate::optimizer::{fd_directional_derivative, gradient, optimize, OptimizeOptions};
use crate::paths::Ensemble;
use crate::probes::{bump_source, control_pair};
use crate::space::snapshot::write_field;

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "SNLS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "snls", version, about = "Optimal bilinear control of a stochastic NLS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Forward solves on an ensemble; per-path diagnostics.
    Simulate(SimulateArgs),
    /// Adjoint gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Duality residual over successive time-step halvings.
    Dualcheck(DualcheckArgs),
    /// Projected gradient descent on the sample-average cost.
    Optimize(OptimizeArgs),
    /// Re-runs a recorded manifest into a new output directory.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct Common {
    /// Problem file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Number of Monte-Carlo paths (ignored without noise).
    #[arg(long)]
    paths: Option<usize>,
    /// Time step; must divide the horizon.
    #[arg(long)]
    dt: Option<f64>,
    /// Overrides `noise.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    #[serde(skip)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "snls-out")]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Write each path's final state as a field snapshot.
    #[arg(long)]
    snapshots: bool,
    /// Write each path's Brownian increments.
    #[arg(long)]
    dump_paths: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Number of random direction pairs.
    #[arg(long, default_value_t = 5)]
    directions: usize,
    /// Finite-difference steps, largest first.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1e-2, 5e-3, 2.5e-3])]
    eps: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct DualcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Number of time steps in the halving study.
    #[arg(long, default_value_t = 3)]
    levels: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct OptimizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// PMP residual target; defaults to 1e-3 times the diameter of U.
    #[arg(long)]
    tol: Option<f64>,
    /// Initial step size.
    #[arg(long, default_value_t = 1.0)]
    rho0: f64,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "snls-replay")]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

/// Everything needed to reproduce a run, written as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub created_unix: u64,
    pub config_path: PathBuf,
    /// The config file's text at run time.
    pub config_text: String,
    pub seed: u64,
    pub paths: usize,
    pub dt: f64,
    pub threads: usize,
    run: RunSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
enum RunSpec {
    Simulate(SimulateArgs),
    Gradcheck(GradcheckArgs),
    Dualcheck(DualcheckArgs),
    Optimize(OptimizeArgs),
}

impl RunSpec {
    fn common(&self) -> &Common {
        match self {
            RunSpec::Simulate(a) => &a.common,
            RunSpec::Gradcheck(a) => &a.common,
            RunSpec::Dualcheck(a) => &a.common,
            RunSpec::Optimize(a) => &a.common,
        }
    }

    fn common_mut(&mut self) -> &mut Common {
        match self {
            RunSpec::Simulate(a) => &mut a.common,
            RunSpec::Gradcheck(a) => &mut a.common,
            RunSpec::Dualcheck(a) => &mut a.common,
            RunSpec::Optimize(a) => &mut a.common,
        }
    }
}

/// Resolved inputs shared by all subcommands.
struct Setup {
    config: ProblemConfig,
    config_text: String,
    problem: Problem,
    dt: f64,
    steps: usize,
    seed: u64,
    ensemble: Ensemble,
}

impl Setup {
    fn new(common: &Common) -> Result<Self> {
        let config_text = fs::read_to_string(&common.config)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", common.config.display())))?;
        let dir = common.config.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut config = ProblemConfig::from_toml_str(&config_text, dir)?;
        if let Some(s) = common.seed {
            config.noise.seed = s;
        }
        let dt = common
            .dt
            .or(config.default_dt())
            .ok_or_else(|| Error::invalid("dt", "give --dt or set control.dt"))?;
        let problem = config.build(dt)?;
        let steps = problem.steps_for(dt)?;
        let ensemble = if problem.noise.is_off() {
            Ensemble::deterministic(steps, dt)
        } else {
            let m = common.paths.or(config.control.paths).unwrap_or(16);
            Ensemble::sample(&problem.noise, steps, dt, m, 0)?
        };
        Ok(Setup {
            seed: config.noise.seed,
            config,
            config_text,
            problem,
            dt,
            steps,
            ensemble,
        })
    }
}

fn thread_count(flag: Option<usize>) -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        return v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::invalid(THREADS_ENV, format!("expected a positive integer, got `{v}`")));
    }
    match flag {
        Some(0) => Err(Error::invalid("threads", "must be at least 1")),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn write_manifest(dir: &Path, setup: &Setup, run: &RunSpec, threads: usize) -> Result<()> {
    let created_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let config_path = fs::canonicalize(&run.common().config).unwrap_or_else(|_| run.common().config.clone());
    let mut run = run.clone();
    // Pin the resolved values so a replay does not depend on defaults.
    let c = run.common_mut();
    c.config = config_path.clone();
    c.dt = Some(setup.dt);
    c.seed = Some(setup.seed);
    c.paths = Some(setup.ensemble.len());
    let manifest = Manifest {
        tool: "snls".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        created_unix,
        config_path,
        config_text: setup.config_text.clone(),
        seed: setup.seed,
        paths: setup.ensemble.len(),
        dt: setup.dt,
        threads,
        run,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_out(dir, "manifest.json", &json)
}

fn simulate(a: &SimulateArgs, s: &Setup, out: &Path) -> Result<()> {
    use rayon::prelude::*;
    let u = s.config.initial_control(s.steps, s.dt)?;
    let records = s
        .ensemble
        .paths()
        .par_iter()
        .map(|p| solve_forward(&s.problem.initial, &u, p, &s.problem, s.dt, SolveOptions { storage: StoragePolicy::Endpoints, diagnostics: true }))
        .collect::<Result<Vec<_>>>()?;
    let mut summary = String::from("path,max_mass_drift,final_mass,final_energy\n");
    for (i, rec) in records.iter().enumerate() {
        let xt = rec.final_state();
        writeln!(
            summary,
            "{i},{:e},{},{}",
            rec.max_mass_drift(),
            xt.mass(),
            energy(xt, &s.problem.physics)
        )
        .expect("write to String");
        write_out(out, &format!("diagnostics_{i}.csv"), &rec.diagnostics_csv()?)?;
        if a.snapshots {
            write_field(&out.join(format!("final_{i}.field")), xt)?;
        }
        if a.dump_paths {
            write_out(out, &format!("path_{i}.csv"), &rec.path().to_csv())?;
        }
    }
    write_out(out, "summary.csv", &summary)?;
    write_out(out, "control.csv", &u.to_csv())?;
    let worst = records.iter().map(|r| r.max_mass_drift()).fold(0.0, f64::max);
    println!("simulated {} path(s), {} steps; max relative mass drift {worst:e}", records.len(), s.steps);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, s: &Setup, out: &Path) -> Result<()> {
    if a.directions == 0 {
        return Err(Error::invalid("directions", "must be at least 1"));
    }
    let mut table = String::from("direction,eps,central,extrapolated,adjoint,rel_error\n");
    let mut worst: f64 = 0.0;
    for d in 0..a.directions {
        let (u, du) = control_pair(s.seed, d as u64, &s.problem.admissible, s.steps, s.dt)?;
        let adjoint = gradient(&u, &s.ensemble, &s.problem, s.dt)?.directional(&du);
        let fd = fd_directional_derivative(&u, &du, &a.eps, &s.ensemble, &s.problem, s.dt)?;
        let rel_error = |fd_value: f64| (fd_value - adjoint).abs() / (1.0 + fd_value.abs());
        for row in &fd.rows {
            let rel = rel_error(row.extrapolated.unwrap_or(row.central));
            let ext = row.extrapolated.map(|v| v.to_string()).unwrap_or_default();
            writeln!(table, "{d},{},{},{ext},{adjoint},{rel:e}", row.eps, row.central).expect("write to String");
        }
        worst = worst.max(rel_error(fd.estimate));
    }
    print!("{table}");
    write_out(out, "gradcheck.csv", &table)?;
    eprintln!("max extrapolated relative error {worst:e}");
    Ok(())
}

fn dualcheck(a: &DualcheckArgs, s: &Setup, out: &Path) -> Result<()> {
    if a.levels == 0 {
        return Err(Error::invalid("levels", "must be at least 1"));
    }
    let mut table = String::from("dt,lambda,pairing,residual,ratio\n");
    let mut previous: Option<f64> = None;
    for level in 0..a.levels {
        let factor = 1usize << level;
        let dt = s.dt / factor as f64;
        let problem = if level == 0 { s.problem.clone() } else { s.config.build(dt)? };
        let steps = s.steps * factor;
        let ensemble = if level == 0 { s.ensemble.clone() } else { s.ensemble.refined(factor)? };
        let u = s.config.initial_control(steps, dt)?;
        let source = bump_source(s.seed, &problem, steps, dt);
        let r = duality_check(&u, &source, &ensemble, &problem, dt)?;
        let ratio = previous.map(|p| (p / r.residual).to_string()).unwrap_or_default();
        writeln!(table, "{dt},{},{},{:e},{ratio}", r.lambda, r.pairing, r.residual).expect("write to String");
        previous = Some(r.residual);
    }
    print!("{table}");
    write_out(out, "dualcheck.csv", &table)
}

fn run_optimize(a: &OptimizeArgs, s: &Setup, out: &Path) -> Result<()> {
    s.config.require_gamma2()?;
    if let Some(t) = a.tol {
        if !(t > 0.0) {
            return Err(Error::invalid("tol", format!("must be > 0, got {t}")));
        }
    }
    let u0 = s.config.initial_control(s.steps, s.dt)?;
    let opts = OptimizeOptions {
        max_iters: a.max_iters,
        tol: a.tol,
        rho0: a.rho0,
        ..OptimizeOptions::default()
    };
    let state = optimize(&u0, &s.ensemble, &s.problem, s.dt, opts)?;
    write_out(out, "iters.csv", &state.history_csv())?;
    write_out(out, "control.csv", &state.u.to_csv())?;
    let mut spread = String::from("path,pmp_residual\n");
    for (i, r) in state.path_residuals.iter().enumerate() {
        writeln!(spread, "{i},{r:e}").expect("write to String");
    }
    write_out(out, "path_residuals.csv", &spread)?;
    println!(
        "{:?} after {} iteration(s): cost {} (stderr {:e}), pmp residual {:e}",
        state.termination, state.iterations, state.cost.mean, state.cost.stderr, state.pmp_residual
    );
    Ok(())
}

fn execute(run: &RunSpec, out: &Path, threads: usize) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("threads", e.to_string()))?;
    pool.install(|| {
        let setup = Setup::new(run.common())?;
        fs::create_dir_all(out)?;
        write_manifest(out, &setup, run, threads)?;
        match run {
            RunSpec::Simulate(a) => simulate(a, &setup, out),
            RunSpec::Gradcheck(a) => gradcheck(a, &setup, out),
            RunSpec::Dualcheck(a) => dualcheck(a, &setup, out),
            RunSpec::Optimize(a) => run_optimize(a, &setup, out),
        }
    })
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let text = fs::read_to_string(&a.manifest)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.manifest.display())))?;
    let current = fs::read_to_string(&manifest.config_path)?;
    if current != manifest.config_text {
        return Err(Error::Config(format!(
            "{} changed since the manifest was written",
            manifest.config_path.display()
        )));
    }
    execute(&manifest.run, &a.out, thread_count(a.threads)?)
}

fn dispatch(command: Command) -> Result<()> {
    let run = match command {
        Command::Replay(a) => return replay(&a),
        Command::Simulate(a) => RunSpec::Simulate(a),
        Command::Gradcheck(a) => RunSpec::Gradcheck(a),
        Command::Dualcheck(a) => RunSpec::Dualcheck(a),
        Command::Optimize(a) => RunSpec::Optimize(a),
    };
    let c = run.common();
    execute(&run, &c.out, thread_count(c.threads)?)
}

/// Parses `argv` (including the program name) and runs it. Returns the
/// process exit code: 0 on success, 1 on invalid input, 2 on a numerical
/// abort.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}
