//! Command-line driver: `run`, `check`, `linearize` and `report`.
//!
//! Exit codes: 0 success, 1 configuration/solver/I/O error, 2 a check failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elastoplast::checks::{property_suite, SuiteOptions};
use elastoplast::diagnostics::{
    linearization_samples, linearization_study, sampled_steps, trajectory_report, DiagnosticsReport,
    DEFAULT_EPSILONS,
};
use elastoplast::io::{write_run, OutputOptions};
use elastoplast::solver::Trajectory;
use elastoplast::{run_evolution, Error, Scenario, ScenarioConfig};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "ELASTOPLAST_THREADS";

/// Number of steps sampled by the stability check.
const STABILITY_STEPS: usize = 5;

#[derive(Parser, Debug)]
#[command(name = "elastoplast", version, about = "Incremental finite-strain elastoplasticity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the incremental scheme and write the summary CSV, trajectory and report.
    Run(RunArgs),
    /// Run the property self-checks (metric, gradients, frame indifference, causality).
    Check(CheckArgs),
    /// Sweep ε for the small-strain limit and write the slope table.
    Linearize(LinearizeArgs),
    /// Recompute the diagnostics report from a stored trajectory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario config (TOML); the bundled shear ramp when omitted.
    config: Option<PathBuf>,
    /// Output directory (overrides `output.directory`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for sampled checks (overrides `output.seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Step size in seconds; must divide the end time.
    #[arg(long, conflicts_with = "nsteps")]
    tau: Option<f64>,
    /// Number of steps over the end time.
    #[arg(long)]
    nsteps: Option<usize>,
    /// Write per-step flat field CSVs.
    #[arg(long)]
    dump_fields: bool,
    /// Also write legacy VTK files with the field dumps.
    #[arg(long)]
    vtk: bool,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[command(flatten)]
    common: Common,
    /// Samples per sampled suite.
    #[arg(long, default_value_t = 50)]
    samples: usize,
}

#[derive(Args, Debug)]
struct LinearizeArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated ε values.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_EPSILONS.to_vec())]
    eps: Vec<f64>,
    /// Number of sampled (η, p, ṗ) triples.
    #[arg(long, default_value_t = 20)]
    samples: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Trajectory file written by `run` (default `<out>/trajectory.json`).
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

/// Outcome of a command that did not error.
enum Verdict {
    Pass,
    Fail,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Check(a) => cmd_check(a),
        Command::Linearize(a) => cmd_linearize(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    if n == 0 {
        return Err(format!("{THREADS_ENV} must be a positive integer, got `{v}`"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn load_config(common: &Common) -> Result<ScenarioConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ScenarioConfig::from_file(path)?,
        None => ScenarioConfig::shear_ramp(),
    };
    if let Some(out) = &common.out {
        cfg.output.directory = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.output.seed = seed;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn emit_report(report: &DiagnosticsReport, dir: &Path, stem: &str) -> Result<Verdict, Error> {
    create_dir(dir)?;
    write(&dir.join(format!("{stem}.txt")), &report.to_text())?;
    write(&dir.join(format!("{stem}.csv")), &report.to_csv())?;
    print!("{}", report.to_text());
    Ok(if report.all_passed() { Verdict::Pass } else { Verdict::Fail })
}

fn cmd_run(a: RunArgs) -> Result<Verdict, Error> {
    let mut cfg = load_config(&a.common)?;
    if let Some(tau) = a.tau {
        cfg.set_tau(tau)?;
    }
    if let Some(n) = a.nsteps {
        if n == 0 {
            return Err(Error::config("time.nsteps", "need at least one step"));
        }
        cfg.time.nsteps = n;
    }
    cfg.output.dump_fields |= a.dump_fields;
    cfg.output.vtk |= a.vtk;
    let scenario: Scenario<f64> = cfg.build()?;
    let dir = cfg.output.directory.clone();
    let ev = run_evolution(&scenario)?;
    let opts = OutputOptions {
        dump_fields: cfg.output.dump_fields,
        vtk: cfg.output.dump_fields && cfg.output.vtk,
    };
    write_run(&dir, &scenario.grid, &ev.trajectory, opts)?;
    write(&dir.join("trajectory.json"), &ev.trajectory.to_json()?)?;
    write(&dir.join("scenario.toml"), &cfg.to_toml()?)?;
    let steps = sampled_steps(scenario.nsteps, STABILITY_STEPS);
    let report = trajectory_report(&ev.trajectory, &ev.model, &steps, scenario.seed)?;
    eprintln!(
        "{} steps, τ = {:e} s, summary in {}",
        scenario.nsteps,
        scenario.tau,
        dir.join("summary.csv").display()
    );
    emit_report(&report, &dir, "report")
}

fn cmd_report(a: ReportArgs) -> Result<Verdict, Error> {
    let mut cfg = load_config(&a.common)?;
    let dir = cfg.output.directory.clone();
    let path = a.trajectory.unwrap_or_else(|| dir.join("trajectory.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    // the stored trajectory fixes the step size
    cfg.set_tau(Trajectory::<f64>::stored_tau(&text)?)?;
    let scenario: Scenario<f64> = cfg.build()?;
    let model = scenario.model()?;
    let traj = Trajectory::from_json(&text, &scenario.grid, &model.kernels)?;
    if traj.steps() != scenario.nsteps {
        return Err(Error::config(
            "time",
            format!("trajectory has {} steps, config implies {}", traj.steps(), scenario.nsteps),
        ));
    }
    let steps = sampled_steps(scenario.nsteps, STABILITY_STEPS);
    let report = trajectory_report(&traj, &model, &steps, scenario.seed)?;
    emit_report(&report, &dir, "report")
}

fn cmd_check(a: CheckArgs) -> Result<Verdict, Error> {
    let cfg = load_config(&a.common)?;
    let scenario: Scenario<f64> = cfg.build()?;
    let kernels = scenario.kernels()?;
    let opts = SuiteOptions {
        metric_samples: a.samples,
        gradient_samples: a.samples,
        frame_samples: a.samples,
        seed: scenario.seed,
    };
    let report = property_suite(&scenario.params, &scenario.path, &scenario.grid, &kernels, &opts)?;
    emit_report(&report, &cfg.output.directory, "check")
}

fn cmd_linearize(a: LinearizeArgs) -> Result<Verdict, Error> {
    let cfg = load_config(&a.common)?;
    let scenario: Scenario<f64> = cfg.build()?;
    let samples = linearization_samples(&scenario.params, a.samples, scenario.seed)?;
    let table = linearization_study(&scenario.params, &a.eps, &samples)?;
    let dir = &cfg.output.directory;
    create_dir(dir)?;
    let csv = table.to_csv();
    write(&dir.join("linearization.csv"), &csv)?;
    print!("{csv}");
    Ok(match table.min_slope() {
        Some(s) if s < 0.9 => Verdict::Fail,
        _ => Verdict::Pass,
    })
}
