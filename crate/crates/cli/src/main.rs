//! `kgsp`: run Klein-Gordon experiments and tabulate their diagnostics.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use kgsp_core::harness::{
    self, load_or_run, run_path, run_refinement_suite, run_stability_sweep, ExperimentPlan, HarnessError, RunSource,
};
use kgsp_core::store::{export_csv, read_series, RunManifest, RunStatus};

const EXIT_PLAN: u8 = 2;
const EXIT_SOLVER: u8 = 3;

#[derive(Parser)]
#[command(name = "kgsp", version, about = "Energy-conserving Klein-Gordon experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one manifest (JSON file, or one cell of a plan) and store its snapshots.
    Run(RunArgs),
    /// Stability tables from the finest grid of every (A, m) pair.
    Sweep(PlanArgs),
    /// Convergence tables over the grid ladder.
    Refine(PlanArgs),
    /// Recompute both tables from stored snapshots without running anything.
    Diagnose(PlanArgs),
    /// Write a snapshot file as CSV (time,node,x,phi,psi).
    Export {
        snapshot: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PlanArgs {
    plan: PathBuf,
    /// Overrides the plan's output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides the plan's worker count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// Manifest JSON file.
    #[arg(conflicts_with = "plan", required_unless_present = "plan")]
    manifest: Option<PathBuf>,
    /// Take the manifest from a plan cell instead.
    #[arg(long, requires_all = ["amplitude", "mass", "points"])]
    plan: Option<PathBuf>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    mass: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    /// Directory for the snapshot file (defaults to the plan's, or `runs`).
    #[arg(long)]
    output: Option<PathBuf>,
}

enum Failure {
    Plan(anyhow::Error),
    Other(anyhow::Error),
}

impl From<HarnessError> for Failure {
    fn from(err: HarnessError) -> Self {
        if err.is_validation() {
            Failure::Plan(err.into())
        } else {
            Failure::Other(err.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure::Other(err)
    }
}

fn load_plan(args: &PlanArgs) -> Result<ExperimentPlan, Failure> {
    let text = std::fs::read_to_string(&args.plan)
        .with_context(|| format!("reading plan {}", args.plan.display()))
        .map_err(Failure::Plan)?;
    let mut plan: ExperimentPlan = text.parse().map_err(|e: HarnessError| Failure::Plan(e.into()))?;
    if let Some(dir) = &args.output {
        plan.output = dir.clone();
    }
    if let Some(workers) = args.workers {
        plan.workers = workers;
    }
    Ok(plan)
}

fn print_tables(kind: &str, paths: &[PathBuf]) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    for path in paths {
        writeln!(out, "# {kind}: {}", path.display())?;
        out.write_all(std::fs::read(path)?.as_slice())?;
    }
    Ok(())
}

fn sweep(plan: &ExperimentPlan, source: RunSource) -> Result<(), Failure> {
    let (tables, runs) = run_stability_sweep(plan, source)?;
    let paths = harness::write_stability_outputs(&plan.output, &tables, &runs)?;
    print_tables("stability", &paths)?;
    Ok(())
}

fn refine(plan: &ExperimentPlan, source: RunSource) -> Result<(), Failure> {
    let (tables, curves) = run_refinement_suite(plan, source)?;
    let paths = harness::write_convergence_outputs(&plan.output, &tables, &curves)?;
    print_tables("convergence", &paths)?;
    Ok(())
}

fn run(args: &RunArgs) -> Result<ExitCode, Failure> {
    let (manifest, default_dir) = match (&args.manifest, &args.plan) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let manifest: RunManifest = serde_json::from_str(&text)
                .with_context(|| format!("parsing manifest {}", path.display()))
                .map_err(Failure::Plan)?;
            (manifest, PathBuf::from("runs"))
        }
        (None, Some(plan_path)) => {
            let plan = load_plan(&PlanArgs { plan: plan_path.clone(), output: None, workers: None })?;
            let (a, m, n) = (args.amplitude.unwrap(), args.mass.unwrap(), args.points.unwrap());
            (plan.manifest(a, m, n)?, plan.output.clone())
        }
        (None, None) => unreachable!("clap requires a manifest or a plan"),
    };
    manifest.schedule().map_err(|e| Failure::Plan(e.into()))?;
    let dir = args.output.clone().unwrap_or(default_dir);
    let series = load_or_run(&dir, &manifest)?;
    println!("{}", run_path(&dir, &manifest).display());
    match &series.status {
        RunStatus::Completed => Ok(ExitCode::SUCCESS),
        RunStatus::Failed { time, reason } => {
            eprintln!("kgsp: solver failure at t = {time}: {reason}");
            Ok(ExitCode::from(EXIT_SOLVER))
        }
    }
}

fn export(snapshot: &Path, output: Option<&Path>) -> anyhow::Result<()> {
    let series = read_series(snapshot).with_context(|| format!("reading {}", snapshot.display()))?;
    match output {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            export_csv(&series, &mut w)?;
            w.flush()?;
        }
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            export_csv(&series, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Run(args) => return run(&args),
        Command::Sweep(args) => sweep(&load_plan(&args)?, RunSource::RunMissing)?,
        Command::Refine(args) => refine(&load_plan(&args)?, RunSource::RunMissing)?,
        Command::Diagnose(args) => {
            let plan = load_plan(&args)?;
            sweep(&plan, RunSource::StoredOnly)?;
            refine(&plan, RunSource::StoredOnly)?;
        }
        Command::Export { snapshot, output } => export(&snapshot, output.as_deref())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(Failure::Plan(err)) => {
            eprintln!("kgsp: {err:#}");
            ExitCode::from(EXIT_PLAN)
        }
        Err(Failure::Other(err)) => {
            eprintln!("kgsp: {err:#}");
            ExitCode::FAILURE
        }
    }
}
