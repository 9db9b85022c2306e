//! `hjp`: compute reachable sets, run platoon scenarios, validate
//! invariants and export plot data.
//!
//! Exit codes: 0 success, 1 domain error (bad config, missing cache, failed
//! validation), 2 usage error.

mod export;
mod store;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hjp_core::sim::{self, Evaluators, ScenarioConfig, Trace};
use hjp_core::validate::{self, Suite};

#[derive(Debug, Parser)]
#[command(name = "hjp", version, about = "Reachability-based platoon planning for planar quadrotors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario config (TOML); defaults to the built-in configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory holding cached evaluators and their manifest.
    #[arg(long, global = true, env = "HJP_CACHE_DIR", default_value = "cache", value_name = "PATH")]
    cache_dir: PathBuf,
    /// Output directory.
    #[arg(long, global = true, default_value = "out", value_name = "PATH")]
    out: PathBuf,
    /// Seed for randomized validation suites.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Worker threads for solver sweeps and rollout batches (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build (or reuse) the highway, join and safety evaluators.
    Compute,
    /// Run a scenario and write its trace and summary.
    Simulate {
        /// Built-in scenario name (form_platoon, malfunction, intruder) or a
        /// scenario TOML file; defaults to --config.
        scenario: Option<String>,
    },
    /// Run invariant suites and oracle cross-checks.
    Validate {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
    },
    /// Export plot data.
    #[command(subcommand)]
    Export(ExportCmd),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SuiteArg {
    Solver,
    Reach,
    Platoon,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Solver => Suite::Solver,
            SuiteArg::Reach => Suite::Reach,
            SuiteArg::Platoon => Suite::Platoon,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvaluatorArg {
    Highway,
    Join,
    Safety,
}

#[derive(Debug, Subcommand)]
enum ExportCmd {
    /// 2D slice of a reachable set: value grid plus zero-level polylines.
    SetSlice {
        #[arg(long, value_enum, default_value_t = EvaluatorArg::Safety)]
        evaluator: EvaluatorArg,
        /// The two state components to vary, e.g. `0,2`.
        #[arg(long, value_parser = parse_pair, value_name = "I,J")]
        free: [usize; 2],
        /// Full state; entries at the free components are ignored.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        at: Vec<f64>,
        /// Horizon of the slice (s); defaults to the built horizon.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Per-vehicle path polylines with mode tags from a trace CSV.
    Trajectory {
        /// Trace CSV written by `simulate`.
        #[arg(long, value_name = "PATH")]
        trace: PathBuf,
    },
}

fn parse_pair(s: &str) -> Result<[usize; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.trim().parse().map_err(|e| format!("{a}: {e}"))?,
            b.trim().parse().map_err(|e| format!("{b}: {e}"))?,
        ]),
        _ => Err("expected two comma-separated indices, e.g. 0,2".into()),
    }
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(sim::scenario_form_platoon()),
    }
}

fn scenario_config(arg: Option<&str>, config: Option<&Path>) -> Result<ScenarioConfig> {
    match arg {
        None => load_config(config),
        Some(name) => match sim::builtin_scenario(name) {
            Some(c) => Ok(c),
            None if Path::new(name).exists() => load_config(Some(Path::new(name))),
            None => bail!(
                "unknown scenario '{name}': not a built-in ({}) and no such file",
                sim::BUILTIN_SCENARIOS.join(", ")
            ),
        },
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_compute(c: &Common) -> Result<()> {
    let config = load_config(c.config.as_deref())?;
    config.validate()?;
    for (name, status, px, py) in store::compute(&config, &c.cache_dir)? {
        match status {
            store::Status::UpToDate => println!("{name}: up to date"),
            store::Status::Built => println!("{name}: built {} {}", px.display(), py.display()),
        }
    }
    println!("manifest: {}", c.cache_dir.join(store::MANIFEST).display());
    Ok(())
}

fn cmd_simulate(c: &Common, scenario: Option<&str>) -> Result<bool> {
    let config = scenario_config(scenario, c.config.as_deref())?;
    config.validate()?;
    let evals = store::load(&config, &c.cache_dir)?;
    let trace = sim::run(&config, &evals)?;
    let m = sim::metrics(&trace, &config)?;
    let csv = c.out.join(format!("{}.csv", config.name));
    let summary = c.out.join(format!("{}.summary.toml", config.name));
    write(&csv, &trace.to_csv_string())?;
    write(&summary, &sim::summary_toml(&m))?;
    println!("trace: {}", csv.display());
    println!("summary: {}", summary.display());
    println!(
        "collisions: {}  max simultaneous breaches: {}  altitude changes: {}  min separation: {:.3} m",
        m.collisions, m.max_breaches, m.altitude_changes, m.min_separation
    );
    for (id, split, rejoin) in &m.split_rejoins {
        println!("vehicle {id}: split at t={split:.2}, rejoined at t={rejoin:.2}");
    }
    let safe = m.collisions == 0;
    println!("verdict: {}", if safe { "no collisions" } else { "COLLISIONS" });
    Ok(safe)
}

fn cmd_validate(c: &Common, suite: Suite) -> Result<bool> {
    let config = load_config(c.config.as_deref())?;
    config.validate()?;
    let evals: Evaluators = store::load(&config, &c.cache_dir)?;
    let scratch = std::env::temp_dir().join(format!("hjp-validate-{}", std::process::id()));
    fs::create_dir_all(&scratch)?;
    let report = validate::run_suite(suite, &config, &evals, c.seed, &scratch);
    let _ = fs::remove_dir_all(&scratch);
    println!("{report}");
    Ok(report.passed())
}

fn cmd_export(c: &Common, cmd: &ExportCmd) -> Result<()> {
    match cmd {
        ExportCmd::SetSlice {
            evaluator,
            free,
            at,
            tau,
        } => {
            let config = load_config(c.config.as_deref())?;
            let evals = store::load(&config, &c.cache_dir)?;
            let ev = match evaluator {
                EvaluatorArg::Highway => &evals.highway,
                EvaluatorArg::Join => &evals.join,
                EvaluatorArg::Safety => &evals.safety,
            };
            let tau = tau.unwrap_or(ev.horizon());
            let slice = export::set_slice(ev, *free, at, tau)?;
            let label = ev.kind().name();
            let grid = c.out.join(format!("{label}_slice.csv"));
            let contour = c.out.join(format!("{label}_slice_contour.csv"));
            write(&grid, &slice.grid_csv())?;
            write(&contour, &slice.contour_csv())?;
            println!("{} × {} slice at tau = {tau}: {}", slice.names[0], slice.names[1], grid.display());
            println!("zero level: {} polyline(s) in {}", slice.contours.len(), contour.display());
        }
        ExportCmd::Trajectory { trace } => {
            let f = fs::File::open(trace).with_context(|| format!("opening {}", trace.display()))?;
            let t = Trace::read_csv(f).with_context(|| format!("reading {}", trace.display()))?;
            let (csv, modes) = export::trajectory_csv(&t);
            let stem = trace.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
            let out = c.out.join(format!("{stem}_trajectories.csv"));
            write(&out, &csv)?;
            println!("{} polylines: {}", modes.len(), out.display());
            for (id, m) in modes {
                println!("vehicle {id}: {}", m.join(" -> "));
            }
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(anyhow!("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Compute => cmd_compute(&cli.common).map(|_| true),
        Command::Simulate { scenario } => cmd_simulate(&cli.common, scenario.as_deref()),
        Command::Validate { suite } => cmd_validate(&cli.common, (*suite).into()),
        Command::Export(cmd) => cmd_export(&cli.common, cmd).map(|_| true),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
