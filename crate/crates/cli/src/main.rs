use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use numax_core::sim::{self, fmt_sig9, ScenarioConfig};
use numax_core::utility::{DEFAULT_GRID, DEFAULT_X_MAX};
use numax_core::{
    class_utility_model, criterion_check, kkt_allocate, make_utility, waterfill, AllocationProblem,
    AllocationResult, Carrier, Lemma2Class, ServiceClass,
};

#[derive(Parser)]
#[command(
    name = "numax",
    version,
    about = "Utility-based FDMA power allocation and scheduling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check each class utility against the convexity criterion.
    CheckUtility {
        #[arg(long)]
        config: PathBuf,
        /// Only this class (voip, video or be).
        #[arg(long)]
        class: Option<String>,
        /// Upper end of the rate grid, in the class's rate units.
        #[arg(long)]
        x_max: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
    },
    /// Exact waterfilling for linear utilities.
    Waterfill {
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
        #[arg(long)]
        budget: f64,
    },
    /// KKT power allocation with the configured class utilities.
    Allocate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
        #[arg(long)]
        budget: f64,
        /// Owner class of every subcarrier, or one class for all.
        #[arg(long, value_delimiter = ',', default_value = "be")]
        class: Vec<String>,
    },
    /// Run one scenario and write per-window metrics.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path, `-` for stdout.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario over several values of a user-count key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated counts; empty for no runs.
        #[arg(long)]
        values: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::CheckUtility {
            config,
            class,
            x_max,
            grid,
        } => check_utility(&load(&config)?, class.as_deref(), x_max, grid),
        Command::Waterfill { beta, budget } => {
            print_allocation(&waterfill(&beta, budget)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Allocate {
            config,
            beta,
            budget,
            class,
        } => allocate(&load(&config)?, &beta, budget, &class),
        Command::Simulate { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let records = sim::run_scenario(&cfg)?;
            emit(&out, |w| sim::write_simulation_csv(&records, w))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            out,
        } => {
            let cfg = load(&config)?;
            let values = parse_counts(&values)?;
            let rows = sim::sweep(&cfg, &param, &values, seeds)?;
            emit(&out, |w| sim::write_sweep_csv(&rows, w))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ScenarioConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_counts(list: &str) -> Result<Vec<u64>> {
    list.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse()
                .with_context(|| format!("`{v}` is not a user count"))
        })
        .collect()
}

fn parse_class(name: &str) -> Result<ServiceClass> {
    ServiceClass::parse(name)
        .with_context(|| format!("unknown class `{name}` (expected voip, video or be)"))
}

fn check_utility(
    cfg: &ScenarioConfig,
    class: Option<&str>,
    x_max: Option<f64>,
    grid: usize,
) -> Result<ExitCode> {
    let classes = match class {
        Some(c) => vec![parse_class(c)?],
        None => ServiceClass::ALL.to_vec(),
    };
    let mut out = io::stdout().lock();
    let mut all_passed = true;
    for (n, class) in classes.into_iter().enumerate() {
        let u = class_utility_model(cfg, class)?;
        let cu = cfg.class_utility(class);
        let span = x_max
            .unwrap_or_else(|| (cfg.normalize_kbps(class) / cu.rate_unit_kbps).max(DEFAULT_X_MAX));
        let report = criterion_check(&u, span, grid)?;
        all_passed &= report.passed;
        if n > 0 {
            writeln!(out)?;
        }
        writeln!(out, "class = {class}")?;
        writeln!(out, "kind = {}", cu.kind.name())?;
        writeln!(out, "x_max = {}", fmt_sig9(span))?;
        writeln!(out, "passed = {}", report.passed)?;
        writeln!(out, "worst_x = {}", fmt_sig9(report.worst_x))?;
        writeln!(out, "worst_margin = {}", fmt_sig9(report.worst_margin))?;
        let shape = match report.lemma2_class {
            Lemma2Class::NondecreasingConvex => "nondecreasing_convex",
            Lemma2Class::NonincreasingConcave => "nonincreasing_concave",
            Lemma2Class::Other => "other",
        };
        writeln!(out, "lemma2_class = {shape}")?;
        writeln!(
            out,
            "unbounded_decreasing = {}",
            report.unbounded_decreasing
        )?;
    }
    Ok(if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn allocate(
    cfg: &ScenarioConfig,
    beta: &[f64],
    budget: f64,
    classes: &[String],
) -> Result<ExitCode> {
    let owners = classes
        .iter()
        .map(|c| parse_class(c))
        .collect::<Result<Vec<_>>>()?;
    if owners.len() != 1 && owners.len() != beta.len() {
        bail!("{} classes for {} subcarriers", owners.len(), beta.len());
    }
    let models = ServiceClass::ALL
        .iter()
        .map(|&c| {
            cfg.class_utility(c)
                .spec()
                .map_err(anyhow::Error::from)
                .and_then(|s| Ok(make_utility(&s)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let carriers = beta
        .iter()
        .enumerate()
        .map(|(k, &b)| Carrier {
            beta: b,
            utility: &models[owners[k.min(owners.len() - 1)].index()],
        })
        .collect();
    let problem = AllocationProblem::new(carriers, budget)?;
    let result = kkt_allocate(&problem, cfg.alloc_tol, cfg.alloc_max_iter)?;
    print_allocation(&result)?;
    Ok(ExitCode::SUCCESS)
}

fn print_allocation(r: &AllocationResult) -> Result<()> {
    let powers: Vec<String> = r.powers.iter().map(|&p| fmt_sig9(p)).collect();
    let mut out = io::stdout().lock();
    writeln!(out, "powers = {}", powers.join(","))?;
    writeln!(out, "nu = {}", fmt_sig9(r.nu))?;
    writeln!(out, "objective = {}", fmt_sig9(r.objective))?;
    writeln!(out, "iterations = {}", r.iterations)?;
    writeln!(out, "residual = {}", fmt_sig9(r.residual))?;
    Ok(())
}

fn emit(path: &Path, write: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    if path.as_os_str() == "-" {
        let mut out = io::stdout().lock();
        write(&mut out)?;
        return Ok(());
    }
    let mut file = io::BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    write(&mut file)?;
    file.flush()?;
    Ok(())
}
