//! Command-line driver: tatonnement runs, the equilibrium oracle,
//! approximate-equilibrium checks, bound estimation, and the
//! resource-allocation distortion, all reproducible from --seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tatonnement::demand::{demands, Bundle, Prices};
use tatonnement::duality::{estimate_bounds, solve_equilibrium};
use tatonnement::dynamics::{distort, run, DynamicsError, InitMode, RunConfig, StopReason};
use tatonnement::market::{load_market, Market};
use tatonnement::verify::{check_def1, check_def2};

#[derive(Parser)]
#[command(name = "tatonnement", version, about = "Fisher market price dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the price dynamics and report convergence.
    Run(RunArgs),
    /// Solve for the equilibrium with the reference oracle.
    Solve(SolveArgs),
    /// Check a price vector (and optional allocation) for approximate equilibrium.
    Check(CheckArgs),
    /// Estimate the constants that drive step-size selection.
    Bounds(BoundsArgs),
    /// Rewrite a resource-allocation market as a nested CES-Leontief market.
    Distort(DistortArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    market: PathBuf,
    /// Step size, or "auto" to derive one from estimated bounds.
    #[arg(long, default_value = "auto")]
    epsilon: String,
    /// Approximation target for the Definition-1 stopping test.
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iters: usize,
    /// "uniform", "spend-reset", or a path to a prices JSON file.
    #[arg(long, default_value = "uniform")]
    init: String,
    /// Write the round-by-round trace CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Run the full Definition-1 check every N rounds.
    #[arg(long, default_value_t = 10)]
    check_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Treat soft warnings (renormalized init, monotonicity hiccups) as errors.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    market: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    market: PathBuf,
    /// Prices JSON: {"good": number, ...}.
    #[arg(long)]
    prices: PathBuf,
    /// Optional allocation JSON; defaults to the demands at --prices.
    #[arg(long)]
    allocation: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    definition: u8,
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    market: PathBuf,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DistortArgs {
    #[arg(long)]
    market: PathBuf,
    #[arg(long)]
    delta: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Solve(args) => cmd_solve(&args),
        Command::Check(args) => cmd_check(&args),
        Command::Bounds(args) => cmd_bounds(&args),
        Command::Distort(args) => cmd_distort(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn read_market(path: &Path) -> Result<Market> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading market file {}", path.display()))?;
    load_market(&text).with_context(|| format!("loading market file {}", path.display()))
}

fn read_prices(path: &Path, market: &Market) -> Result<Prices> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading prices file {}", path.display()))?;
    let map: BTreeMap<String, f64> = serde_json::from_str(&text)
        .with_context(|| format!("parsing prices file {}", path.display()))?;
    let mut p = vec![0.0; market.good_count()];
    for (name, value) in &map {
        let j = market
            .good_index(name)
            .ok_or_else(|| anyhow!("prices file names unknown good {name:?}"))?;
        p[j] = *value;
    }
    if let Some(j) = p.iter().position(|&pj| pj.is_nan() || pj <= 0.0) {
        bail!("prices file gives no positive price for good {:?}", market.goods[j]);
    }
    Ok(Prices(p))
}

/// Allocation file: an array with one entry per agent, each either a plain
/// {"good": number} map or {"x": {...}, "levels": [...]} when the agent's
/// utility needs per-object levels (nested families under --definition 2).
fn read_allocation(path: &Path, market: &Market) -> Result<Vec<Bundle>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading allocation file {}", path.display()))?;
    let entries: Vec<serde_json::Value> = serde_json::from_str(&text)
        .with_context(|| format!("parsing allocation file {}", path.display()))?;
    if entries.len() != market.agent_count() {
        bail!(
            "allocation file has {} entries, market has {} agents",
            entries.len(),
            market.agent_count()
        );
    }
    let mut bundles = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let (x_map, levels) = match entry {
            serde_json::Value::Object(obj) if obj.contains_key("x") => {
                let x = obj["x"]
                    .as_object()
                    .ok_or_else(|| anyhow!("agent {i}: \"x\" must be a good->number map"))?;
                let levels = match obj.get("levels") {
                    None => None,
                    Some(v) => Some(
                        v.as_array()
                            .ok_or_else(|| anyhow!("agent {i}: \"levels\" must be an array"))?
                            .iter()
                            .map(|lv| {
                                lv.as_f64()
                                    .ok_or_else(|| anyhow!("agent {i}: non-numeric level"))
                            })
                            .collect::<Result<Vec<f64>>>()?,
                    ),
                };
                (x.clone(), levels)
            }
            serde_json::Value::Object(obj) => (obj.clone(), None),
            _ => bail!("agent {i}: allocation entry must be an object"),
        };
        let mut x = vec![0.0; market.good_count()];
        for (name, value) in &x_map {
            let j = market
                .good_index(name)
                .ok_or_else(|| anyhow!("agent {i}: unknown good {name:?}"))?;
            x[j] = value
                .as_f64()
                .ok_or_else(|| anyhow!("agent {i}: non-numeric amount for good {name:?}"))?;
        }
        bundles.push(Bundle { x, object_levels: levels });
    }
    Ok(bundles)
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let market = read_market(&args.market)?;
    let epsilon = match args.epsilon.as_str() {
        "auto" => None,
        text => Some(
            text.parse::<f64>()
                .with_context(|| format!("--epsilon must be \"auto\" or a number, got {text:?}"))?,
        ),
    };
    let init = match args.init.as_str() {
        "uniform" => InitMode::Uniform,
        "spend-reset" => InitMode::SpendReset,
        path => {
            let p = read_prices(Path::new(path), &market)
                .with_context(|| format!("--init file {path:?}"))?;
            InitMode::Explicit(p.0)
        }
    };
    let config = RunConfig {
        epsilon,
        delta: args.delta,
        max_iters: args.max_iters,
        init,
        check_every: args.check_every,
        seed: args.seed,
    };

    let (trace, result) = match run(&market, &config) {
        Ok(out) => out,
        // numeric blowup is a divergence outcome, not an input error
        Err(DynamicsError::NumericBlowup { round }) => {
            eprintln!("error: prices diverged (non-finite values at round {round})");
            return Ok(ExitCode::from(3));
        }
        Err(err) => return Err(err.into()),
    };

    if let Some(path) = &args.trace {
        fs::write(path, trace.to_csv(&market.goods))
            .with_context(|| format!("writing trace file {}", path.display()))?;
    }

    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "converged": result.converged,
            "rounds": result.rounds,
            "delta_achieved": result.delta_achieved,
            "epsilon_used": result.epsilon_used,
            "phi_final": result.phi_final,
            "stopping_reason": result.stopping_reason,
        }))?
    );

    if args.strict && result.monotonicity_warnings > 0 {
        eprintln!(
            "error: --strict and phi increased on {} rounds",
            result.monotonicity_warnings
        );
        return Ok(ExitCode::from(1));
    }
    Ok(match result.stopping_reason {
        StopReason::Converged => ExitCode::SUCCESS,
        StopReason::MaxIters => ExitCode::from(2),
        StopReason::Diverged => ExitCode::from(3),
    })
}

fn cmd_solve(args: &SolveArgs) -> Result<ExitCode> {
    let market = read_market(&args.market)?;
    let report = solve_equilibrium(&market, args.tol)?;
    if !report.converged {
        eprintln!(
            "warning: oracle stopped after {} iterations with residual {:.3e}",
            report.iterations, report.residual
        );
    }
    let prices: BTreeMap<&str, f64> = market
        .goods
        .iter()
        .map(String::as_str)
        .zip(report.p_star.0.iter().copied())
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "prices": prices,
            "residual": report.residual,
            "iterations": report.iterations,
            "dual_value": report.dual_value,
        }))?
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(args: &CheckArgs) -> Result<ExitCode> {
    let market = read_market(&args.market)?;
    let p = read_prices(&args.prices, &market)?;
    let x = match &args.allocation {
        Some(path) => read_allocation(path, &market)?,
        None => demands(&market, &p)?,
    };
    let report = match args.definition {
        1 => check_def1(&market, &p, &x, args.delta)?,
        2 => {
            // utility evaluation for object-based families needs levels
            for (i, (agent, bundle)) in market.agents.iter().zip(&x).enumerate() {
                let needs_levels = matches!(
                    agent.utility,
                    tatonnement::market::UtilitySpec::NestedCesLeontief { .. }
                        | tatonnement::market::UtilitySpec::ResourceAllocation { .. }
                );
                if needs_levels && bundle.object_levels.is_none() {
                    bail!(
                        "agent {i} has an object-based utility; --definition 2 needs \
                         \"levels\" in the allocation entry"
                    );
                }
            }
            check_def2(&market, &p, &x, args.delta)?
        }
        other => bail!("--definition must be 1 or 2, got {other}"),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.overall { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_bounds(args: &BoundsArgs) -> Result<ExitCode> {
    let market = read_market(&args.market)?;
    let bounds = estimate_bounds(&market, args.samples, args.seed)?;
    println!("{}", serde_json::to_string_pretty(&bounds)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_distort(args: &DistortArgs) -> Result<ExitCode> {
    let market = read_market(&args.market)?;
    let distorted = distort(&market, args.delta)?;
    println!("{}", distorted.to_document());
    Ok(ExitCode::SUCCESS)
}
