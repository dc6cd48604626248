//! Command-line front end. All substance lives in the library; this binary
//! parses arguments, loads the JSON experiment config, dispatches, and
//! writes reports. Exit code 0 means every asserted invariant passed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dfm_lab::harness::{
    report_to_csv, run_bound_checks, run_extension_check, run_rate_sweep_experiment, run_simulate,
    run_train, write_csv, write_json, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "dfm-lab", about = "Discrete flow matching laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate Euler trajectories of the exact mixture velocity field.
    Simulate(RunArgs),
    /// Train per-coordinate velocity models and write checkpoints.
    Train(RunArgs),
    /// Verify the total-variation error bounds on trained or synthetic
    /// estimators.
    VerifyBounds(RunArgs),
    /// Sweep training-set sizes and fit the risk trend.
    RateSweep(RunArgs),
    /// Check bump-function bounds, extension interpolation, and the
    /// extension Lipschitz constant.
    ExtensionCheck(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports and artifacts.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn load_config(args: &RunArgs) -> dfm_lab::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(dir) = &args.out_dir {
        config.out_dir = Some(dir.clone());
    }
    Ok(config)
}

fn emit<T: serde::Serialize>(
    config: &ExperimentConfig,
    format: Format,
    name: &str,
    report: &T,
) -> dfm_lab::Result<()> {
    if let Some(dir) = &config.out_dir {
        match format {
            Format::Json => write_json(&dir.join(format!("{name}.json")), report)?,
            Format::Csv => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join(format!("{name}.csv")), report_to_csv(report)?)?;
            }
        }
    } else {
        match format {
            Format::Json => println!("{}", serde_json::to_string_pretty(report)?),
            Format::Csv => print!("{}", report_to_csv(report)?),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> dfm_lab::Result<bool> {
    match cli.command {
        Command::Simulate(args) => {
            let config = load_config(&args)?;
            for &seed in &config.seeds.clone() {
                let report = run_simulate(&config, seed)?;
                let total: usize = report.endpoint_counts.iter().sum();
                println!(
                    "simulate seed {seed}: {} paths, endpoint mode count {}",
                    total,
                    report.endpoint_counts.iter().max().copied().unwrap_or(0)
                );
                emit(&config, args.format, &format!("simulate_seed{seed}"), &report)?;
            }
            Ok(true)
        }
        Command::Train(args) => {
            let config = load_config(&args)?;
            let summaries = run_train(&config)?;
            for s in &summaries {
                println!(
                    "train seed {} coord {}: final loss {:.3e}, exact risk {:.3e}",
                    s.seed, s.coordinate, s.final_loss, s.exact_risk
                );
            }
            emit(&config, args.format, "train_summary", &summaries)?;
            Ok(true)
        }
        Command::VerifyBounds(args) => {
            let config = load_config(&args)?;
            let reports = run_bound_checks(&config)?;
            let mut all_pass = true;
            for report in &reports {
                all_pass &= report.pass;
                println!(
                    "verify-bounds seed {}: TV {:.3e} <= {:.3e} + tol [{}], operator [{}], simplex [{}]",
                    report.seed,
                    report.tv_exact,
                    report.rhs_intermediate,
                    pass_str(report.pass_intermediate_bound),
                    pass_str(report.pass_operator_stochasticity),
                    pass_str(report.pass_simplex),
                );
                emit(
                    &config,
                    args.format,
                    &format!("bound_report_seed{}", report.seed),
                    report,
                )?;
            }
            Ok(all_pass)
        }
        Command::RateSweep(args) => {
            let config = load_config(&args)?;
            let report = run_rate_sweep_experiment(&config)?;
            for row in &report.rows {
                println!(
                    "rate-sweep n = {:>4}: median risk {:.4e}, median TV {:.4e}",
                    row.n, row.median_risk, row.median_tv
                );
            }
            println!("rate-sweep log-log slope: {:.4}", report.slope);
            emit(&config, args.format, "rate_sweep", &report)?;
            if let Some(dir) = &config.out_dir {
                let rows: Vec<Vec<f64>> = report
                    .rows
                    .iter()
                    .map(|r| vec![r.n as f64, r.median_risk, r.median_tv])
                    .collect();
                write_csv(
                    &dir.join("rate_sweep_table.csv"),
                    &["n", "median_risk", "median_tv"],
                    &rows,
                )?;
            }
            Ok(report.slope < 0.0)
        }
        Command::ExtensionCheck(args) => {
            let config = load_config(&args)?;
            let mut all_pass = true;
            for &seed in &config.seeds.clone() {
                let report = run_extension_check(&config, seed)?;
                all_pass &= report.pass;
                println!(
                    "extension-check seed {seed}: derivative bounds [{}], interpolation [{}], lipschitz [{}] (ratio {:.3} <= {:.3})",
                    pass_str(report.derivative_bounds_pass),
                    pass_str(report.interpolation_pass),
                    pass_str(report.lipschitz.pass),
                    report.lipschitz.empirical_ratio,
                    report.lipschitz.analytic_bound,
                );
                emit(
                    &config,
                    args.format,
                    &format!("extension_report_seed{seed}"),
                    &report,
                )?;
            }
            Ok(all_pass)
        }
    }
}

fn pass_str(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more asserted invariants failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
