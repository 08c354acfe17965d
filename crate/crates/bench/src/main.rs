use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tsg_bench::config::ExperimentConfig;
use tsg_bench::{experiment, grid, verify_cmd};

#[derive(Parser)]
#[command(name = "tsg-bench", version, about = "Seeded trilevel stochastic gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for repetitions. Defaults to the available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides run.base_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides run.output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the repetitions and write traces and aggregates.
    Run,
    /// Cross-check the adjoint engines and derivatives; nonzero exit on a breach.
    Verify,
    /// Try every decaying step triple from {0.1, 0.01, 0.001}.
    GridSearch,
    /// Print the dataset split of an adv-hpt config.
    SplitInfo,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.base_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.run.output_dir = o.clone();
    }
    Ok(cfg)
}

fn jobs(cli: &Cli) -> usize {
    cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn main_inner(cli: &Cli) -> Result<bool> {
    let cfg = load(cli)?;
    match cli.command {
        Command::Run => {
            let report = experiment::run_experiment(&cfg, jobs(cli))?;
            if let Some(last) = report.aggregate.last() {
                println!(
                    "{} runs, {} UL iterations: mean f1 {:.6e} (95% CI [{:.6e}, {:.6e}])",
                    report.runs.len(),
                    last.iteration,
                    last.mean_f1,
                    last.ci_lo,
                    last.ci_hi
                );
            }
            println!("outputs in {}", cfg.run.output_dir.display());
            Ok(true)
        }
        Command::Verify => {
            let out = verify_cmd::run_verify(&cfg)?;
            print!("{}", out.summary(cfg.verify.min_fd_ratio));
            println!("{}", if out.passed() { "verify: PASS" } else { "verify: FAIL" });
            Ok(out.passed())
        }
        Command::GridSearch => {
            let rows = grid::grid_search(&cfg, jobs(cli))?;
            grid::print_table(std::io::stdout().lock(), &rows)?;
            std::fs::create_dir_all(&cfg.run.output_dir)?;
            let path = cfg.run.output_dir.join("grid.csv");
            tsg_bench::aggregate::write_rows(std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?, &rows)?;
            Ok(true)
        }
        Command::SplitInfo => {
            print!("{}", experiment::split_info(&cfg)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TSG_LOG", "warn")).init();
    let cli = Cli::parse();
    match main_inner(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            ExitCode::from(2)
        }
    }
}
