use std::path::PathBuf;
use std::process::ExitCode;

use bayes_admm::FamilyKind;
use bayes_admm_cli::commands::{self, Outcome};
use bayes_admm_cli::config::{parse_family, MethodName, Overrides, RunConfig};
use bayes_admm_cli::CliError;
use clap::{Args, Parser, Subcommand};

/// Federated ADMM and Bayesian-ADMM experiments.
///
/// Exit codes: 0 success, 1 error, 2 reported divergence, 3 residuals above tolerance.
#[derive(Parser)]
#[command(name = "bayes-admm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured rounds, writing trace.jsonl, summary.json and checkpoint.json.
    Run(RunArgs),
    /// Run a grid over --rho and --tau (comma-separated) and write sweep.csv.
    Sweep(RunArgs),
    /// Print the fixed-point residuals of a checkpoint.
    Verify {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Print the closed-form posterior of a conjugate (quadratic) configuration.
    Oracle(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; flags below take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    method: Option<MethodName>,
    #[arg(long, value_delimiter = ',')]
    rho: Vec<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long, value_parser = parse_family)]
    family: Option<FamilyKind>,
    /// Also write chart.svg.
    #[arg(long)]
    svg: bool,
}

fn single(name: &str, v: &[f64]) -> Result<Option<f64>, CliError> {
    match v {
        [] => Ok(None),
        [x] => Ok(Some(*x)),
        _ => Err(CliError::Config(format!(
            "--{name} takes one value here; use `sweep` for grids"
        ))),
    }
}

impl RunArgs {
    fn resolve(&self, grid: bool) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let (rho, tau) = if grid {
            (None, None)
        } else {
            (single("rho", &self.rho)?, single("tau", &self.tau)?)
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            rounds: self.rounds,
            method: self.method,
            rho,
            gamma: self.gamma,
            tau,
            delta: self.delta,
            damping: self.damping,
            family: self.family,
            svg: self.svg,
        });
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Run(args) => {
            let res = commands::run(&args.resolve(false)?)?;
            let s = &res.summary;
            match &s.divergence {
                Some(ev) => eprintln!("diverged in round {} ({}): {}", ev.round, ev.error, ev.quantity),
                None => println!(
                    "{} rounds of {}; rounds_to_tol = {}; output in {}",
                    s.rounds_run,
                    s.method,
                    s.rounds_to_tol.map_or("-".to_string(), |r| r.to_string()),
                    res.dir.display()
                ),
            }
            Ok(res.outcome)
        }
        Command::Sweep(args) => {
            let cfg = args.resolve(true)?;
            let rows = commands::sweep(&cfg, &args.rho, &args.tau)?;
            let failed = rows.iter().filter(|r| r.status == "error").count();
            println!(
                "{} cells ({failed} failed); table in {}",
                rows.len(),
                cfg.out.join("sweep.csv").display()
            );
            Ok(Outcome::Completed)
        }
        Command::Verify { checkpoint, tol } => {
            let r = commands::verify(&checkpoint)?;
            println!("consensus {:e}", r.consensus);
            println!("dual      {:e}", r.dual);
            println!("server    {:e}", r.server);
            println!("dual_map  {:e}", r.dual_map);
            // an infinite tolerance accepts anything, including non-finite residuals
            Ok(if tol == f64::INFINITY || r.within(tol) {
                Outcome::Completed
            } else {
                Outcome::ResidualsAboveTol
            })
        }
        Command::Oracle(args) => {
            let report = commands::oracle(&args.resolve(false)?)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?;
            println!("{text}");
            Ok(Outcome::Completed)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(outcome) => ExitCode::from(outcome.exit_code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
