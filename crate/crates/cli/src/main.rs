use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tvo_cli::harness::{
    emit_integrand, run_schedule_study, run_verify, train, write_integrand, write_report, write_study,
    write_trainlog, ExperimentConfig, Init, Objective, Result, Strategy,
};

#[derive(Parser)]
#[command(name = "tvo", version, about = "Thermodynamic variational objective experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the identity suite; exits nonzero if any check fails.
    Verify(ConfigArgs),
    /// Exact gaps of every schedule strategy for K in {2, 5, 10, 30, 50}.
    ScheduleStudy(ConfigArgs),
    /// Train on synthetic data drawn from the model file.
    Train(ConfigArgs),
    /// Tabulate (beta, eta, var) on 201 evenly spaced points.
    Integrand {
        #[command(flatten)]
        config: ConfigArgs,
        /// CSV of log importance weights (rows are samples, columns datapoints).
        #[arg(long)]
        log_weights: Option<PathBuf>,
    },
}

/// Flags override values loaded with `--config`.
#[derive(Args)]
struct ConfigArgs {
    /// JSON file with any subset of the config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model_spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    objective: Option<Objective>,
    #[arg(long, value_enum)]
    schedule_strategy: Option<Strategy>,
    #[arg(short = 'K', long = "k")]
    k: Option<usize>,
    #[arg(short = 'S', long = "s")]
    s: Option<usize>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(short = 'J', long = "j")]
    j: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    refresh_every: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    init: Option<Init>,
}

impl ConfigArgs {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_path(p)?,
            None => ExperimentConfig::default(),
        };
        if self.model_spec.is_some() {
            c.model_spec = self.model_spec;
        }
        if self.beta1.is_some() {
            c.beta1 = self.beta1;
        }
        if self.j.is_some() {
            c.j = self.j;
        }
        c.objective = self.objective.unwrap_or(c.objective);
        c.schedule_strategy = self.schedule_strategy.unwrap_or(c.schedule_strategy);
        c.k = self.k.unwrap_or(c.k);
        c.s = self.s.unwrap_or(c.s);
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.learning_rate = self.learning_rate.unwrap_or(c.learning_rate);
        c.seed = self.seed.unwrap_or(c.seed);
        c.refresh_every = self.refresh_every.unwrap_or(c.refresh_every);
        c.output_dir = self.output_dir.unwrap_or(c.output_dir);
        c.init = self.init.unwrap_or(c.init);
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify(args) => {
            let config = args.resolve()?;
            let report = run_verify(&config)?;
            let path = write_report(&config, &report)?;
            for c in &report.checks {
                let mark = if c.passed { "ok  " } else { "FAIL" };
                println!("{mark} {:<36} residual {:.3e}  tol {:.1e}  cases {}", c.name, c.residual, c.tolerance, c.cases);
            }
            println!("wrote {}", path.display());
            Ok(report.passed)
        }
        Command::ScheduleStudy(args) => {
            let config = args.resolve()?;
            let rows = run_schedule_study(&config)?;
            println!("wrote {}", write_study(&config, &rows)?.display());
            Ok(true)
        }
        Command::Train(args) => {
            let config = args.resolve()?;
            let log = train(&config)?;
            let path = write_trainlog(&config, &log)?;
            if let Some(first) = log.initial_kl() {
                println!("KL[q || p(z|x)]: {first:.6} -> {:.6}", log.final_kl);
            }
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Integrand { config, log_weights } => {
            let config = config.resolve()?;
            let rows = emit_integrand(&config, log_weights.as_deref())?;
            println!("wrote {}", write_integrand(&config, &rows)?.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
