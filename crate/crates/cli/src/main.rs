use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lvgp::model::write_latents;
use lvgp_cli::{
    aggregate, describe, latents_from_model, median_mad, read_history_file, run_experiment, write_convergence,
    LoadedProblem, RunConfig, RunOptions,
};

#[derive(Parser)]
#[command(name = "lvgp", version, about = "Latent-variable GP Bayesian optimization over mixed spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicated campaigns described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        n0: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        noise_sd: Option<f64>,
    },
    /// Recompute the convergence table from history files.
    Aggregate {
        #[arg(required = true)]
        histories: Vec<PathBuf>,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Exhaustively scan the tabular problem of a config file.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export the latent embedding of a saved model.
    Latents {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run {
            config,
            seed,
            replicates,
            iterations,
            n0,
            output,
            workers,
            noise_sd,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.seed = seed;
            cfg.replicates = replicates.unwrap_or(cfg.replicates);
            cfg.iterations = iterations.unwrap_or(cfg.iterations);
            cfg.n0 = n0.unwrap_or(cfg.n0);
            cfg.output = output.unwrap_or(cfg.output);
            cfg.workers = workers.unwrap_or(cfg.workers);
            cfg.noise_sd = noise_sd.unwrap_or(cfg.noise_sd);
            let summary = run_experiment(&cfg, RunOptions::default())?;
            let finals = summary.final_incumbents();
            let (med, mad) = median_mad(&finals);
            println!(
                "{} replicates completed, {} failed; results in {}",
                summary.outcomes.len(),
                summary.failures.len(),
                cfg.output.display()
            );
            println!("final incumbent: median {med}, MAD {mad}; optimum {}", summary.optimum);
            if let Some(s) = summary.successes() {
                println!("exact optimum found in {s}/{} replicates", summary.outcomes.len());
            }
            Ok(if summary.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Aggregate { histories, output } => {
            let named = histories
                .iter()
                .map(|p| Ok((p.display().to_string(), read_history_file(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let rows = aggregate(&named)?;
            match output {
                Some(p) => write_convergence(&rows, BufWriter::new(File::create(&p).with_context(|| p.display().to_string())?))?,
                None => write_convergence(&rows, io::stdout().lock())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { config } => {
            let cfg = RunConfig::load(&config)?;
            let problem = LoadedProblem::load(&cfg.problem)?;
            let LoadedProblem::Table { table, .. } = &problem else {
                anyhow::bail!("oracle needs a tabular problem");
            };
            let (tuple, value) = table.exhaustive_oracle();
            let (lo, hi) = table.response_range();
            println!("rows: {}", table.len());
            println!("response range: [{lo}, {hi}]");
            println!("best: {} -> {value}", describe(table.space(), &lvgp::MixedPoint::qual(tuple)));
            Ok(ExitCode::SUCCESS)
        }
        Command::Latents { model, output } => {
            let rows = latents_from_model(&model)?;
            match output {
                Some(p) => write_latents(&rows, BufWriter::new(File::create(&p).with_context(|| p.display().to_string())?), b',')?,
                None => write_latents(&rows, io::stdout().lock(), b',')?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
