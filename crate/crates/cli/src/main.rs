use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use uda_forge::corpus::synth_corpus;
use uda_forge::expcli::config::RunConfig;
use uda_forge::expcli::run::run;
use uda_forge::expcli::sweep::{expand, sweep, Grid};
use uda_forge::expcli::tsne::{coords_csv, read_features_csv, tsne_project, TsneConfig};

#[derive(Parser)]
#[command(name = "uda-forge", version, about = "Domain adaptation experiments for text classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one configured run.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Execute every cell of a parameter grid over a base config.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Write a synthetic source/target pair as JSONL.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        shift: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project a feature table to two dimensions.
    Tsne {
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    /// Bad input: config, grid, parameters. Exit code 2.
    Invalid(anyhow::Error),
    /// Anything that went wrong while executing. Exit code 1.
    Runtime(anyhow::Error),
}

fn invalid<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Invalid)
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

fn load_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))
}

fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Run { config, runs_dir } => {
            let cfg = invalid(load_config(&config))?;
            let out = runtime(run(&cfg, &runs_dir).context("run failed"))?;
            println!("{}", out.dir.display());
            if let Some(m) = out.result.target_test {
                println!("target test: acc {:.4} f1 {:.4}", m.accuracy, m.f1);
            }
        }
        Command::Sweep { config, grid, runs_dir } => {
            let base = invalid(load_json(&config))?;
            let grid_text =
                invalid(std::fs::read_to_string(&grid).with_context(|| format!("cannot read {}", grid.display())))?;
            let grid = invalid(Grid::from_json(&grid_text).context("invalid grid"))?;
            invalid(expand(&base, &grid).context("invalid sweep cell"))?;
            let report = runtime(sweep(&base, &grid, &runs_dir).context("sweep failed"))?;
            let failed = report.cells.iter().filter(|c| c.outcome.is_err()).count();
            println!("{}", report.csv_path.display());
            let resumed = report.cells.iter().filter(|c| c.resumed).count();
            println!("{} cells, {resumed} resumed, {failed} failed", report.cells.len());
        }
        Command::Synth { n, shift, seed, out } => {
            let (source, target) = invalid(synth_corpus(n, shift, seed).context("invalid synth parameters"))?;
            let write = || -> Result<()> {
                std::fs::create_dir_all(&out)?;
                source.write_jsonl(&out.join("source.jsonl"))?;
                target.write_jsonl(&out.join("target.jsonl"))?;
                Ok(())
            };
            runtime(write())?;
            println!("{}", out.display());
        }
        Command::Tsne {
            features,
            out,
            perplexity,
            iters,
            seed,
        } => {
            let (ids, x) = invalid(
                read_features_csv(&features).with_context(|| format!("cannot read features from {}", features.display())),
            )?;
            let cfg = TsneConfig {
                perplexity,
                iters,
                seed,
                ..TsneConfig::default()
            };
            let projected = runtime(tsne_project(&x, &cfg).context("t-SNE failed"))?;
            log::info!("final KL {:.6}", projected.kl.last().copied().unwrap_or(f64::NAN));
            let text = runtime(coords_csv(ids.as_deref(), &projected.coords).map_err(Into::into))?;
            runtime(std::fs::write(&out, text).with_context(|| format!("cannot write {}", out.display())))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
