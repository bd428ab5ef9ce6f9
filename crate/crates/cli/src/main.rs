mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tsad::data::{AnomalyKind, CsvSchema};
use tsad::pipeline::{
    emit_plots, run_benchmark, run_from, score_csv, RunConfig, RunManifest, LAST_STAGE,
};

#[derive(Parser)]
#[command(
    name = "tsad",
    version,
    about = "Unsupervised time-series anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and evaluate.
    Train(ConfigArgs),
    /// Rerun a previous run from a given stage, reusing earlier checkpoints.
    Resume {
        /// Run directory holding manifest.json and config.toml.
        #[arg(long)]
        run: PathBuf,
        /// 1 pretraining, 2 band control and encoder, 3 prototypes, 4 evaluation.
        #[arg(long, default_value_t = 3)]
        from_stage: u8,
        /// `path=value` overrides applied to the stored configuration.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a CSV series with a finished run.
    Score {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        timestamp: Option<String>,
        /// Value column, repeatable. Defaults to every other column.
        #[arg(long = "value")]
        values: Vec<String>,
        #[arg(long)]
        label: Option<String>,
    },
    /// Run the synthetic benchmark over anomaly kinds and seeds.
    Benchmark {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "seasonal,global")]
        kinds: Vec<AnomalyKind>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Write plot data for a finished run.
    Plots {
        #[arg(long)]
        run: PathBuf,
        /// Also render an SVG overview.
        #[arg(long)]
        svg: bool,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `path=value` overrides such as `stage3.bank.k=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let manifest = run_from(&cfg, 1)?;
            print_report(&cfg.output, &manifest)
        }
        Command::Resume {
            run,
            from_stage,
            overrides,
        } => {
            if !(1..=LAST_STAGE).contains(&from_stage) {
                bail!("--from-stage must be between 1 and {LAST_STAGE}");
            }
            let mut cfg = RunConfig::load(run.join("config.toml"))
                .with_context(|| format!("cannot resume from {}", run.display()))?
                .with_overrides(&overrides)?;
            cfg.output = run.clone();
            let manifest = run_from(&cfg, from_stage)?;
            print_report(&run, &manifest)
        }
        Command::Score {
            run,
            input,
            output,
            timestamp,
            values,
            label,
        } => {
            let schema = CsvSchema {
                timestamp,
                values,
                label,
            };
            let scored = score_csv(&run, &input, &schema, &output)?;
            let flagged = scored
                .scores
                .scores
                .iter()
                .filter(|&&s| s >= scored.threshold)
                .count();
            println!(
                "scored {} windows, {flagged} at or above threshold {:.6}; wrote {}",
                scored.scores.len(),
                scored.threshold,
                output.display()
            );
            if let Some(r) = scored.report {
                println!("{}", serde_json::to_string_pretty(&r)?);
            }
            Ok(())
        }
        Command::Benchmark {
            config,
            kinds,
            seeds,
        } => {
            let cfg = config.resolve()?;
            let table = run_benchmark(&cfg, &kinds, &seeds, &cfg.output)?;
            println!("{:<12} {:>6} {:>8} {:>8}", "kind", "seed", "auc", "std");
            for r in table.rows.iter().chain(&table.aggregates) {
                let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
                let std = r.auc_std.map_or_else(String::new, |s| format!("{s:.4}"));
                println!(
                    "{:<12} {seed:>6} {:>8.4} {std:>8}",
                    r.kind.to_string(),
                    r.auc
                );
            }
            println!("wrote {}", cfg.output.display());
            Ok(())
        }
        Command::Plots { run, svg } => {
            let data = emit_plots(&run)?;
            for f in [
                &data.files.series,
                &data.files.scores,
                &data.files.projection,
            ] {
                println!("wrote {}", f.display());
            }
            if svg {
                let path = run.join("plot.svg");
                render::overview(&data, &path)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn print_report(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let report = manifest
        .report
        .as_ref()
        .context("run finished without a report")?;
    println!("{}", serde_json::to_string_pretty(report)?);
    println!("artifacts in {}", dir.display());
    Ok(())
}
