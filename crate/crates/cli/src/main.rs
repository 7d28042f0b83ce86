use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cycda_cli::{
    cmd_ablate, cmd_evaluate, cmd_generate, cmd_train, load_spec, CliError, ExperimentConfig, Overrides, Variant,
};

/// Cyclic image-to-video domain adaptation on a synthetic benchmark.
#[derive(Parser)]
#[command(name = "cycda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset file.
    Generate {
        /// Benchmark spec (TOML); the default benchmark if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file to write; a `.tsv` metadata listing is written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every seed of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run this seed only.
        #[arg(long)]
        seed: Option<u64>,
        /// Replace the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ablation case A-F, replacing the config's `case`.
        #[arg(long)]
        variant: Option<String>,
        /// Train on this dataset file instead of the config's data source.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Compare ablation cases, stage-3 strategies and aggregation strategies.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated rows: case=X, strategy=NAME, aggregation=NAME,
        /// cases, strategies, aggregations or all.
        #[arg(long, default_value = "all")]
        variant: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Report accuracy, per-class accuracy and the confusion matrix of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also write `evaluation.txt` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf, overrides: Overrides) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::load(path)?;
    overrides.apply(&mut config);
    Ok(config)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { config, out, seed } => {
            let spec = load_spec(config.as_deref())?;
            let ds = cmd_generate(&spec, &out, seed)?;
            println!(
                "wrote {} ({} source images, {} source videos, {} target train, {} target test)",
                out.display(),
                ds.source_images.len(),
                ds.source_videos.len(),
                ds.target_train.len(),
                ds.target_test.len()
            );
        }
        Command::Train {
            config,
            seed,
            out,
            variant,
            dataset,
        } => {
            let mut config = load(&config, Overrides { seed, out, dataset })?;
            if let Some(v) = variant {
                config.case = v
                    .parse()
                    .map_err(|e| CliError::Validation(format!("--variant: {e}")))?;
            }
            cmd_train(&config)?;
            let summary = std::fs::read_to_string(config.out_dir.join("summary.tsv"))
                .map_err(|e| CliError::Io {
                    path: config.out_dir.join("summary.tsv").display().to_string(),
                    source: e,
                })?;
            print!("{summary}");
        }
        Command::Ablate {
            config,
            seed,
            out,
            variant,
            dataset,
        } => {
            let config = load(&config, Overrides { seed, out, dataset })?;
            let variants = Variant::parse_list(&variant)?;
            print!("{}", cmd_ablate(&config, &variants)?.to_text());
        }
        Command::Evaluate { checkpoint, dataset, out } => {
            print!("{}", cmd_evaluate(&checkpoint, &dataset, out.as_deref())?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
