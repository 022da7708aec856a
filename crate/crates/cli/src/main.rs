use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedseg::anomaly::DetectorConfig;
use fedseg_cli::commands::resolve_config;
use fedseg_cli::{cmd_compare, cmd_detect, cmd_eval, cmd_run, init_threads, load_config, CliError};

#[derive(Parser)]
#[command(name = "fedseg", version, about = "Federated segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every model of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Flag faulty clients from the federated training logs of a run.
    Detect {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        delta_abs: Option<f64>,
        #[arg(long)]
        delta_rel: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Paired significance tests within and across runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "significance.csv")]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Experiment file; defaults to the manifest of the run that wrote the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out
                .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(format!("runs/seed{}", cfg.seed)));
            let manifest = cmd_run(&cfg, &out)?;
            println!(
                "{} models written to {}",
                manifest.models.len(),
                out.display()
            );
        }
        Command::Detect {
            run,
            delta_abs,
            delta_rel,
            k,
            warmup,
        } => {
            let d = DetectorConfig::default();
            let cfg = DetectorConfig {
                delta_abs: delta_abs.unwrap_or(d.delta_abs),
                delta_rel: delta_rel.unwrap_or(d.delta_rel),
                k_consecutive: k.unwrap_or(d.k_consecutive),
                warmup_epochs: warmup.unwrap_or(d.warmup_epochs),
            };
            for (config, report) in cmd_detect(&run, &cfg)? {
                println!("{config}: flagged {:?}", report.flagged);
            }
        }
        Command::Compare { runs, out } => {
            let rows = cmd_compare(&runs, &out)?;
            let significant = rows.iter().filter(|r| r.significant).count();
            println!(
                "{} tests, {significant} significant; written to {}",
                rows.len(),
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            out,
        } => {
            let cfg = resolve_config(&checkpoint, config.as_deref())?;
            let records = cmd_eval(&checkpoint, &data, &cfg, out.as_deref())?;
            let median = fedseg::metrics::median(&records, fedseg::metrics::Metric::Dice);
            println!("{} images, median dice {median:.4}", records.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
