use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vit_necil::config::ExperimentConfig;
use vit_necil::run::{self, AblationAxis};
use vit_necil::Result;

#[derive(Debug, Parser)]
#[command(
    name = "vit-necil",
    version,
    about = "Exemplar-free class-incremental training of a small vision transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every task of a run and write checkpoints and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` with a dotted key, e.g. `trainer.epochs=1`. Repeatable.
        #[arg(long = "override", value_name = "K=V")]
        overrides: Vec<String>,
        /// Run directory; defaults to `runs/<config hash>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a run's checkpoints and print the metrics report.
    Eval { run_dir: PathBuf },
    /// Export normalized patch weights of one test image as CSV.
    DumpWeights {
        run_dir: PathBuf,
        #[arg(long)]
        task: usize,
        #[arg(long)]
        image: usize,
        /// Output file; defaults to `<run_dir>/patch_weights_task<T>_image<ID>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the variants of one ablation axis over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// pks_on_off, pr_on_off, weight_mode or components.
        #[arg(long)]
        axis: String,
        #[arg(long = "override", value_name = "K=V")]
        overrides: Vec<String>,
        #[arg(long, default_value = "ablations")]
        out: PathBuf,
    },
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            overrides,
            out,
        } => {
            let config = ExperimentConfig::load(&config, &overrides)?;
            let dir = out.unwrap_or_else(|| Path::new("runs").join(&config.hash()[..12]));
            let summary = run::train_run(&config, &dir)?;
            print!("{}", summary.report.to_table());
            println!("run directory: {}", dir.display());
        }
        Command::Eval { run_dir } => {
            let summary = run::eval_run(&run_dir)?;
            print!("{}", summary.report.to_table());
        }
        Command::DumpWeights {
            run_dir,
            task,
            image,
            out,
        } => {
            let weights = run::patch_weights(&run_dir, task, image)?;
            let side = (weights.len() as f64).sqrt().round() as usize;
            let path = out.unwrap_or_else(|| {
                run_dir.join(format!("patch_weights_task{task}_image{image}.csv"))
            });
            run::write_patch_weights(&path, &weights, side)?;
            println!("{}", path.display());
        }
        Command::Ablate {
            config,
            axis,
            overrides,
            out,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let config = ExperimentConfig::load(&config, &overrides)?;
            let report = run::run_ablation(&config, axis, &out)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
