use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use htgnn::runner::{self, ablation_table};
use htgnn::synthdata::{self, DatasetHeader, GenConfig};
use htgnn::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "htgnn",
    about = "Multi-horizon lifetime value model: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population.
    Gen {
        #[arg(long, default_value_t = 20_000)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        segments: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset; writes checkpoints, logs and the resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint. The config is read from `config.txt` next to
    /// the checkpoint unless given.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report file; defaults to `eval_report.jsonl` beside the checkpoint.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the full model and every single-change variant per seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Number of seeds, counted up from the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Finite-difference check of the full loss gradient on 8 users.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        coords: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen {
            n,
            segments,
            seed,
            out,
        } => {
            let cfg = GenConfig {
                n_users: n,
                n_segments: segments,
                seed,
                ..GenConfig::default()
            };
            let records = synthdata::sample_population(&cfg)?;
            synthdata::write_dataset(&out, &DatasetHeader::for_config(&cfg), &records)?;
            println!("wrote {} users to {}", records.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let (_, records) = synthdata::read_dataset(&data)?;
            let start = Instant::now();
            let summary = runner::run(&cfg, &records, &out)?;
            for e in &summary.trained.epochs {
                println!(
                    "epoch {:>3}  train {:.5}  valid {:.5}",
                    e.epoch, e.train_mean, e.valid
                );
            }
            println!("test split, best checkpoint:\n{}", summary.test.table());
            println!(
                "finished in {:.1}s; artifacts in {}",
                start.elapsed().as_secs_f64(),
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            report,
        } => {
            let dir = checkpoint.parent().unwrap_or(Path::new("."));
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::load(&dir.join("config.txt"))?,
            };
            let model = runner::load_checkpoint(&checkpoint, &cfg)?;
            let (_, records) = synthdata::read_dataset(&data)?;
            let result = runner::evaluate(&model, &records)?;
            print!("{}", result.table());
            let report = report.unwrap_or_else(|| dir.join("eval_report.jsonl"));
            let lines: Vec<String> = result
                .tasks
                .iter()
                .map(|t| serde_json::to_string(t).expect("metrics serialize"))
                .collect();
            std::fs::write(&report, lines.join("\n") + "\n").map_err(|e| Error::io(&report, e))?;
        }
        Command::Ablate {
            config,
            data,
            seeds,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (_, records) = synthdata::read_dataset(&data)?;
            let seed_list: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
            let rows = runner::ablate(&cfg, &records, &seed_list, |r| {
                eprintln!("done: {} seed {}", r.variant, r.seed);
            })?;
            print!("{}", ablation_table(&rows));
        }
        Command::Gradcheck { config, coords } => {
            let cfg = load_config(config.as_deref())?;
            let records = runner::gradcheck_records(cfg.seed)?;
            let start = Instant::now();
            let report = runner::gradcheck_model(&cfg, &records, coords)?;
            for (group, (max, n)) in report.max_by_group(2) {
                println!("{group:<24} {n:>4} coords  max rel err {max:.3e}");
            }
            let frac = report.pass_fraction();
            println!(
                "{:.1}% of {} coordinates within {:e} ({:.1}s)",
                100.0 * frac,
                coords,
                report.tolerance,
                start.elapsed().as_secs_f64()
            );
            return Ok(frac >= 0.95);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match &e {
                Error::Divergence { .. } => 3,
                Error::Config(_) => 2,
                e if e.is_data_error() => 2,
                _ => 1,
            })
        }
    }
}
