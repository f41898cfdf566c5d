//! Command-line front end.
//!
//! Every subcommand reads one experiment config (`--config`), optionally
//! overrides the evaluation seed (`--seed`) and the output directory
//! (`--out`), and writes its report files there. Exit codes: 0 success,
//! 2 validation, 3 parse, 4 missing capability, 5 i/o.

use clap::{Args, Parser, Subcommand};
use medrdf::classifier::save_checkpoint;
use medrdf::harness::report::emit_report;
use medrdf::harness::{Experiment, ExperimentConfig};
use medrdf::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "medrdf",
    about = "Noisy-copy majority-vote defense: training, attacks, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the evaluation master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the built-in model and write a checkpoint plus training trace.
    Train(Common),
    /// Craft adversarial test sets and report per-attack success rates.
    Attack(Common),
    /// Full defense-accuracy matrix: undefended and defended, per attack.
    Defend(Common),
    /// Accuracy over noise scale and attack budget.
    SweepSigma(Common),
    /// Accuracy and per-image time over copy counts.
    SweepN(Common),
    /// Correct/robust breakdown at the configured threshold.
    RmReport(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c)
            | Command::Attack(c)
            | Command::Defend(c)
            | Command::SweepSigma(c)
            | Command::SweepN(c)
            | Command::RmReport(c) => c,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.eval.master_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.eval.out_dir = out.clone();
    }
    Ok(cfg)
}

fn write_train_outputs(exp: &Experiment) -> Result<()> {
    let out_dir = &exp.cfg.eval.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let ckpt = out_dir.join("smallnet.ckpt");
    save_checkpoint(&exp.model, &ckpt)?;
    println!("checkpoint: {}", ckpt.display());

    let trace_path = out_dir.join("train_trace.csv");
    let display = trace_path.display().to_string();
    let mut writer = csv::Writer::from_path(&trace_path)
        .map_err(|e| Error::InvalidInput(format!("{display}: {e}")))?;
    writer
        .write_record(["epoch", "lr", "mean_loss", "accuracy"])
        .ok();
    for row in &exp.train_trace {
        writer
            .write_record([
                row.epoch.to_string(),
                format!("{}", row.lr),
                format!("{}", row.mean_loss),
                format!("{}", row.accuracy),
            ])
            .ok();
    }
    writer.flush().map_err(|e| Error::io(display, e))?;
    println!("trace: {}", trace_path.display());
    if let Some(last) = exp.train_trace.last() {
        println!(
            "final training accuracy {:.1}% (loss {:.4})",
            100.0 * last.accuracy,
            last.mean_loss
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.command.common())?;
    let out_dir = cfg.eval.out_dir.clone();
    let exp = Experiment::prepare(cfg)?;
    let (table, basename) = match &cli.command {
        Command::Train(_) => {
            write_train_outputs(&exp)?;
            return Ok(());
        }
        Command::Attack(_) => (exp.attack_report()?, "attack_eval"),
        Command::Defend(_) => (exp.defense_eval()?, "defense_eval"),
        Command::SweepSigma(_) => (exp.sweep_sigma_eps()?, "sweep_sigma_eps"),
        Command::SweepN(_) => (exp.sweep_copies()?, "sweep_copies"),
        Command::RmReport(_) => (exp.rm_breakdown()?, "rm_breakdown"),
    };
    let files = emit_report(&table, &out_dir, basename)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
