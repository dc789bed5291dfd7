use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use curriculum_lab::harness::{
    checkpoint_config, load_checkpoint, read_corpus, run_baseline_suite, save_checkpoint, RunConfig, SchedulerKind,
    Trainer, CORPUS_FILE,
};

#[derive(Parser)]
#[command(name = "curriculum-lab", version, about = "Class-ranking curriculum scheduler on a synthetic segmentation task")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training run and print the final report as JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory for metrics, report and the final checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per (scheduler, seed); prints the comparison table.
    Suite {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', required = true)]
        schedulers: Vec<SchedulerKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out evaluation of a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config stored with the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the GM-VAE pretraining corpus of a run, one state per line.
    DumpState {
        #[arg(long)]
        run: PathBuf,
    },
}

fn train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut t = Trainer::new(cfg, out)?;
    let end = t.cfg.total_steps;
    t.run_until(end)?;
    if let Some(dir) = out {
        save_checkpoint(&mut t, &dir.join("checkpoint"))?;
    }
    let report = t.finish()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn suite(config: &Path, seeds: &[u64], kinds: &[SchedulerKind], out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let report = run_baseline_suite(&cfg, seeds, kinds, out)?;
    print!("{}", report.table());
    let failed = report.rows.iter().filter(|r| r.report.is_none()).count();
    if failed > 0 {
        bail!("{failed} of {} runs failed", report.rows.len());
    }
    Ok(())
}

fn eval(checkpoint: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => checkpoint_config(checkpoint)?,
    };
    let mut t = load_checkpoint(cfg, checkpoint, None)?;
    let report = t.finish()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn dump_state(run: &Path) -> Result<()> {
    let path = run.join(CORPUS_FILE);
    let rows = read_corpus(&path).with_context(|| format!("run {} has no pretraining corpus", run.display()))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        println!("{}", line.join(","));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train { config, seed, out } => train(config, *seed, out.as_deref()),
        Cmd::Suite {
            config,
            seeds,
            schedulers,
            out,
        } => suite(config, seeds, schedulers, out.as_deref()),
        Cmd::Eval { checkpoint, config } => eval(checkpoint, config.as_deref()),
        Cmd::DumpState { run } => dump_state(run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
