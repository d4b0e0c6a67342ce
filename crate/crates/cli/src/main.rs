use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use boundaryface_cli::commands::{self, with_jobs};
use boundaryface_cli::{ExperimentConfig, Layout};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "boundaryface", version, about = "Margin-head experiments on synthetic noisy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the noisy training set, holdout, distractors, ledger and pairs.
    Gen(Common),
    /// Train every (head, seed) run.
    Train(Common),
    /// Verification accuracy per run and detection curves.
    Eval(Common),
    /// Finite-difference audit of every head's gradients.
    Gradcheck(Common),
    /// gen + train + eval over the closed/open noise grid.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `noise.closed_ratio=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (default: one per core).
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, Layout)> {
        let cfg = ExperimentConfig::load(self.config.as_deref(), &self.overrides)?;
        let layout = Layout::new(cfg.output_root());
        Ok((cfg, layout))
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(c) => {
            let (cfg, layout) = c.load()?;
            let s = commands::gen(&cfg, &layout)?;
            println!("train       {} samples ({} closed-set, {} open-set)", s.train, s.closed, s.open);
            println!("holdout     {} samples, {} pairs", s.holdout, s.pairs);
            println!("distractors {}", s.distractors);
            println!("disjoint    {}", s.disjoint);
            println!("wrote {}", layout.data_dir().display());
        }
        Command::Train(c) => {
            let (cfg, layout) = c.load()?;
            let runs = with_jobs(c.jobs, || commands::train_all(&cfg, &layout))??;
            for r in runs {
                println!("{:<24} final loss {:.4}  detected {}", r.run, r.final_loss, r.detected);
            }
        }
        Command::Eval(c) => {
            let (cfg, layout) = c.load()?;
            let s = with_jobs(c.jobs, || commands::eval_all(&cfg, &layout))??;
            for h in &s.heads {
                println!(
                    "{:<16} {:.4} ± {:.4}  ({} runs)",
                    h.head, h.mean_accuracy, h.std_accuracy, h.runs
                );
            }
            println!("wrote {}", layout.comparison().display());
            for p in &s.curves {
                println!("curve {}", p.display());
            }
        }
        Command::Gradcheck(c) => {
            let (cfg, _) = c.load()?;
            let lines = with_jobs(c.jobs, || commands::gradcheck(&cfg))??;
            let mut ok = true;
            for l in &lines {
                println!(
                    "{} {:<14} max_rel_error={:.3e} batches={} hard={} corrected={}",
                    if l.passed { "PASS" } else { "FAIL" },
                    l.head,
                    l.max_rel_error,
                    l.batches,
                    l.hard,
                    l.corrected
                );
                ok &= l.passed;
            }
            return Ok(ok);
        }
        Command::Sweep(c) => {
            let (cfg, layout) = c.load()?;
            let cells = with_jobs(c.jobs, || commands::sweep(&cfg, &layout))??;
            for cell in &cells {
                for h in &cell.heads {
                    println!(
                        "closed={:<5} open={:<5} {:<16} {:.4} ± {:.4}",
                        cell.closed, cell.open, h.head, h.mean_accuracy, h.std_accuracy
                    );
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
