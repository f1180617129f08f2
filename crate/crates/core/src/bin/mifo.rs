use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use mifo::experiment::{
    base_policy, emit_plots, evaluate, probe_command, split_questions, Checkpoint, EvalSettings,
    ExperimentConfig, Trainer,
};
use mifo::seeds::{self, Stream};
use mifo::task::Split;
use mifo::{Error, Result};

#[derive(Parser)]
#[command(name = "mifo", about = "Interleaved RL/SFT lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured training mode.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// grad-drop | prune | magnitude | selective-drop | dr
    Probe {
        kind: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt_a: Option<PathBuf>,
        #[arg(long)]
        ckpt_b: Option<PathBuf>,
    },
    /// pass@1 and avg@k of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        k: usize,
    },
    /// CSV and SVG charts from metrics streams.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cmd: Cmd) -> Result<serde_json::Value> {
    match cmd {
        Cmd::Train { config, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut trainer = match resume {
                Some(ckpt) => Trainer::resume(cfg, &ckpt, None)?,
                None => {
                    let base = base_policy(&cfg)?;
                    Trainer::new(cfg, base, None)?
                }
            };
            let s = trainer.run()?;
            Ok(json!({
                "command": "train",
                "finished": s.finished,
                "rl_steps": s.rl_steps,
                "sft_phases": s.sft_phases,
                "checkpoint": s.checkpoint,
                "metrics": s.metrics,
                "final_eval": s.final_eval,
            }))
        }
        Cmd::Probe { kind, config, ckpt_a, ckpt_b } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = probe_command(kind.parse()?, &cfg, ckpt_a.as_deref(), ckpt_b.as_deref())?;
            Ok(json!({"command": "probe", "probe": kind, "report": report}))
        }
        Cmd::Eval { ckpt, split, k } => {
            if k == 0 {
                return Err(Error::Invalid("k must be at least 1".into()));
            }
            let split: Split = split.parse()?;
            let c = Checkpoint::load(&ckpt)?;
            let cfg = &c.manifest.config;
            let params = c.params()?;
            let qs = split_questions(&cfg.task, split, cfg.eval.questions);
            let s = EvalSettings {
                k,
                temperature: cfg.eval.temperature,
                max_new_tokens: cfg.grpo.max_new_tokens,
                seed: seeds::derive(cfg.master_seed, Stream::Eval, &[]),
            };
            let scores = evaluate(&params, &cfg.model, &qs, &s)?;
            Ok(json!({"command": "eval", "split": split.to_string(), "scores": scores}))
        }
        Cmd::Plot { metrics, out } => {
            let s = emit_plots(&metrics, &out)?;
            Ok(json!({
                "command": "plot",
                "records": s.records,
                "skipped": s.skipped,
                "csv": s.csv,
                "svg": s.svg,
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match execute(cli.cmd) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
