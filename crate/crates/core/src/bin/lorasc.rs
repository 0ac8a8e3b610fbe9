use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lorasc::eval::DEFAULT_TAU;
use lorasc::harness::commands::{cmd_ablate, cmd_evaluate, cmd_inspect, cmd_rank, cmd_train, config_from_checkpoint};
use lorasc::harness::{parse_config, read_header, RunConfig, TrainOptions};
use lorasc::Result;

#[derive(Parser)]
#[command(name = "lorasc", version, about = "Cascaded LoRA experts with slow EMA and noise tuning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fine-tune every configured seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint; its embedded configuration is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many data epochs and checkpoint.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Run the four-level ladder over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on its validation, test and corrupted splits.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write `eval.csv` (or `.jsonl`) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Effective rank of the cumulative merged delta per target.
    Rank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
    },
    /// Print a checkpoint header summary as JSON.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// f32 or f64
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_expert: Option<usize>,
    /// vanilla, cascade, slow or full
    #[arg(long)]
    ladder: Option<String>,
    /// none or cola
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    discard_noise: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_plus_ratio: Option<f64>,
    /// Extra `section.key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut o: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        put("run.seed", self.seed.map(|v| v.to_string()));
        put("run.seeds", self.seeds.clone());
        put("run.out", self.out.as_ref().map(|p| p.display().to_string()));
        put("run.precision", self.precision.clone());
        put("cascade.alpha", self.alpha.map(|v| v.to_string()));
        put("cascade.lambda", self.lambda.map(|v| v.to_string()));
        put("adapter.rank", self.rank.map(|v| v.to_string()));
        put("cascade.epochs", self.epochs.map(|v| v.to_string()));
        put("cascade.steps_per_expert", self.steps_per_expert.map(|v| v.to_string()));
        put("cascade.ladder", self.ladder.clone());
        put("cascade.baseline", self.baseline.clone());
        put("cascade.discard_noise", self.discard_noise.then(|| "true".into()));
        put("optim.lr", self.lr.map(|v| v.to_string()));
        put("optim.lr_plus_ratio", self.lr_plus_ratio.map(|v| v.to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| lorasc::Error::Argument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(o)
    }

    fn load(&self) -> Result<RunConfig> {
        parse_config(self.config.as_deref(), &self.overrides()?)
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            run,
            resume,
            stop_after_epoch,
        } => {
            let cfg = match &resume {
                Some(p) => {
                    // only the output directory may change on resume
                    let out: Vec<_> = run.out.iter().map(|o| ("run.out".to_string(), o.display().to_string())).collect();
                    config_from_checkpoint(&read_header(p)?, &out)?
                }
                None => run.load()?,
            };
            let opts = TrainOptions {
                resume,
                stop_after_epoch,
            };
            for o in cmd_train(&cfg, &opts)? {
                let state = if o.finished { "finished" } else { "paused" };
                let val = o.final_val_loss.map_or("n/a".into(), |v| format!("{v:.6}"));
                println!(
                    "seed {} {state}: val loss {val}, metrics {}, checkpoint {}",
                    o.seed,
                    o.metrics.display(),
                    o.checkpoint.display()
                );
            }
        }
        Cmd::Ablate { run } => {
            let cfg = run.load()?;
            let out = cmd_ablate(&cfg)?;
            println!("{:<18} {:<24} {:>5} {:>12} {:>12}", "level", "split", "seeds", "loss mean", "loss std");
            for s in &out.report.summary {
                println!(
                    "{:<18} {:<24} {:>5} {:>12.6} {:>12.6}",
                    s.row, s.split, s.seeds, s.loss_mean, s.loss_std
                );
            }
            println!("report: {}", out.report_path.display());
        }
        Cmd::Evaluate { checkpoint, out } => {
            for r in cmd_evaluate(&checkpoint, out.as_deref())? {
                let acc = r.accuracy.map_or(String::new(), |a| format!(" accuracy {a:.4}"));
                println!("{:<24} loss {:.6}{acc}", r.split, r.loss);
            }
        }
        Cmd::Rank { checkpoint, tau } => {
            for r in cmd_rank(&checkpoint, tau)? {
                let top = r.singular_values.first().copied().unwrap_or(0.0);
                println!("{:<16} rank {:>4} of {:>4} (sigma_1 {top:.4e})", r.target, r.effective_rank, r.singular_values.len());
            }
        }
        Cmd::Inspect { checkpoint } => {
            let v = cmd_inspect(&checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&v).expect("json value serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
