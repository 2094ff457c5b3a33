use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use leafpush::bridge::ServeOptions;
use leafpush::commands;
use leafpush::config::{ConfigError, EvalMode, RunConfig};
use leafpush_core::env::MaskMode;

#[derive(Parser)]
#[command(name = "leafpush", version, about = "Occlusion-aware plant pushing: train, evaluate, deploy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Privileged,
    Zeroed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Randomized,
    Grid,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    envs: Option<usize>,
    /// Environment-step budget for training.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    rate_hz: Option<f64>,
    /// What the policy sees in the alpha channel.
    #[arg(long, value_enum)]
    mask_mode: Option<MaskArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with PPO; writes checkpoint.lpck and metrics.csv. `--checkpoint` resumes.
    Train(Common),
    /// Evaluate a checkpoint (or a uniform random policy without one).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Record one episode as trajectory.jsonl.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Also dump every frame (binary and PPM).
        #[arg(long)]
        frames: bool,
    },
    /// Publish the environment over TCP.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Episodes per session; 0 serves until the client disconnects.
        #[arg(long)]
        episodes: Option<usize>,
        /// Sessions before exiting; 0 serves forever.
        #[arg(long, default_value_t = 0)]
        sessions: usize,
        /// Wait indefinitely for each action instead of repeating the last one.
        #[arg(long)]
        no_deadline: bool,
    },
    /// Drive a server with a checkpoint policy.
    Client {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
    },
    /// Re-simulate a trajectory and report every mismatch.
    Replay { trajectory: PathBuf },
}

fn load_config(c: &Common) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.display().to_string();
    }
    if let Some(n) = c.envs {
        cfg.train.envs = n;
    }
    if let Some(n) = c.steps {
        cfg.train.total_steps = n;
    }
    if let Some(a) = &c.addr {
        cfg.bridge.addr = a.clone();
    }
    if let Some(r) = c.rate_hz {
        cfg.bridge.rate_hz = r;
    }
    if let Some(m) = c.mask_mode {
        cfg.mask_mode = match m {
            MaskArg::Privileged => MaskMode::Privileged,
            MaskArg::Zeroed => MaskMode::Zeroed,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let out = PathBuf::from(&cfg.out_dir);
            let snap = commands::train(&cfg, &out, c.checkpoint.as_deref(), true)?;
            println!(
                "trained {} steps in {} updates; checkpoint {}",
                snap.env_steps,
                snap.updates,
                out.join(commands::CHECKPOINT_FILE).display()
            );
        }
        Command::Eval { common, mode, episodes } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
                cfg.eval.grid.seed = s;
            }
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            let mode = match mode {
                Some(ModeArg::Randomized) => EvalMode::Randomized,
                Some(ModeArg::Grid) => EvalMode::Grid,
                None => cfg.eval.mode,
            };
            let out = PathBuf::from(&cfg.out_dir);
            let report = commands::eval(&cfg, common.checkpoint.as_deref(), mode, Some(&out))?;
            println!(
                "{} trials, success rate {:.4}; reports in {}",
                report.trials.len(),
                report.success_rate,
                out.display()
            );
        }
        Command::Rollout { common, frames } => {
            let cfg = load_config(&common)?;
            let path = commands::rollout(
                &cfg,
                common.checkpoint.as_deref(),
                cfg.seed,
                Path::new(&cfg.out_dir),
                frames,
            )?;
            println!("{}", path.display());
        }
        Command::Serve {
            common,
            episodes,
            sessions,
            no_deadline,
        } => {
            let cfg = load_config(&common)?;
            let listener = TcpListener::bind(&cfg.bridge.addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            let deadline = cfg.bridge.deadline && !no_deadline;
            let opts = ServeOptions {
                rate_hz: deadline.then_some(cfg.bridge.rate_hz),
                seed: cfg.seed,
                episodes: episodes.unwrap_or(cfg.bridge.episodes),
                sessions,
            };
            std::fs::create_dir_all(&cfg.out_dir)?;
            let log = Path::new(&cfg.out_dir).join("session.jsonl");
            commands::serve(&cfg, &listener, &opts, Some(&log))?;
        }
        Command::Client { common, episodes } => {
            let cfg = load_config(&common)?;
            let Some(ckpt) = common.checkpoint.as_deref() else {
                anyhow::bail!("client needs --checkpoint");
            };
            std::fs::create_dir_all(&cfg.out_dir)?;
            let log = Path::new(&cfg.out_dir).join("client.jsonl");
            let eps = commands::client(&cfg, &cfg.bridge.addr, ckpt, episodes, Some(&log))?;
            let wins = eps.iter().filter(|e| e.success).count();
            println!("{} episodes, {} successful; log {}", eps.len(), wins, log.display());
        }
        Command::Replay { trajectory } => {
            let report = commands::replay_file(&trajectory)?;
            for d in &report.diffs {
                println!("step {} {}: logged {} replayed {}", d.t, d.field, d.logged, d.replayed);
            }
            println!("{} steps replayed, {} diffs", report.steps, report.diffs.len());
            if !report.diffs.is_empty() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
