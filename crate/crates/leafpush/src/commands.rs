//! Subcommand implementations shared by the binary and the tests.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use leafpush_core::env::{EnvConfig, MaskMode};
use leafpush_core::eval::{run_grid_eval, run_randomized_eval, EvalReport, GaussianPolicy, Policy, RandomPolicy};
use leafpush_core::nn::Network;
use leafpush_core::ppo::{derive_seed, Snapshot, TrainMetrics, Trainer, TrainingSink};

use crate::bridge::{run_policy_client, serve_env, ClientEpisode, ServeOptions, ServerEvent};
use crate::config::{EvalMode, RunConfig};
use crate::formats::{load_checkpoint, save_checkpoint, write_eval_report, MetricsRow, MetricsWriter};
use crate::rollout::{load_trajectory, replay, run_rollout, save_trajectory, ReplayReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.lpck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";

/// Writes metrics rows and checkpoints under one directory.
pub struct FileSink {
    metrics: MetricsWriter,
    checkpoint: PathBuf,
    echo: bool,
}

impl FileSink {
    pub fn new(dir: &Path, append: bool, echo: bool) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            metrics: MetricsWriter::create(&dir.join(METRICS_FILE), append)?,
            checkpoint: dir.join(CHECKPOINT_FILE),
            echo,
        })
    }
}

impl TrainingSink for FileSink {
    fn metrics(&mut self, m: &TrainMetrics) -> Result<(), String> {
        if self.echo {
            println!(
                "update {:5} step {:9} return {:8.3} success {:.3} kl {:.5} lr {:.2e} clip {:.3}",
                m.update, m.step, m.episode_return, m.success_rate, m.kl, m.lr, m.clip_fraction
            );
        }
        self.metrics.write(&MetricsRow::from(m)).map_err(|e| e.to_string())
    }

    fn checkpoint(&mut self, snapshot: &Snapshot) -> Result<(), String> {
        save_checkpoint(&self.checkpoint, snapshot).map_err(|e| format!("{}: {e}", self.checkpoint.display()))
    }
}

/// Train from scratch, or continue from `resume`. Returns the final snapshot.
pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>, echo: bool) -> Result<Snapshot> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let env_cfg = cfg.env_config();
    let train_cfg = cfg.train_config();
    let mut trainer = match resume {
        Some(path) => {
            let snap = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            Trainer::resume(env_cfg, train_cfg, snap)?
        }
        None => Trainer::new(env_cfg, cfg.network.clone(), train_cfg, cfg.seed)?,
    };
    let mut sink = FileSink::new(out, resume.is_some(), echo)?;
    trainer.run(&mut sink)?;
    Ok(trainer.snapshot())
}

/// Deterministic (mean-action) policy from a checkpoint, checked against `env`.
pub fn load_policy(path: &Path, env: &EnvConfig) -> Result<GaussianPolicy> {
    let snap = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    policy_from_snapshot(snap, env)
}

pub fn policy_from_snapshot(snap: Snapshot, env: &EnvConfig) -> Result<GaussianPolicy> {
    let net = Network::new(snap.network)?;
    let input = 5 * env.camera.width * env.camera.height + 9;
    if net.input_dim() != input || net.action_dim() != env.action.action_dim() {
        bail!(
            "checkpoint network takes {} inputs and {} actions; the config needs {} and {}",
            net.input_dim(),
            net.action_dim(),
            input,
            env.action.action_dim()
        );
    }
    Ok(GaussianPolicy::new(net, snap.learner.params, snap.learner.obs_scaler))
}

fn policy_for(checkpoint: Option<&Path>, env: &EnvConfig, seed: u64) -> Result<(Box<dyn Policy>, String)> {
    Ok(match checkpoint {
        Some(p) => (Box::new(load_policy(p, env)?), format!("checkpoint:{}", p.display())),
        None => (
            Box::new(RandomPolicy::new(env.action.action_dim(), derive_seed(seed, 0x9A4D, 0))),
            "random".into(),
        ),
    })
}

/// Evaluate a checkpoint, or the uniform random policy when none is given.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, mode: EvalMode, out: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let env = cfg.env_config();
    let (mut policy, _) = policy_for(checkpoint, &env, cfg.eval.seed)?;
    let report = match mode {
        EvalMode::Randomized => run_randomized_eval(policy.as_mut(), &env, cfg.eval.episodes, cfg.eval.seed)?,
        EvalMode::Grid => run_grid_eval(policy.as_mut(), &env, &cfg.eval.grid)?,
    };
    if let Some(dir) = out {
        write_eval_report(dir, &report)?;
    }
    Ok(report)
}

/// Record one episode to `out/trajectory.jsonl`, with frames under `out/frames`.
pub fn rollout(cfg: &RunConfig, checkpoint: Option<&Path>, seed: u64, out: &Path, frames: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let env = cfg.env_config();
    let (mut policy, label) = policy_for(checkpoint, &env, seed)?;
    fs::create_dir_all(out)?;
    let frames_dir = frames.then(|| out.join("frames"));
    let traj = run_rollout(&env, policy.as_mut(), &label, seed, frames_dir.as_deref())?;
    let path = out.join(TRAJECTORY_FILE);
    save_trajectory(&path, &traj)?;
    Ok(path)
}

pub fn replay_file(path: &Path) -> Result<ReplayReport> {
    let traj = load_trajectory(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(replay(&traj)?)
}

/// Serve the environment; every server event is appended to `log` as JSON.
pub fn serve(cfg: &RunConfig, listener: &TcpListener, opts: &ServeOptions, log: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let mut writer = match log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut sink = |e: &ServerEvent| {
        if let Some(w) = writer.as_mut() {
            let _ = serde_json::to_writer(&mut *w, e);
            let _ = w.write_all(b"\n");
            let _ = w.flush();
        }
    };
    serve_env(listener, &cfg.env_config(), opts, &mut sink)?;
    Ok(())
}

/// Run the checkpoint policy against a server; the episodes are written to
/// `log` as JSON lines.
pub fn client(
    cfg: &RunConfig,
    addr: &str,
    checkpoint: &Path,
    episodes: usize,
    log: Option<&Path>,
) -> Result<Vec<ClientEpisode>> {
    let env = cfg.env_config();
    let mut policy = load_policy(checkpoint, &env)?.with_zero_mask(cfg.mask_mode == MaskMode::Zeroed);
    let eps = run_policy_client(addr, &mut policy, episodes)?;
    if let Some(p) = log {
        let mut w = BufWriter::new(File::create(p)?);
        for e in &eps {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(eps)
}
