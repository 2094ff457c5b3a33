//! Recorded single-episode rollouts and their replay.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use leafpush_core::arm::JointVector;
use leafpush_core::env::{Env, EnvConfig, EnvError, EpisodeSetup};
use leafpush_core::eval::Policy;
use leafpush_core::render::OcclusionStats;
use leafpush_core::reward::RewardBreakdown;
use serde::{Deserialize, Serialize};

use crate::formats::{encode_frame, frame_to_ppm};

pub const TRAJECTORY_FORMAT: &str = "leafpush-trajectory";
pub const TRAJECTORY_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Free-form description of the acting policy.
    pub policy: String,
    pub config: EnvConfig,
    pub setup: EpisodeSetup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    /// Policy output as passed to the environment.
    pub action: Vec<f64>,
    pub reward: RewardBreakdown,
    pub occlusion: OcclusionStats,
    /// Motor torque at every physics substep.
    pub torques: Vec<JointVector>,
    pub done: bool,
    pub success: bool,
    pub collided: bool,
    pub joints: JointVector,
    pub ee: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(TrajectoryHeader),
    Step(TrajectoryStep),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub steps: Vec<TrajectoryStep>,
}

/// Run one full episode from `seed`. Frames go to `frames` as `NNNN.lpfr`
/// and `NNNN.ppm`, starting with the reset observation.
pub fn run_rollout(
    config: &EnvConfig,
    policy: &mut dyn Policy,
    policy_label: &str,
    seed: u64,
    frames: Option<&Path>,
) -> Result<Trajectory, RolloutError> {
    let mut env = Env::new(config.clone())?;
    let (mut obs, setup) = env.reset(seed)?;
    if let Some(dir) = frames {
        fs::create_dir_all(dir)?;
    }
    let dump = |t: usize, frame: &leafpush_core::render::Frame| -> io::Result<()> {
        if let Some(dir) = frames {
            fs::write(dir.join(format!("{t:04}.lpfr")), encode_frame(frame))?;
            fs::write(dir.join(format!("{t:04}.ppm")), frame_to_ppm(frame))?;
        }
        Ok(())
    };
    dump(0, &obs.frame)?;
    let mut steps = Vec::new();
    loop {
        let action = policy.act(&obs);
        let out = env.step(&action)?;
        let t = env.steps();
        dump(t, &out.observation.frame)?;
        steps.push(TrajectoryStep {
            t,
            action,
            reward: out.reward,
            occlusion: out.info.occlusion,
            torques: out.info.torques,
            done: out.done,
            success: out.info.success,
            collided: out.info.collided,
            joints: out.observation.joints,
            ee: out.observation.ee_position.to_array(),
        });
        if out.done {
            break;
        }
        obs = out.observation;
    }
    Ok(Trajectory {
        header: TrajectoryHeader {
            format: TRAJECTORY_FORMAT.into(),
            version: TRAJECTORY_VERSION,
            seed,
            policy: policy_label.into(),
            config: config.clone(),
            setup,
        },
        steps,
    })
}

pub fn write_trajectory<W: Write>(mut out: W, traj: &Trajectory) -> Result<(), RolloutError> {
    let mut line = |l: &Line| -> Result<(), RolloutError> {
        serde_json::to_writer(&mut out, l).map_err(|source| RolloutError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
        Ok(())
    };
    line(&Line::Header(traj.header.clone()))?;
    for s in &traj.steps {
        line(&Line::Step(s.clone()))?;
    }
    Ok(())
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<(), RolloutError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectory(&mut w, traj)?;
    w.flush()?;
    Ok(())
}

pub fn read_trajectory<R: BufRead>(input: R) -> Result<Trajectory, RolloutError> {
    let mut header = None;
    let mut steps = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|source| RolloutError::Json { line: i + 1, source })?;
        match (parsed, header.is_some()) {
            (Line::Header(h), false) => header = Some(h),
            (Line::Header(_), true) => return Err(RolloutError::Format(format!("line {}: second header", i + 1))),
            (Line::Step(_), false) => return Err(RolloutError::Format("first line must be the header".into())),
            (Line::Step(s), true) => steps.push(s),
        }
    }
    let header = header.ok_or_else(|| RolloutError::Format("empty trajectory".into()))?;
    if header.format != TRAJECTORY_FORMAT || header.version != TRAJECTORY_VERSION {
        return Err(RolloutError::Format(format!(
            "unsupported trajectory {} v{}",
            header.format, header.version
        )));
    }
    Ok(Trajectory { header, steps })
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, RolloutError> {
    read_trajectory(BufReader::new(File::open(path)?))
}

/// A logged value that the replay did not reproduce bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayDiff {
    /// Step index; 0 refers to the episode setup.
    pub t: usize,
    pub field: String,
    pub logged: String,
    pub replayed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub steps: usize,
    pub rewards: Vec<f64>,
    pub diffs: Vec<ReplayDiff>,
}

fn same_f64(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

/// Re-run the logged actions from the logged setup and compare everything the
/// environment produced.
pub fn replay(traj: &Trajectory) -> Result<ReplayReport, RolloutError> {
    let h = &traj.header;
    let mut env = Env::new(h.config.clone())?;
    let mut diffs = Vec::new();
    let drawn = env.draw_setup(h.seed)?;
    if drawn != h.setup {
        diffs.push(ReplayDiff {
            t: 0,
            field: "setup".into(),
            logged: format!("{:?}", h.setup),
            replayed: format!("{drawn:?}"),
        });
    }
    env.reset_with(h.setup.clone())?;
    let mut rewards = Vec::with_capacity(traj.steps.len());
    for (i, s) in traj.steps.iter().enumerate() {
        if env.is_done() {
            diffs.push(ReplayDiff {
                t: s.t,
                field: "done".into(),
                logged: "episode continues".into(),
                replayed: format!("episode ended after step {i}"),
            });
            break;
        }
        let out = env.step(&s.action)?;
        rewards.push(out.reward.total);
        let mut check = |field: &str, ok: bool, logged: String, replayed: String| {
            if !ok {
                diffs.push(ReplayDiff {
                    t: s.t,
                    field: field.into(),
                    logged,
                    replayed,
                });
            }
        };
        let (a, b) = (s.reward, out.reward);
        for (name, x, y) in [
            ("reward.r_sc", a.r_sc, b.r_sc),
            ("reward.r_occ", a.r_occ, b.r_occ),
            ("reward.r_fv", a.r_fv, b.r_fv),
            ("reward.r_sus", a.r_sus, b.r_sus),
            ("reward.r_aad", a.r_aad, b.r_aad),
            ("reward.total", a.total, b.total),
        ] {
            check(name, same_f64(x, y), format!("{x:?}"), format!("{y:?}"));
        }
        check("t", s.t == env.steps(), s.t.to_string(), env.steps().to_string());
        check(
            "occlusion",
            s.occlusion == out.info.occlusion,
            format!("{:?}", s.occlusion),
            format!("{:?}", out.info.occlusion),
        );
        check(
            "torques",
            s.torques.len() == out.info.torques.len()
                && s.torques.iter().flatten().zip(out.info.torques.iter().flatten()).all(|(x, y)| same_f64(*x, *y)),
            format!("{:?}", s.torques),
            format!("{:?}", out.info.torques),
        );
        check("done", s.done == out.done, s.done.to_string(), out.done.to_string());
        check(
            "success",
            s.success == out.info.success,
            s.success.to_string(),
            out.info.success.to_string(),
        );
        check(
            "collided",
            s.collided == out.info.collided,
            s.collided.to_string(),
            out.info.collided.to_string(),
        );
        let joints = out.observation.joints;
        check(
            "joints",
            s.joints.iter().zip(&joints).all(|(x, y)| same_f64(*x, *y)),
            format!("{:?}", s.joints),
            format!("{joints:?}"),
        );
        let ee = out.observation.ee_position.to_array();
        check(
            "ee",
            s.ee.iter().zip(&ee).all(|(x, y)| same_f64(*x, *y)),
            format!("{:?}", s.ee),
            format!("{ee:?}"),
        );
    }
    Ok(ReplayReport {
        steps: rewards.len(),
        rewards,
        diffs,
    })
}
