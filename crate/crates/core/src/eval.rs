//! Evaluation protocols: seeded randomized episodes and the exhaustive grid of
//! fruit cells × designated arm poses, with per-trial records and aggregates.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{check_self_collision, JointVector};
use crate::env::{zero_mask, Env, EnvConfig, EnvError, Observation};
use crate::geom::Vec3;
use crate::nn::{sample_action, Network, Tape};
use crate::plant::PlantSpec;
use crate::ppo::{derive_seed, RunningScaler};

/// Maps observations to actions in `[-1, 1]^action_dim`.
pub trait Policy {
    fn act(&mut self, obs: &Observation) -> Vec<f64>;
}

impl<F: FnMut(&Observation) -> Vec<f64>> Policy for F {
    fn act(&mut self, obs: &Observation) -> Vec<f64> {
        self(obs)
    }
}

/// Trained Gaussian policy with frozen observation statistics.
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    pub net: Network,
    pub params: Vec<f64>,
    pub scaler: RunningScaler,
    /// Zero the alpha channel before the forward pass.
    pub zero_mask: bool,
    /// Sample from the Gaussian instead of taking the mean.
    pub stochastic: Option<ChaCha8Rng>,
    tape: Tape,
}

impl GaussianPolicy {
    pub fn new(net: Network, params: Vec<f64>, scaler: RunningScaler) -> Self {
        Self {
            net,
            params,
            scaler,
            zero_mask: false,
            stochastic: None,
            tape: Tape::default(),
        }
    }

    pub fn with_zero_mask(mut self, on: bool) -> Self {
        self.zero_mask = on;
        self
    }

    pub fn with_sampling(mut self, seed: u64) -> Self {
        self.stochastic = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }
}

impl Policy for GaussianPolicy {
    fn act(&mut self, obs: &Observation) -> Vec<f64> {
        let features = if self.zero_mask {
            zero_mask(obs).features()
        } else {
            obs.features()
        };
        let x = self.scaler.apply(&features);
        let out = self
            .net
            .forward(&self.params, &x, &mut self.tape)
            .expect("observation matches the network input");
        match self.stochastic.as_mut() {
            Some(rng) => sample_action(&out.mean, &out.log_std, rng).action,
            None => out.mean.iter().map(|m| m.clamp(-1.0, 1.0)).collect(),
        }
    }
}

/// Uniform actions in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub dim: usize,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _: &Observation) -> Vec<f64> {
        (0..self.dim).map(|_| self.rng.random_range(-1.0..=1.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub plant_id: usize,
    pub fruit_cell: Option<usize>,
    pub config_id: Option<usize>,
    pub seed: u64,
    pub success: bool,
    /// Step at which the success window first completed, or steps run on failure.
    pub steps: usize,
    /// NaN when the fruit left the view.
    pub final_occlusion_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trials: Vec<TrialRecord>,
    pub success_rate: f64,
    /// Steps-to-goal over successful trials; `None` without successes.
    pub steps: Option<StepStats>,
    /// Success counts, one row per fruit cell and one column per configuration.
    pub heatmap: Vec<Vec<u32>>,
}

impl EvalReport {
    /// Aggregate `trials` into a report with a `cells × configs` heatmap.
    pub fn from_trials(trials: Vec<TrialRecord>, cells: usize, configs: usize) -> Self {
        let n = trials.len();
        let wins: Vec<&TrialRecord> = trials.iter().filter(|t| t.success).collect();
        let success_rate = if n == 0 { 0.0 } else { wins.len() as f64 / n as f64 };
        let steps = (!wins.is_empty()).then(|| {
            let s: Vec<f64> = wins.iter().map(|t| t.steps as f64).collect();
            StepStats {
                min: s.iter().copied().fold(f64::INFINITY, f64::min),
                mean: s.iter().sum::<f64>() / s.len() as f64,
                max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        });
        let mut heatmap = vec![vec![0u32; configs.max(1)]; cells.max(1)];
        for t in &wins {
            let r = t.fruit_cell.unwrap_or(0).min(heatmap.len() - 1);
            let c = t.config_id.unwrap_or(0).min(heatmap[0].len() - 1);
            heatmap[r][c] += 1;
        }
        Self {
            trials,
            success_rate,
            steps,
            heatmap,
        }
    }
}

/// Outcome of one episode run to success, failure or the step budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: usize,
    pub final_occlusion_fraction: f64,
}

/// Run the episode already reset in `env`, stopping at the first success.
pub fn run_episode(env: &mut Env, first: Observation, policy: &mut dyn Policy) -> Result<EpisodeResult, EnvError> {
    let mut obs = first;
    loop {
        let action = policy.act(&obs);
        let out = env.step(&action)?;
        if out.info.success || out.done {
            return Ok(EpisodeResult {
                success: out.info.success,
                steps: env.steps(),
                final_occlusion_fraction: out.info.occlusion.occluded_fraction().unwrap_or(f64::NAN),
            });
        }
        obs = out.observation;
    }
}

const EVAL_STREAM: u64 = 0xE7A1;

/// Episode seeds used by [`run_randomized_eval`].
pub fn eval_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(seed, EVAL_STREAM, episode as u64)
}

pub fn run_randomized_eval(
    policy: &mut dyn Policy,
    config: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport, EnvError> {
    if episodes == 0 {
        return Err(EnvError::Config("eval episodes must be at least 1".into()));
    }
    let mut env = Env::new(config.clone())?;
    let mut trials = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let s = eval_seed(seed, i);
        let (obs, setup) = env.reset(s)?;
        let r = run_episode(&mut env, obs, policy)?;
        trials.push(TrialRecord {
            trial_id: i,
            plant_id: 0,
            fruit_cell: setup.fruit_cell,
            config_id: None,
            seed: s,
            success: r.success,
            steps: r.steps,
            final_occlusion_fraction: r.final_occlusion_fraction,
        });
    }
    Ok(EvalReport::from_trials(trials, config.fruit.cell_count(), 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalGrid {
    /// Fruit centres, in heatmap row order.
    pub cells: Vec<Vec3>,
    /// Designated initial arm poses, in heatmap column order.
    pub configurations: Vec<JointVector>,
    pub plants: Vec<PlantSpec>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalGrid {
    /// 3×3 lattice of the default config, four poses, one plant, one repeat.
    fn default() -> Self {
        let cfg = EnvConfig::default();
        let cells = (0..cfg.fruit.cell_count()).filter_map(|i| cfg.fruit.cell(i)).collect();
        Self {
            cells,
            configurations: vec![
                [0.6, -1.2, -0.4, 0.0, 0.0, 0.0],
                [-0.6, -1.2, -0.4, 0.0, 0.0, 0.0],
                [0.5, -0.8, -0.9, 0.0, 0.0, 0.0],
                [-0.5, -0.8, -0.9, 0.0, 0.0, 0.0],
            ],
            plants: vec![cfg.plant],
            repeats: 1,
            seed: 0,
        }
    }
}

impl EvalGrid {
    pub fn trial_count(&self) -> usize {
        self.plants.len() * self.cells.len() * self.configurations.len() * self.repeats
    }
}

/// Letter label of a lattice cell, `A` for the first.
pub fn cell_label(cell: usize) -> String {
    match u8::try_from(cell).ok().filter(|c| *c < 26) {
        Some(c) => format!("{}", (b'A' + c) as char),
        None => format!("cell{cell}"),
    }
}

/// Exhaustive sweep over plants × cells × configurations × repeats. The
/// plant is used as given: no yaw or stiffness draw, flat lighting, no noise.
pub fn run_grid_eval(policy: &mut dyn Policy, config: &EnvConfig, grid: &EvalGrid) -> Result<EvalReport, EnvError> {
    for (ci, q) in grid.configurations.iter().enumerate() {
        if check_self_collision(&config.arm, q) {
            let cell = grid.cells.first().map_or(String::from("-"), |_| cell_label(0));
            return Err(EnvError::Config(format!(
                "grid configuration {ci} self-collides (first affected cell {cell})"
            )));
        }
    }
    let mut env = Env::new(config.clone())?;
    let mut trials = Vec::with_capacity(grid.trial_count());
    let mut id = 0;
    for (pi, plant) in grid.plants.iter().enumerate() {
        for (cell, &center) in grid.cells.iter().enumerate() {
            for (ci, q) in grid.configurations.iter().enumerate() {
                for _ in 0..grid.repeats {
                    let s = derive_seed(grid.seed, EVAL_STREAM + 1, id as u64);
                    let mut setup = env.draw_setup(s)?;
                    setup.plant = plant.clone();
                    setup.plant_yaw = 0.0;
                    setup.fruit.center = center;
                    setup.fruit_cell = Some(cell);
                    setup.initial_q = *q;
                    setup.lighting = 1.0;
                    setup.depth_noise_sigma = 0.0;
                    setup.tau_max = config.servo.tau_max;
                    let obs = env.reset_with(setup).map_err(|e| match e {
                        EnvError::Config(m) => EnvError::Config(format!("cell {}: {m}", cell_label(cell))),
                        other => other,
                    })?;
                    let r = run_episode(&mut env, obs, policy)?;
                    trials.push(TrialRecord {
                        trial_id: id,
                        plant_id: pi,
                        fruit_cell: Some(cell),
                        config_id: Some(ci),
                        seed: s,
                        success: r.success,
                        steps: r.steps,
                        final_occlusion_fraction: r.final_occlusion_fraction,
                    });
                    id += 1;
                }
            }
        }
    }
    Ok(EvalReport::from_trials(trials, grid.cells.len(), grid.configurations.len()))
}
