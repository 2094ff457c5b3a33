//! The plant-manipulation MDP: reset/step over plant, arm, servo and renderer.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actuation::{apply_action, servo_step, ActionCommand, ServoConfig};
use crate::arm::{
    capsules_self_collide, force_to_joint_torques, forward_kinematics, ArmSpec, ArmState, JointVector, JOINTS,
};
use crate::geom::{Pose, Vec3};
use crate::plant::{build_plant, contact, step_plant, PlantSpec, PlantState};
use crate::render::{add_depth_noise, frame_from_layers, rasterize, CameraSpec, FruitSpec, Frame, Material, OcclusionStats, Scene};
use crate::reward::{check_success, compute_reward, RewardBreakdown, RewardConfig, RewardInput, SuccessConfig};

/// Draw attempts before initial-pose rejection sampling gives up.
pub const MAX_SETUP_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("config: {0}")]
    Config(alloc::string::String),
    #[error("no collision-free initial pose inside the workspace after {0} draws")]
    SetupRejected(usize),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("step called before reset")]
    NotReset,
    #[error("action has {got} entries, expected {expected}")]
    ActionShape { expected: usize, got: usize },
    #[error("plant: {0}")]
    Plant(#[from] crate::plant::PlantError),
    #[error("render: {0}")]
    Render(#[from] crate::render::RenderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub dt: f64,
    pub solver_iterations: usize,
    /// Physics steps per control step.
    pub substeps: usize,
    pub contact_gain: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            dt: crate::plant::DEFAULT_DT,
            solver_iterations: crate::plant::DEFAULT_SOLVER_ITERATIONS,
            substeps: 6,
            contact_gain: crate::plant::DEFAULT_CONTACT_GAIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionConfig {
    /// Radians per unit action.
    pub scale: JointVector,
    /// Joints driven by the policy; the others hold their initial angle.
    pub actuated: [bool; JOINTS],
}

impl Default for ActionConfig {
    fn default() -> Self {
        Self {
            scale: [0.035; JOINTS],
            actuated: [true; JOINTS],
        }
    }
}

impl ActionConfig {
    pub fn action_dim(&self) -> usize {
        self.actuated.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum FruitPlacement {
    /// Cells of a lattice: every combination of `xs` and `zs` at depth `y`,
    /// indexed row-major from the lowest row, left to right.
    Lattice { xs: Vec<f64>, zs: Vec<f64>, y: f64 },
    Uniform { min: Vec3, max: Vec3 },
}

impl FruitPlacement {
    pub fn cell_count(&self) -> usize {
        match self {
            FruitPlacement::Lattice { xs, zs, .. } => xs.len() * zs.len(),
            FruitPlacement::Uniform { .. } => 0,
        }
    }

    pub fn cell(&self, idx: usize) -> Option<Vec3> {
        match self {
            FruitPlacement::Lattice { xs, zs, y } => {
                let (row, col) = (idx / xs.len(), idx % xs.len());
                (row < zs.len()).then(|| Vec3::new(xs[col], *y, zs[row]))
            }
            FruitPlacement::Uniform { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    /// Lighting and depth noise drawn from their ranges every episode.
    High,
    /// Fixed unit lighting, noise-free depth.
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Ground-truth fruit mask in the alpha channel.
    Privileged,
    /// Alpha channel replaced by zeros.
    Zeroed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Randomization {
    pub yaw: bool,
    /// Multipliers applied to the nominal plant stiffness and damping.
    pub stiffness_scale: [f64; 2],
    pub damping_scale: [f64; 2],
    /// Multiplier range on the nominal servo torque limit.
    pub tau_max_scale: [f64; 2],
    pub lighting: [f64; 2],
    pub depth_noise: [f64; 2],
    pub fidelity: Fidelity,
}

impl Default for Randomization {
    fn default() -> Self {
        Self {
            yaw: true,
            stiffness_scale: [0.7, 1.4],
            damping_scale: [0.8, 1.25],
            tau_max_scale: [0.75, 1.0],
            lighting: [0.6, 1.3],
            depth_noise: [0.0, 0.01],
            fidelity: Fidelity::High,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    pub end_on_success: bool,
    /// Sampling range for each actuated joint's initial angle.
    pub init_ranges: [[f64; 2]; JOINTS],
    /// Initial angle of joints the policy does not drive.
    pub fixed_q: JointVector,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 600,
            end_on_success: true,
            init_ranges: [
                [-0.7, 0.7],
                [-1.2, 0.3],
                [-0.6, 1.6],
                [-1.0, 1.0],
                [-1.0, 1.0],
                [-1.0, 1.0],
            ],
            fixed_q: [0.0; JOINTS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub plant: PlantSpec,
    pub arm: ArmSpec,
    pub servo: ServoConfig,
    pub camera: CameraSpec,
    pub reward: RewardConfig,
    pub success: SuccessConfig,
    pub physics: PhysicsConfig,
    pub action: ActionConfig,
    pub episode: EpisodeConfig,
    pub randomization: Randomization,
    pub fruit: FruitPlacement,
    pub fruit_radius: f64,
    pub wall_y: f64,
    /// End-effector bounds `[[x_lo, x_hi], [y_lo, y_hi], [z_lo, z_hi]]` for initial poses.
    pub workspace: [[f64; 2]; 3],
    pub mask_mode: MaskMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            plant: PlantSpec::default(),
            arm: ArmSpec {
                base_pose: Pose::from_translation(Vec3::new(0.0, 0.04, 0.0)),
                ..ArmSpec::default()
            },
            servo: ServoConfig::default(),
            camera: CameraSpec::default(),
            reward: RewardConfig::default(),
            success: SuccessConfig::default(),
            physics: PhysicsConfig::default(),
            action: ActionConfig::default(),
            episode: EpisodeConfig::default(),
            randomization: Randomization::default(),
            fruit: FruitPlacement::Lattice {
                xs: alloc::vec![-0.06, 0.0, 0.06],
                zs: alloc::vec![0.13, 0.19, 0.25],
                y: 0.42,
            },
            fruit_radius: 0.035,
            wall_y: 0.5,
            workspace: [[-0.2, 0.2], [-0.15, 0.45], [0.0, 0.4]],
            mask_mode: MaskMode::Privileged,
        }
    }
}

impl EnvConfig {
    /// Reduced task: three actuated joints, 32×32 frames, one plant, a
    /// three-cell fruit column behind the stem and short episodes.
    pub fn toy() -> Self {
        let mut cfg = EnvConfig::default();
        cfg.camera.width = 32;
        cfg.camera.height = 32;
        cfg.action.actuated = [true, true, true, false, false, false];
        cfg.episode.max_steps = 80;
        cfg.episode.end_on_success = false;
        cfg.episode.init_ranges[1] = [-1.5, -0.4];
        cfg.episode.init_ranges[2] = [-1.0, 0.5];
        cfg.fruit = FruitPlacement::Lattice {
            xs: alloc::vec![0.0],
            zs: alloc::vec![0.15, 0.2, 0.25],
            y: 0.42,
        };
        cfg
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        use alloc::string::ToString;
        let err = |e: &dyn core::fmt::Display| EnvError::Config(e.to_string());
        self.plant.validate().map_err(|e| err(&e))?;
        self.arm.validate().map_err(|e| err(&e))?;
        self.servo.validate().map_err(|e| err(&e))?;
        self.camera.validate().map_err(|e| err(&e))?;
        self.reward.validate().map_err(|e| err(&e))?;
        let bad = |what: &str| Err(EnvError::Config(what.to_string()));
        if self.success.window == 0 {
            return bad("success.window must be at least 1");
        }
        if self.physics.substeps == 0 || self.physics.solver_iterations == 0 {
            return bad("physics.substeps and physics.solver_iterations must be at least 1");
        }
        if !(self.physics.dt > 0.0) {
            return bad("physics.dt must be positive");
        }
        if self.action.action_dim() == 0 {
            return bad("action.actuated must enable at least one joint");
        }
        if self.episode.max_steps == 0 {
            return bad("episode.max_steps must be at least 1");
        }
        if !(self.fruit_radius > 0.0) {
            return bad("fruit_radius must be positive");
        }
        match &self.fruit {
            FruitPlacement::Lattice { xs, zs, .. } if xs.is_empty() || zs.is_empty() => {
                return bad("fruit lattice must have at least one cell");
            }
            _ => {}
        }
        for r in [
            &self.randomization.stiffness_scale,
            &self.randomization.damping_scale,
            &self.randomization.tau_max_scale,
            &self.randomization.lighting,
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad("randomization ranges must be positive with lo <= hi");
            }
        }
        let n = self.randomization.depth_noise;
        if !(n[0] >= 0.0 && n[0] <= n[1]) {
            return bad("randomization.depth_noise must satisfy 0 <= lo <= hi");
        }
        Ok(())
    }
}

/// Everything drawn at reset; replaying a setup reproduces the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSetup {
    pub plant: PlantSpec,
    pub plant_yaw: f64,
    pub fruit: FruitSpec,
    pub fruit_cell: Option<usize>,
    pub initial_q: JointVector,
    pub lighting: f64,
    pub depth_noise_sigma: f64,
    pub tau_max: JointVector,
    /// Seed for per-step sensor noise.
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame: Frame,
    pub joints: JointVector,
    pub ee_position: Vec3,
}

/// Alpha channel replaced by zeros; everything else untouched.
pub fn zero_mask(obs: &Observation) -> Observation {
    let mut out = obs.clone();
    out.frame.alpha.iter_mut().for_each(|a| *a = 0.0);
    out
}

impl Observation {
    /// Flat feature vector: RGBA-D planes, then joints, then end-effector.
    pub fn features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(5 * self.frame.pixel_count() + JOINTS + 3);
        self.frame.to_planes(&mut v);
        v.extend_from_slice(&self.joints);
        v.extend_from_slice(&self.ee_position.to_array());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub occlusion: OcclusionStats,
    /// Motor torque emitted at every physics substep of this control step.
    pub torques: Vec<JointVector>,
    pub collided: bool,
    pub success: bool,
    pub fruit_out_of_view: bool,
    pub truncated: bool,
    pub full_visibility: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
struct Episode {
    setup: EpisodeSetup,
    servo: ServoConfig,
    plant: PlantState,
    arm: ArmState,
    steps: usize,
    history: Vec<f64>,
    streak: usize,
    done: bool,
    last_occlusion: OcclusionStats,
}

#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    episode: Option<Episode>,
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn mix_seed(seed: u64, step: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self { config, episode: None })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn action_dim(&self) -> usize {
        self.config.action.action_dim()
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().is_none_or(|e| e.done)
    }

    pub fn steps(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.steps)
    }

    pub fn plant(&self) -> Option<&PlantState> {
        self.episode.as_ref().map(|e| &e.plant)
    }

    pub fn arm(&self) -> Option<&ArmState> {
        self.episode.as_ref().map(|e| &e.arm)
    }

    pub fn setup(&self) -> Option<&EpisodeSetup> {
        self.episode.as_ref().map(|e| &e.setup)
    }

    /// Draw a fresh episode setup from `seed`.
    pub fn draw_setup(&self, seed: u64) -> Result<EpisodeSetup, EnvError> {
        let cfg = &self.config;
        let rand = &cfg.randomization;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plant_yaw = if rand.yaw {
            rng.random_range(0.0..core::f64::consts::TAU)
        } else {
            0.0
        };
        let mut plant = cfg.plant.clone();
        plant.stiffness *= draw(&mut rng, rand.stiffness_scale);
        plant.damping *= draw(&mut rng, rand.damping_scale);
        let base = plant.base_pose;
        plant.base_pose = Pose::new(crate::geom::Mat3::rot_z(plant_yaw) * base.rot, base.trans);
        let (center, fruit_cell) = match &cfg.fruit {
            FruitPlacement::Lattice { .. } => {
                let idx = rng.random_range(0..cfg.fruit.cell_count());
                (cfg.fruit.cell(idx).expect("cell in range"), Some(idx))
            }
            FruitPlacement::Uniform { min, max } => (
                Vec3::new(
                    draw(&mut rng, [min.x, max.x]),
                    draw(&mut rng, [min.y, max.y]),
                    draw(&mut rng, [min.z, max.z]),
                ),
                None,
            ),
        };
        let tau_scale = draw(&mut rng, rand.tau_max_scale);
        let tau_max = core::array::from_fn(|j| cfg.servo.tau_max[j] * tau_scale);
        let (lighting, depth_noise_sigma) = match rand.fidelity {
            Fidelity::High => (draw(&mut rng, rand.lighting), draw(&mut rng, rand.depth_noise)),
            Fidelity::Low => (1.0, 0.0),
        };
        let noise_seed = rng.random();
        let rest = build_plant(&plant)?;
        let initial_q = self.sample_initial_q(&mut rng, &rest)?;
        Ok(EpisodeSetup {
            plant,
            plant_yaw,
            fruit: FruitSpec::new(center, cfg.fruit_radius),
            fruit_cell,
            initial_q,
            lighting,
            depth_noise_sigma,
            tau_max,
            noise_seed,
        })
    }

    fn sample_initial_q(
        &self,
        rng: &mut ChaCha8Rng,
        plant: &PlantState,
    ) -> Result<JointVector, EnvError> {
        let cfg = &self.config;
        for _ in 0..MAX_SETUP_DRAWS {
            let q: JointVector = core::array::from_fn(|j| {
                if cfg.action.actuated[j] {
                    let [lo, hi] = cfg.episode.init_ranges[j];
                    let [llo, lhi] = cfg.arm.joint_limits[j];
                    draw(rng, [lo.max(llo), hi.min(lhi)])
                } else {
                    cfg.episode.fixed_q[j]
                }
            });
            if self.pose_is_admissible(&q) && !self.touches_plant(&q, plant) {
                return Ok(q);
            }
        }
        Err(EnvError::SetupRejected(MAX_SETUP_DRAWS))
    }

    /// Collision-free with the end effector inside the workspace.
    pub fn pose_is_admissible(&self, q: &JointVector) -> bool {
        let cfg = &self.config;
        let kin = forward_kinematics(&cfg.arm, q);
        let ee = kin.ee_position.to_array();
        let inside = (0..3).all(|a| ee[a] > cfg.workspace[a][0] && ee[a] < cfg.workspace[a][1]);
        inside && !capsules_self_collide(&kin.capsules(&cfg.arm))
    }

    /// Whether any arm link is in contact with the plant at pose `q`.
    pub fn touches_plant(&self, q: &JointVector, plant: &PlantState) -> bool {
        let kin = forward_kinematics(&self.config.arm, q);
        !contact(plant, &kin.capsules(&self.config.arm), 1.0).is_empty()
    }

    pub fn reset(&mut self, seed: u64) -> Result<(Observation, EpisodeSetup), EnvError> {
        let setup = self.draw_setup(seed)?;
        let obs = self.reset_with(setup.clone())?;
        Ok((obs, setup))
    }

    /// Start an episode from an explicit setup.
    pub fn reset_with(&mut self, setup: EpisodeSetup) -> Result<Observation, EnvError> {
        let plant = build_plant(&setup.plant)?;
        let servo = ServoConfig {
            tau_max: setup.tau_max,
            dt: self.config.physics.dt,
            ..self.config.servo.clone()
        };
        let mut ep = Episode {
            arm: ArmState::at_rest(setup.initial_q),
            setup,
            servo,
            plant,
            steps: 0,
            history: Vec::new(),
            streak: 0,
            done: false,
            last_occlusion: OcclusionStats::default(),
        };
        let (obs, occ) = self.observe(&ep)?;
        ep.last_occlusion = occ;
        self.episode = Some(ep);
        Ok(obs)
    }

    fn scene(&self, ep: &Episode) -> Scene {
        let mut scene = Scene::new();
        scene.add_wall(self.config.wall_y);
        scene.add_fruit(&ep.setup.fruit);
        scene.add_plant(&ep.plant);
        let kin = forward_kinematics(&self.config.arm, &ep.arm.q);
        scene.add_capsules(&kin.capsules(&self.config.arm), Material::Arm);
        scene
    }

    fn observe(&self, ep: &Episode) -> Result<(Observation, OcclusionStats), EnvError> {
        let scene = self.scene(ep);
        let layers = rasterize(&scene, &self.config.camera)?;
        let occ = layers.occlusion();
        let mut frame = frame_from_layers(&scene, &layers, ep.setup.lighting);
        if ep.setup.depth_noise_sigma > 0.0 {
            let seed = mix_seed(ep.setup.noise_seed, ep.steps as u64);
            frame = add_depth_noise(
                &frame,
                ep.setup.depth_noise_sigma,
                seed,
                self.config.camera.near,
                self.config.camera.far,
            );
        }
        if self.config.mask_mode == MaskMode::Zeroed {
            frame.alpha.iter_mut().for_each(|a| *a = 0.0);
        }
        let kin = forward_kinematics(&self.config.arm, &ep.arm.q);
        Ok((
            Observation {
                frame,
                joints: ep.arm.q,
                ee_position: kin.ee_position,
            },
            occ,
        ))
    }

    /// Occlusion of the current state.
    pub fn occlusion(&self) -> Option<OcclusionStats> {
        self.episode.as_ref().map(|e| e.last_occlusion)
    }

    /// Expand a policy action (one entry per actuated joint) to all joints.
    pub fn expand_action(&self, action: &[f64]) -> Result<JointVector, EnvError> {
        let dim = self.action_dim();
        if action.len() != dim {
            return Err(EnvError::ActionShape {
                expected: dim,
                got: action.len(),
            });
        }
        let mut it = action.iter();
        Ok(core::array::from_fn(|j| {
            if self.config.action.actuated[j] {
                let a = *it.next().expect("length checked");
                if a.is_nan() {
                    0.0
                } else {
                    a.clamp(-1.0, 1.0)
                }
            } else {
                0.0
            }
        }))
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        let delta = self.expand_action(action)?;
        let mut ep = self.episode.take().ok_or(EnvError::NotReset)?;
        if ep.done {
            self.episode = Some(ep);
            return Err(EnvError::EpisodeDone);
        }
        let result = self.advance(&mut ep, &delta);
        self.episode = Some(ep);
        result
    }

    fn advance(&self, ep: &mut Episode, delta: &JointVector) -> Result<StepOutcome, EnvError> {
        let cfg = &self.config;
        let mask_active = ep.streak > 0;
        let cmd = ActionCommand {
            delta: *delta,
            scale: cfg.action.scale,
        };
        ep.arm = apply_action(&ep.arm, &cmd, &cfg.arm);
        let mut torques = Vec::with_capacity(cfg.physics.substeps);
        for _ in 0..cfg.physics.substeps {
            let kin = forward_kinematics(&cfg.arm, &ep.arm.q);
            let caps = kin.capsules(&cfg.arm);
            let touch = contact(&ep.plant, &caps, cfg.physics.contact_gain);
            let mut resist = [0.0; JOINTS];
            for pf in &touch.probe_forces {
                force_to_joint_torques(&kin, &cfg.arm, pf.probe, pf.point, pf.force, &mut resist);
            }
            let servo = servo_step(&ep.arm, &resist, &ep.servo);
            torques.push(servo.torque);
            ep.arm = servo.state;
            ep.plant = step_plant(
                &ep.plant,
                &touch.plant_torques,
                cfg.physics.dt,
                cfg.physics.solver_iterations,
            )?;
        }
        ep.steps += 1;
        let kin = forward_kinematics(&cfg.arm, &ep.arm.q);
        let collided = capsules_self_collide(&kin.capsules(&cfg.arm));
        let (observation, occ) = self.observe(ep)?;
        ep.last_occlusion = occ;
        let full_visibility = cfg.reward.fully_visible(&occ);
        ep.streak = if full_visibility { ep.streak + 1 } else { 0 };
        let action_magnitude = libm::sqrt(delta.iter().map(|d| d * d).sum::<f64>());
        let reward = compute_reward(
            &RewardInput {
                occlusion: occ,
                collided,
                full_visibility_streak: ep.streak,
                action_magnitude,
                mask_active,
            },
            &cfg.reward,
        );
        ep.history.push(cfg.success.measure(&occ));
        let success = check_success(&ep.history, cfg.success.threshold, cfg.success.window);
        let truncated = ep.steps >= cfg.episode.max_steps;
        let done = collided || (success && cfg.episode.end_on_success) || truncated;
        ep.done = done;
        Ok(StepOutcome {
            observation,
            reward,
            done,
            info: StepInfo {
                occlusion: occ,
                torques,
                collided,
                success,
                fruit_out_of_view: occ.out_of_view(),
                truncated: truncated && !collided && !(success && cfg.episode.end_on_success),
                full_visibility,
            },
        })
    }
}
