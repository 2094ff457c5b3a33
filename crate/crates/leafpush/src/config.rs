//! Sectioned TOML run configuration.

use std::path::Path;

use leafpush_core::actuation::ServoConfig;
use leafpush_core::arm::ArmSpec;
use leafpush_core::env::{
    ActionConfig, EnvConfig, EpisodeConfig, FruitPlacement, MaskMode, PhysicsConfig, Randomization,
};
use leafpush_core::eval::EvalGrid;
use leafpush_core::nn::{Network, NetworkConfig};
use leafpush_core::plant::PlantSpec;
use leafpush_core::ppo::{PpoConfig, TrainConfig};
use leafpush_core::render::CameraSpec;
use leafpush_core::reward::{RewardConfig, SuccessConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("invalid config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    /// Dotted key the error refers to, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key } | ConfigError::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Randomized,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub envs: usize,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub metrics_window: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            envs: t.envs,
            total_steps: t.total_steps,
            checkpoint_every: t.checkpoint_every,
            metrics_window: t.metrics_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mode: EvalMode,
    pub episodes: usize,
    pub seed: u64,
    pub grid: EvalGrid,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mode: EvalMode::Randomized,
            episodes: 200,
            seed: 2024,
            grid: EvalGrid::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeSection {
    pub addr: String,
    /// Control rate; the server waits at most one period for each action.
    pub rate_hz: f64,
    /// When false the server blocks until every action arrives.
    pub deadline: bool,
    /// Episodes to serve per session; 0 serves until the client leaves.
    pub episodes: usize,
}

impl Default for BridgeSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7878".into(),
            rate_hz: 1.0,
            deadline: true,
            episodes: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream of a run derives from it.
    pub seed: u64,
    pub out_dir: String,
    pub fruit_radius: f64,
    pub wall_y: f64,
    pub workspace: [[f64; 2]; 3],
    pub mask_mode: MaskMode,
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
    pub network: NetworkConfig,
    pub ppo: PpoConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bridge: BridgeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(EnvConfig::default(), NetworkConfig::default())
    }
}

impl RunConfig {
    fn from_parts(env: EnvConfig, network: NetworkConfig) -> Self {
        let EnvConfig {
            plant,
            arm,
            servo,
            camera,
            reward,
            success,
            physics,
            action,
            episode,
            randomization,
            fruit,
            fruit_radius,
            wall_y,
            workspace,
            mask_mode,
        } = env;
        Self {
            seed: 1,
            out_dir: "runs/default".into(),
            fruit_radius,
            wall_y,
            workspace,
            mask_mode,
            plant,
            arm,
            servo,
            camera,
            reward,
            success,
            physics,
            action,
            episode,
            randomization,
            fruit,
            network,
            ppo: PpoConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            bridge: BridgeSection::default(),
        }
    }

    /// The reduced learning task shipped as `configs/toy.toml`.
    pub fn toy() -> Self {
        let env = EnvConfig::toy();
        let dim = env.action.action_dim();
        let mut cfg = Self::from_parts(env, NetworkConfig::toy(dim));
        cfg.out_dir = "runs/toy".into();
        cfg.train.envs = 16;
        cfg.train.total_steps = 1_000_000;
        cfg.train.checkpoint_every = 20;
        cfg.eval.grid.cells = (0..cfg.fruit.cell_count()).filter_map(|i| cfg.fruit.cell(i)).collect();
        cfg.eval.grid.plants = vec![cfg.plant.clone()];
        cfg.eval.grid.configurations = vec![
            [0.4, -1.2, -0.4, 0.0, 0.0, 0.0],
            [-0.4, -1.2, -0.4, 0.0, 0.0, 0.0],
            [0.3, -0.8, -0.6, 0.0, 0.0, 0.0],
            [-0.3, -0.8, -0.6, 0.0, 0.0, 0.0],
        ];
        cfg
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            plant: self.plant.clone(),
            arm: self.arm.clone(),
            servo: self.servo.clone(),
            camera: self.camera.clone(),
            reward: self.reward.clone(),
            success: self.success.clone(),
            physics: self.physics.clone(),
            action: self.action.clone(),
            episode: self.episode.clone(),
            randomization: self.randomization.clone(),
            fruit: self.fruit.clone(),
            fruit_radius: self.fruit_radius,
            wall_y: self.wall_y,
            workspace: self.workspace,
            mask_mode: self.mask_mode,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            ppo: self.ppo.clone(),
            envs: self.train.envs,
            total_steps: self.train.total_steps,
            checkpoint_every: self.train.checkpoint_every,
            metrics_window: self.train.metrics_window,
        }
    }

    /// Check every section and the network against the environment.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check<E: std::fmt::Display>(key: &str, r: Result<(), E>) -> Result<(), ConfigError> {
            r.map_err(|e| ConfigError::Invalid {
                key: key.into(),
                message: e.to_string(),
            })
        }
        check("plant", self.plant.validate())?;
        check("arm", self.arm.validate())?;
        check("servo", self.servo.validate())?;
        check("camera", self.camera.validate())?;
        check("reward", self.reward.validate())?;
        check("ppo", self.ppo.validate())?;
        if let Err(e) = self.env_config().validate() {
            let message = e.to_string();
            let body = message.strip_prefix("config: ").unwrap_or(&message);
            let key = body.split_whitespace().next().unwrap_or("env").trim_end_matches(':');
            return Err(ConfigError::Invalid {
                key: key.into(),
                message: body.into(),
            });
        }
        let net = &self.network;
        let invalid = |key: &str, message: String| {
            Err(ConfigError::Invalid {
                key: key.into(),
                message,
            })
        };
        let expect = [
            ("network.image_channels", net.image_channels, 5),
            ("network.image_height", net.image_height, self.camera.height),
            ("network.image_width", net.image_width, self.camera.width),
            ("network.joint_dim", net.joint_dim, 6),
            ("network.ee_dim", net.ee_dim, 3),
            ("network.action_dim", net.action_dim, self.action.action_dim()),
        ];
        for (key, got, want) in expect {
            if got != want {
                return invalid(key, format!("is {got}, the environment requires {want}"));
            }
        }
        check("network", Network::new(net.clone()).map(|_| ()))?;
        if self.train.envs == 0 {
            return invalid("train.envs", "must be at least 1".into());
        }
        if self.eval.episodes == 0 {
            return invalid("eval.episodes", "must be at least 1".into());
        }
        if self.eval.grid.repeats == 0 {
            return invalid("eval.grid.repeats", "must be at least 1".into());
        }
        if !(self.bridge.rate_hz > 0.0 && self.bridge.rate_hz.is_finite()) {
            return invalid("bridge.rate_hz", "must be positive and finite".into());
        }
        Ok(())
    }

    /// Parse without validating.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().to_string();
            match unknown_field(&message) {
                Some(field) => ConfigError::UnknownKey {
                    key: join_key(&path, field),
                },
                None => ConfigError::Invalid {
                    key: if path == "." { "<root>".into() } else { path },
                    message,
                },
            }
        })
    }

    /// Parse and validate.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

fn unknown_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("unknown field `")?;
    rest.split('`').next()
}

fn join_key(path: &str, field: &str) -> String {
    // serde_path_to_error reports the path down to the offending map, and in
    // some cases the unknown key itself as the last segment.
    if path.is_empty() || path == "." || path == field {
        return field.into();
    }
    if path.ends_with(&format!(".{field}")) {
        return path.into();
    }
    format!("{path}.{field}")
}
