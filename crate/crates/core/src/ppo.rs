//! Proximal policy optimisation: advantage estimation, the clipped surrogate
//! loss and its gradient, Adam, the KL-adaptive learning rate, running
//! standardisation, and the vectorised training loop.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvConfig, EnvError, Observation};
use crate::nn::{gaussian_entropy, gaussian_log_prob, sample_action, Network, NetworkError, OutputGrad, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    /// Steps collected per environment between updates.
    pub rollouts: usize,
    pub learning_epochs: usize,
    pub mini_batches: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub kl_threshold: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub grad_norm_clip: f64,
    pub scaler_clip: f64,
    pub scaler_epsilon: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            rollouts: 32,
            learning_epochs: 5,
            mini_batches: 32,
            gamma: 0.99,
            lambda: 0.95,
            learning_rate: 3e-4,
            kl_threshold: 0.008,
            lr_min: 1e-6,
            lr_max: 1e-2,
            clip_epsilon: 0.2,
            value_coef: 1.0,
            entropy_coef: 0.0,
            grad_norm_clip: 0.5,
            scaler_clip: 5.0,
            scaler_epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PpoError {
    #[error("invalid ppo config: {0}")]
    Config(&'static str),
    #[error("length mismatch: {0}")]
    Shape(&'static str),
    #[error("non-finite loss in epoch {epoch}, minibatch {minibatch}: policy {policy_loss}, value {value_loss}")]
    NonFinite {
        epoch: usize,
        minibatch: usize,
        policy_loss: f64,
        value_loss: f64,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("checkpoint sink failed: {0}")]
    Sink(String),
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m| Err(PpoError::Config(m));
        if self.rollouts == 0 || self.learning_epochs == 0 || self.mini_batches == 0 {
            return bad("rollouts, learning_epochs and mini_batches must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad("learning rates must be positive with lr_min <= lr_max");
        }
        if !(self.kl_threshold > 0.0) {
            return bad("kl_threshold must be positive");
        }
        if !(self.clip_epsilon > 0.0 && self.grad_norm_clip > 0.0 && self.scaler_clip > 0.0) {
            return bad("clip_epsilon, grad_norm_clip and scaler_clip must be positive");
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0 && self.scaler_epsilon > 0.0) {
            return bad("coefficients must be non-negative and scaler_epsilon positive");
        }
        Ok(())
    }
}

/// `Σ_k γ^k r_k`, accumulated from the back.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Generalised advantage estimates and returns. `values` carries one extra
/// bootstrap entry; a done at `t` cuts both the bootstrap and the recursion.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(PpoError::Shape("gae needs len(values) = len(rewards) + 1 = len(dones) + 1"));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Divide by 1.5 above twice the threshold, multiply by 1.5 below half of it.
pub fn kl_adaptive_lr(lr: f64, kl: f64, threshold: f64, lr_min: f64, lr_max: f64) -> f64 {
    let next = if kl > 2.0 * threshold {
        lr / 1.5
    } else if kl < 0.5 * threshold {
        lr * 1.5
    } else {
        lr
    };
    next.clamp(lr_min, lr_max)
}

/// `(x - mean) / std`, with a population standard deviation. A batch with
/// no spread beyond rounding noise maps to zeros.
pub fn standardize(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    if !(std > f64::MIN_POSITIVE && std > 1e-10 * libm::fabs(mean)) {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// Streaming per-feature mean and variance with a clipped standardising map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningScaler {
    pub count: f64,
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the mean.
    pub m2: Vec<f64>,
    pub epsilon: f64,
    pub clip: f64,
}

impl RunningScaler {
    pub fn new(dim: usize, epsilon: f64, clip: f64) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            epsilon,
            clip,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update_one(&mut self, x: &[f64]) {
        self.count += 1.0;
        let n = self.count;
        for i in 0..self.mean.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Merge a batch using its two-pass moments.
    pub fn update_batch(&mut self, batch: &[&[f64]]) {
        if batch.is_empty() {
            return;
        }
        let nb = batch.len() as f64;
        let dim = self.dim();
        let mut bmean = vec![0.0; dim];
        for x in batch {
            for i in 0..dim {
                bmean[i] += x[i];
            }
        }
        bmean.iter_mut().for_each(|m| *m /= nb);
        let mut bm2 = vec![0.0; dim];
        for x in batch {
            for i in 0..dim {
                let d = x[i] - bmean[i];
                bm2[i] += d * d;
            }
        }
        let na = self.count;
        let total = na + nb;
        for i in 0..dim {
            let d = bmean[i] - self.mean[i];
            self.mean[i] += d * nb / total;
            self.m2[i] += bm2[i] + d * d * na * nb / total;
        }
        self.count = total;
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0.0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m| m / self.count).collect()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let c = self.count;
        out.extend(x.iter().enumerate().map(|(i, &v)| {
            let var = if c == 0.0 { 1.0 } else { self.m2[i] / c };
            ((v - self.mean[i]) / libm::sqrt(var + self.epsilon)).clamp(-self.clip, self.clip)
        }));
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        self.apply_into(x, &mut out);
        out
    }

    pub fn unapply(&self, z: &[f64]) -> Vec<f64> {
        let var = self.variance();
        z.iter()
            .enumerate()
            .map(|(i, &v)| v * libm::sqrt(var[i] + self.epsilon) + self.mean[i])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - libm::pow(self.beta1, self.t as f64);
        let b2t = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * mh / (libm::sqrt(vh) + self.epsilon);
        }
    }
}

/// Rescale `grad` in place so its L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// One stored transition, observation already standardised.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Unclipped Gaussian draw.
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    /// Value estimate in return units.
    pub value: f64,
    pub done: bool,
}

/// Transitions laid out step-major: index `t * envs + e`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub envs: usize,
    pub steps: Vec<Transition>,
}

impl RolloutBuffer {
    pub fn new(envs: usize) -> Self {
        Self {
            envs,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Advantages and returns per transition, bootstrapped from `last_values`.
    pub fn advantages(&self, last_values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
        let envs = self.envs;
        if envs == 0 || self.steps.len() % envs != 0 || last_values.len() != envs {
            return Err(PpoError::Shape("rollout buffer is not a whole number of env steps"));
        }
        let t_len = self.steps.len() / envs;
        let mut adv = vec![0.0; self.steps.len()];
        let mut ret = vec![0.0; self.steps.len()];
        let mut rewards = Vec::with_capacity(t_len);
        let mut values = Vec::with_capacity(t_len + 1);
        let mut dones = Vec::with_capacity(t_len);
        for e in 0..envs {
            rewards.clear();
            values.clear();
            dones.clear();
            for t in 0..t_len {
                let s = &self.steps[t * envs + e];
                rewards.push(s.reward);
                values.push(s.value);
                dones.push(s.done);
            }
            values.push(last_values[e]);
            let (a, r) = gae(&rewards, &values, &dones, gamma, lambda)?;
            for t in 0..t_len {
                adv[t * envs + e] = a[t];
                ret[t * envs + e] = r[t];
            }
        }
        Ok((adv, ret))
    }
}

/// Training view of one transition.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub obs: &'a [f64],
    pub action: &'a [f64],
    pub old_log_prob: f64,
    pub advantage: f64,
    /// Standardised return the value head regresses onto.
    pub value_target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl LossStats {
    pub fn total(&self, cfg: &PpoConfig) -> f64 {
        self.policy_loss + cfg.value_coef * self.value_loss - cfg.entropy_coef * self.entropy
    }
}

/// Clipped-surrogate, value and entropy loss over a minibatch; the gradient
/// of the total is accumulated into `grad`. Advantages are standardised
/// within the minibatch.
pub fn minibatch_loss(
    net: &Network,
    params: &[f64],
    batch: &[Sample<'_>],
    cfg: &PpoConfig,
    grad: &mut [f64],
) -> Result<LossStats, PpoError> {
    let b = batch.len();
    if b == 0 {
        return Ok(LossStats::default());
    }
    let advs = standardize(&batch.iter().map(|s| s.advantage).collect::<Vec<_>>());
    let inv_b = 1.0 / b as f64;
    let eps = cfg.clip_epsilon;
    let mut stats = LossStats::default();
    let mut tape = Tape::default();
    let mut up = OutputGrad::zeros(net.action_dim());
    for (s, &adv) in batch.iter().zip(&advs) {
        let out = net.forward(params, s.obs, &mut tape)?;
        let logp = gaussian_log_prob(s.action, &out.mean, &out.log_std);
        let log_ratio = logp - s.old_log_prob;
        let ratio = libm::exp(log_ratio);
        let surr1 = ratio * adv;
        let surr2 = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
        stats.policy_loss -= surr1.min(surr2) * inv_b;
        stats.approx_kl += ((ratio - 1.0) - log_ratio) * inv_b;
        if (ratio - 1.0).abs() > eps {
            stats.clip_fraction += inv_b;
        }
        let d_logp = if surr1 <= surr2 { -adv * ratio * inv_b } else { 0.0 };
        let dv = out.value - s.value_target;
        stats.value_loss += dv * dv * inv_b;
        stats.entropy += gaussian_entropy(&out.log_std) * inv_b;

        for i in 0..up.mean.len() {
            let inv_var = libm::exp(-2.0 * out.log_std[i]);
            let diff = s.action[i] - out.mean[i];
            up.mean[i] = d_logp * diff * inv_var;
            up.log_std[i] = d_logp * (diff * diff * inv_var - 1.0) - cfg.entropy_coef * inv_b;
        }
        up.value = cfg.value_coef * 2.0 * dv * inv_b;
        net.backward(params, &tape, &up, grad);
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub lr: f64,
}

/// Mutable optimisation state shared by [`ppo_update`] calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub params: Vec<f64>,
    pub adam: Adam,
    pub lr: f64,
    pub obs_scaler: RunningScaler,
    pub value_scaler: RunningScaler,
}

impl Learner {
    pub fn new(net: &Network, cfg: &PpoConfig, seed: u64) -> Self {
        let params = net.init_params(seed);
        Self {
            adam: Adam::new(params.len()),
            params,
            lr: cfg.learning_rate,
            obs_scaler: RunningScaler::new(net.input_dim(), cfg.scaler_epsilon, cfg.scaler_clip),
            value_scaler: RunningScaler::new(1, cfg.scaler_epsilon, cfg.scaler_clip),
        }
    }

    /// Value-head output mapped back to return units.
    pub fn value_in_return_units(&self, raw: f64) -> f64 {
        self.value_scaler.unapply(&[raw])[0]
    }
}

/// Several epochs of shuffled minibatch updates over a full buffer.
pub fn ppo_update(
    net: &Network,
    learner: &mut Learner,
    buffer: &RolloutBuffer,
    last_values: &[f64],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, PpoError> {
    let (adv, returns) = buffer.advantages(last_values, cfg.gamma, cfg.lambda)?;
    let ret_rows: Vec<[f64; 1]> = returns.iter().map(|&r| [r]).collect();
    let ret_refs: Vec<&[f64]> = ret_rows.iter().map(|r| &r[..]).collect();
    learner.value_scaler.update_batch(&ret_refs);
    let targets: Vec<f64> = returns
        .iter()
        .map(|&r| learner.value_scaler.apply(&[r])[0])
        .collect();

    let n = buffer.len();
    let mb = cfg.mini_batches.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; net.param_count()];
    let mut totals = UpdateStats::default();
    let mut count = 0.0;
    for epoch in 0..cfg.learning_epochs {
        order.shuffle(rng);
        let mut epoch_kl = 0.0;
        for m in 0..mb {
            let lo = m * n / mb;
            let hi = (m + 1) * n / mb;
            let batch: Vec<Sample<'_>> = order[lo..hi]
                .iter()
                .map(|&i| {
                    let s = &buffer.steps[i];
                    Sample {
                        obs: &s.obs,
                        action: &s.action,
                        old_log_prob: s.log_prob,
                        advantage: adv[i],
                        value_target: targets[i],
                    }
                })
                .collect();
            grad.fill(0.0);
            let st = minibatch_loss(net, &learner.params, &batch, cfg, &mut grad)?;
            if !(st.total(cfg).is_finite() && grad.iter().all(|g| g.is_finite())) {
                return Err(PpoError::NonFinite {
                    epoch,
                    minibatch: m,
                    policy_loss: st.policy_loss,
                    value_loss: st.value_loss,
                });
            }
            clip_grad_norm(&mut grad, cfg.grad_norm_clip);
            learner.adam.step(&mut learner.params, &grad, learner.lr);
            epoch_kl += st.approx_kl / mb as f64;
            totals.policy_loss += st.policy_loss;
            totals.value_loss += st.value_loss;
            totals.entropy += st.entropy;
            totals.clip_fraction += st.clip_fraction;
            count += 1.0;
        }
        learner.lr = kl_adaptive_lr(learner.lr, epoch_kl, cfg.kl_threshold, cfg.lr_min, cfg.lr_max);
        totals.kl += epoch_kl / cfg.learning_epochs as f64;
    }
    totals.policy_loss /= count;
    totals.value_loss /= count;
    totals.entropy /= count;
    totals.clip_fraction /= count;
    totals.lr = learner.lr;
    Ok(totals)
}

/// splitmix64 over (master, stream, index); used to derive every episode seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub envs: usize,
    /// Environment-step budget; training stops at the first update boundary past it.
    pub total_steps: usize,
    /// Updates between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Finished episodes averaged in each metrics line.
    pub metrics_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            envs: 16,
            total_steps: 1_000_000,
            checkpoint_every: 10,
            metrics_window: 64,
        }
    }
}

/// One metrics line, written after every update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub update: usize,
    pub step: u64,
    pub episode_return: f64,
    pub success_rate: f64,
    pub kl: f64,
    pub lr: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

/// Everything needed to resume training or run the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub network: crate::nn::NetworkConfig,
    pub learner: Learner,
    pub env_steps: u64,
    pub updates: usize,
    pub episode_counters: Vec<u64>,
    pub seed: u64,
}

/// Receives metrics and checkpoints from the training loop.
pub trait TrainingSink {
    fn metrics(&mut self, m: &TrainMetrics) -> Result<(), String>;
    fn checkpoint(&mut self, snapshot: &Snapshot) -> Result<(), String>;
}

/// Discards everything.
pub struct NullSink;

impl TrainingSink for NullSink {
    fn metrics(&mut self, _: &TrainMetrics) -> Result<(), String> {
        Ok(())
    }
    fn checkpoint(&mut self, _: &Snapshot) -> Result<(), String> {
        Ok(())
    }
}

struct Slot {
    env: Env,
    obs: Observation,
    episodes: u64,
    ret: f64,
    succeeded: bool,
}

const TRAIN_STREAM: u64 = 1;

/// Vectorised single-threaded rollout/update loop.
pub struct Trainer {
    net: Network,
    cfg: TrainConfig,
    learner: Learner,
    slots: Vec<Slot>,
    seed: u64,
    env_steps: u64,
    updates: usize,
    recent: alloc::collections::VecDeque<(f64, bool)>,
}

impl Trainer {
    pub fn new(env_cfg: EnvConfig, net_cfg: crate::nn::NetworkConfig, cfg: TrainConfig, seed: u64) -> Result<Self, PpoError> {
        let net = Network::new(net_cfg)?;
        let learner = Learner::new(&net, &cfg.ppo, derive_seed(seed, 0, 0));
        Self::assemble(env_cfg, net, cfg, learner, seed, 0, 0, None)
    }

    pub fn resume(env_cfg: EnvConfig, cfg: TrainConfig, snap: Snapshot) -> Result<Self, PpoError> {
        let net = Network::new(snap.network.clone())?;
        if snap.learner.params.len() != net.param_count() {
            return Err(PpoError::Shape("snapshot parameters do not match the network"));
        }
        Self::assemble(
            env_cfg,
            net,
            cfg,
            snap.learner,
            snap.seed,
            snap.env_steps,
            snap.updates,
            Some(snap.episode_counters),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        env_cfg: EnvConfig,
        net: Network,
        cfg: TrainConfig,
        learner: Learner,
        seed: u64,
        env_steps: u64,
        updates: usize,
        counters: Option<Vec<u64>>,
    ) -> Result<Self, PpoError> {
        cfg.ppo.validate()?;
        if cfg.envs == 0 {
            return Err(PpoError::Config("envs must be at least 1"));
        }
        let mut slots = Vec::with_capacity(cfg.envs);
        for e in 0..cfg.envs {
            let mut env = Env::new(env_cfg.clone())?;
            if env.action_dim() != net.action_dim() {
                return Err(PpoError::Shape("network action_dim differs from the env action dimension"));
            }
            let episodes = counters.as_ref().and_then(|c| c.get(e).copied()).unwrap_or(0);
            let (obs, _) = env.reset(derive_seed(seed, TRAIN_STREAM + e as u64, episodes))?;
            if obs.features().len() != net.input_dim() {
                return Err(PpoError::Shape("network input_dim differs from the observation size"));
            }
            slots.push(Slot {
                env,
                obs,
                episodes,
                ret: 0.0,
                succeeded: false,
            });
        }
        Ok(Self {
            net,
            cfg,
            learner,
            slots,
            seed,
            env_steps,
            updates,
            recent: Default::default(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            network: self.net.config().clone(),
            learner: self.learner.clone(),
            env_steps: self.env_steps,
            updates: self.updates,
            episode_counters: self.slots.iter().map(|s| s.episodes).collect(),
            seed: self.seed,
        }
    }

    /// Collect one rollout and run one update.
    pub fn iterate(&mut self) -> Result<TrainMetrics, PpoError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0, self.updates as u64 + 1));
        let envs = self.slots.len();
        let mut buffer = RolloutBuffer::new(envs);
        let mut tape = Tape::default();
        let mut raw: Vec<Vec<f64>> = Vec::with_capacity(envs);
        for _ in 0..self.cfg.ppo.rollouts {
            raw.clear();
            raw.extend(self.slots.iter().map(|s| s.obs.features()));
            let refs: Vec<&[f64]> = raw.iter().map(|r| r.as_slice()).collect();
            self.learner.obs_scaler.update_batch(&refs);
            for (e, slot) in self.slots.iter_mut().enumerate() {
                let obs = self.learner.obs_scaler.apply(&raw[e]);
                let out = self.net.forward(&self.learner.params, &obs, &mut tape)?;
                let sampled = sample_action(&out.mean, &out.log_std, &mut rng);
                let step = slot.env.step(&sampled.action)?;
                let reward = step.reward.total;
                slot.ret += reward;
                slot.succeeded |= step.info.success;
                if step.done {
                    self.recent.push_back((slot.ret, slot.succeeded));
                    while self.recent.len() > self.cfg.metrics_window.max(1) {
                        self.recent.pop_front();
                    }
                    slot.ret = 0.0;
                    slot.succeeded = false;
                    slot.episodes += 1;
                    let seed = derive_seed(self.seed, TRAIN_STREAM + e as u64, slot.episodes);
                    slot.obs = slot.env.reset(seed)?.0;
                } else {
                    slot.obs = step.observation;
                }
                buffer.steps.push(Transition {
                    obs,
                    action: sampled.raw,
                    log_prob: sampled.log_prob,
                    reward,
                    value: self.learner.value_in_return_units(out.value),
                    done: step.done,
                });
            }
            self.env_steps += envs as u64;
        }
        let mut last_values = Vec::with_capacity(envs);
        for slot in &self.slots {
            let obs = self.learner.obs_scaler.apply(&slot.obs.features());
            let out = self.net.forward(&self.learner.params, &obs, &mut tape)?;
            last_values.push(self.learner.value_in_return_units(out.value));
        }
        let stats = ppo_update(&self.net, &mut self.learner, &buffer, &last_values, &self.cfg.ppo, &mut rng)?;
        self.updates += 1;
        let (ret, succ) = if self.recent.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let n = self.recent.len() as f64;
            (
                self.recent.iter().map(|r| r.0).sum::<f64>() / n,
                self.recent.iter().filter(|r| r.1).count() as f64 / n,
            )
        };
        Ok(TrainMetrics {
            update: self.updates,
            step: self.env_steps,
            episode_return: ret,
            success_rate: succ,
            kl: stats.kl,
            lr: stats.lr,
            clip_fraction: stats.clip_fraction,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
        })
    }

    /// Train until the step budget is spent, reporting to `sink`.
    pub fn run(&mut self, sink: &mut dyn TrainingSink) -> Result<(), PpoError> {
        while self.env_steps < self.cfg.total_steps as u64 {
            let m = self.iterate()?;
            sink.metrics(&m).map_err(PpoError::Sink)?;
            if self.cfg.checkpoint_every > 0 && self.updates % self.cfg.checkpoint_every == 0 {
                sink.checkpoint(&self.snapshot()).map_err(PpoError::Sink)?;
            }
        }
        sink.checkpoint(&self.snapshot()).map_err(PpoError::Sink)
    }
}
