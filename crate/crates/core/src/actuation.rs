//! Torque-saturated PD servo that tracks the policy's joint targets.

use serde::{Deserialize, Serialize};

use crate::arm::{clamp_to_limits, ArmSpec, ArmState, JointVector, JOINTS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServoError {
    #[error("invalid servo config: {field} {reason}")]
    InvalidConfig {
        field: &'static str,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServoConfig {
    pub kp: JointVector,
    pub kd: JointVector,
    /// Software analog of the per-motor current limit (N·m).
    pub tau_max: JointVector,
    pub dt: f64,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            kp: [40.0; JOINTS],
            kd: [4.0; JOINTS],
            tau_max: [2.0; JOINTS],
            dt: crate::plant::DEFAULT_DT,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<(), ServoError> {
        let bad = |field, reason| Err(ServoError::InvalidConfig { field, reason });
        for j in 0..JOINTS {
            if !(self.kp[j].is_finite() && self.kp[j] > 0.0) {
                return bad("kp", "must be positive");
            }
            if !(self.kd[j].is_finite() && self.kd[j] >= 0.0) {
                return bad("kd", "must be non-negative");
            }
            if !(self.tau_max[j].is_finite() && self.tau_max[j] > 0.0) {
                return bad("tau_max", "must be positive");
            }
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt", "must be positive");
        }
        Ok(())
    }
}

/// Normalised joint-delta command. Entries outside `[-1, 1]` are clipped when applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionCommand {
    pub delta: JointVector,
    /// Radians per unit of `delta`.
    pub scale: JointVector,
}

pub fn apply_action(arm: &ArmState, cmd: &ActionCommand, spec: &ArmSpec) -> ArmState {
    let target: JointVector = core::array::from_fn(|i| {
        let d = if cmd.delta[i].is_nan() {
            0.0
        } else {
            cmd.delta[i].clamp(-1.0, 1.0)
        };
        arm.q_target[i] + d * cmd.scale[i]
    });
    ArmState {
        q_target: clamp_to_limits(spec, &target),
        ..*arm
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServoStep {
    pub state: ArmState,
    /// Motor torque actually emitted (always within `±tau_max`).
    pub torque: JointVector,
}

/// One semi-implicit Euler step of the servo under unit joint inertia.
/// `resist` is the external torque acting on each joint (e.g. plant contact).
pub fn servo_step(arm: &ArmState, resist: &JointVector, cfg: &ServoConfig) -> ServoStep {
    let mut out = *arm;
    let mut torque = [0.0; JOINTS];
    for j in 0..JOINTS {
        let cmd = cfg.kp[j] * (arm.q_target[j] - arm.q[j]) - cfg.kd[j] * arm.qdot[j];
        let tau = cmd.clamp(-cfg.tau_max[j], cfg.tau_max[j]);
        torque[j] = tau;
        let accel = tau + resist[j];
        out.qdot[j] = arm.qdot[j] + cfg.dt * accel;
        out.q[j] = arm.q[j] + cfg.dt * out.qdot[j];
    }
    ServoStep { state: out, torque }
}
