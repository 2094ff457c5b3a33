//! Kinematics of the 6-DoF control chain: one waist joint and five arm joints.

use serde::{Deserialize, Serialize};

use crate::geom::{segment_segment_closest, Axis, Mat3, Pose, Vec3};
use crate::plant::Capsule;

pub const JOINTS: usize = 6;

pub type JointVector = [f64; JOINTS];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ArmError {
    #[error("invalid arm spec: joint {joint} {reason}")]
    InvalidSpec { joint: usize, reason: &'static str },
}

/// Each joint rotates about `axes[i]` of the incoming frame; link `i` then
/// extends `link_lengths[i]` along the local +z axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmSpec {
    pub link_lengths: JointVector,
    pub axes: [Axis; JOINTS],
    pub joint_limits: [[f64; 2]; JOINTS],
    pub capsule_radii: JointVector,
    pub base_pose: Pose,
}

impl Default for ArmSpec {
    fn default() -> Self {
        let deg = core::f64::consts::PI / 180.0;
        let waist = 45.0 * deg;
        let full = 180.0 * deg;
        Self {
            // base post, upper arm, forearm, wrist roll, wrist pitch, flange
            link_lengths: [0.08, 0.11, 0.10, 0.03, 0.03, 0.02],
            axes: [Axis::Z, Axis::X, Axis::X, Axis::Z, Axis::X, Axis::Z],
            joint_limits: [
                [-waist, waist],
                [-full, full],
                [-full, full],
                [-full, full],
                [-full, full],
                [-full, full],
            ],
            capsule_radii: [0.025, 0.02, 0.015, 0.012, 0.012, 0.01],
            base_pose: Pose::IDENTITY,
        }
    }
}

impl ArmSpec {
    pub fn validate(&self) -> Result<(), ArmError> {
        for j in 0..JOINTS {
            let [lo, hi] = self.joint_limits[j];
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ArmError::InvalidSpec {
                    joint: j,
                    reason: "limits must be finite with lo < hi",
                });
            }
            if !(self.link_lengths[j].is_finite() && self.link_lengths[j] >= 0.0) {
                return Err(ArmError::InvalidSpec {
                    joint: j,
                    reason: "link length must be non-negative",
                });
            }
            if !(self.capsule_radii[j].is_finite() && self.capsule_radii[j] > 0.0) {
                return Err(ArmError::InvalidSpec {
                    joint: j,
                    reason: "capsule radius must be positive",
                });
            }
        }
        Ok(())
    }

    /// Straight-chain end-effector position at `q = 0`.
    pub fn home_position(&self) -> Vec3 {
        let total: f64 = self.link_lengths.iter().sum();
        self.base_pose.transform_point(Vec3::new(0.0, 0.0, total))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: JointVector,
    pub qdot: JointVector,
    pub q_target: JointVector,
}

impl ArmState {
    /// At rest at `q`, with the servo target equal to the pose.
    pub fn at_rest(q: JointVector) -> Self {
        Self {
            q,
            qdot: [0.0; JOINTS],
            q_target: q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmKinematics {
    /// Frame at each joint, after the joint rotation. Link `i` starts at
    /// `link_poses[i].trans`.
    pub link_poses: [Pose; JOINTS],
    pub link_ends: [Vec3; JOINTS],
    pub ee_position: Vec3,
}

impl ArmKinematics {
    pub fn capsules(&self, spec: &ArmSpec) -> [Capsule; JOINTS] {
        core::array::from_fn(|i| Capsule {
            a: self.link_poses[i].trans,
            b: self.link_ends[i],
            radius: spec.capsule_radii[i],
        })
    }
}

pub fn forward_kinematics(spec: &ArmSpec, q: &JointVector) -> ArmKinematics {
    let mut pose = spec.base_pose;
    let mut link_poses = [Pose::IDENTITY; JOINTS];
    let mut link_ends = [Vec3::ZERO; JOINTS];
    for i in 0..JOINTS {
        pose = Pose::new(pose.rot * Mat3::rot_axis(spec.axes[i], q[i]), pose.trans);
        link_poses[i] = pose;
        let end = pose.transform_point(Vec3::new(0.0, 0.0, spec.link_lengths[i]));
        link_ends[i] = end;
        pose.trans = end;
    }
    ArmKinematics {
        link_poses,
        link_ends,
        ee_position: link_ends[JOINTS - 1],
    }
}

pub fn capsule_distance(a: &Capsule, b: &Capsule) -> f64 {
    let (d2, _, _) = segment_segment_closest(a.a, a.b, b.a, b.b);
    libm::sqrt(d2)
}

/// True when any pair of non-adjacent link capsules overlaps.
pub fn check_self_collision(spec: &ArmSpec, q: &JointVector) -> bool {
    let caps = forward_kinematics(spec, q).capsules(spec);
    capsules_self_collide(&caps)
}

pub fn capsules_self_collide(caps: &[Capsule; JOINTS]) -> bool {
    for i in 0..JOINTS {
        for j in (i + 2)..JOINTS {
            if capsule_distance(&caps[i], &caps[j]) < caps[i].radius + caps[j].radius {
                return true;
            }
        }
    }
    false
}

pub fn clamp_to_limits(spec: &ArmSpec, q: &JointVector) -> JointVector {
    core::array::from_fn(|i| q[i].clamp(spec.joint_limits[i][0], spec.joint_limits[i][1]))
}

/// Map a world-frame force applied at `point` on link `link` to joint torques.
pub fn force_to_joint_torques(
    kin: &ArmKinematics,
    spec: &ArmSpec,
    link: usize,
    point: Vec3,
    force: Vec3,
    out: &mut JointVector,
) {
    for j in 0..=link {
        let pose = &kin.link_poses[j];
        let axis = pose.rot * spec.axes[j].unit();
        out[j] += (point - pose.trans).cross(force).dot(axis);
    }
}
