//! Procedural deformable plant: a stem of rigid segments joined by 2-DoF
//! torsional spring-dampers, with branch chains and disc leaves attached.
//!
//! Segments are stored in topological order (a parent always precedes its
//! children). Each segment owns the joint at its base. The joint bends the
//! segment about the parent's local x axis and then about the resulting local
//! y axis; twist is not modelled.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{segment_segment_closest, Mat3, Pose, Vec3};

/// Default physics timestep (seconds).
pub const DEFAULT_DT: f64 = 1.0 / 60.0;
/// Default inner solver iterations per timestep.
pub const DEFAULT_SOLVER_ITERATIONS: usize = 8;
/// Default penalty gain for capsule contact (N/m).
pub const DEFAULT_CONTACT_GAIN: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("invalid plant spec: {field} {reason}")]
    InvalidSpec {
        field: &'static str,
        reason: &'static str,
    },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("torque vector has {got} entries, plant has {expected} joints")]
    TorqueShape { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSpec {
    pub stem_segments: usize,
    pub segment_length: f64,
    pub stem_radius: f64,
    pub branch_count: usize,
    pub branch_segments: usize,
    pub branch_segment_length: f64,
    /// Mean tilt of a branch away from the stem (radians).
    pub branch_tilt: f64,
    pub leaves_per_branch: usize,
    pub leaf_radius: f64,
    /// Mass lumped at the distal end of every segment (kg).
    pub segment_mass: f64,
    pub leaf_mass: f64,
    /// N·m/rad, shared by every joint DoF.
    pub stiffness: f64,
    /// N·m·s/rad, shared by every joint DoF.
    pub damping: f64,
    pub base_pose: Pose,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            stem_segments: 6,
            segment_length: 0.06,
            stem_radius: 0.008,
            branch_count: 6,
            branch_segments: 2,
            branch_segment_length: 0.045,
            branch_tilt: 1.0,
            leaves_per_branch: 2,
            leaf_radius: 0.04,
            segment_mass: 0.02,
            leaf_mass: 0.005,
            stiffness: 0.12,
            damping: 0.08,
            base_pose: Pose::from_translation(Vec3::new(0.0, 0.22, 0.0)),
            seed: 7,
        }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<(), PlantError> {
        let bad = |field, reason| Err(PlantError::InvalidSpec { field, reason });
        if self.stem_segments < 2 {
            return bad("stem_segments", "must be at least 2");
        }
        for (field, v) in [
            ("segment_length", self.segment_length),
            ("stem_radius", self.stem_radius),
            ("leaf_radius", self.leaf_radius),
            ("segment_mass", self.segment_mass),
            ("stiffness", self.stiffness),
            ("damping", self.damping),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(field, "must be positive and finite");
            }
        }
        if self.branch_count > 0 {
            if self.branch_segments == 0 {
                return bad("branch_segments", "must be at least 1 when branches exist");
            }
            if !(self.branch_segment_length.is_finite() && self.branch_segment_length > 0.0) {
                return bad("branch_segment_length", "must be positive and finite");
            }
        }
        if !(self.leaf_mass.is_finite() && self.leaf_mass >= 0.0) {
            return bad("leaf_mass", "must be non-negative and finite");
        }
        if !self.branch_tilt.is_finite() {
            return bad("branch_tilt", "must be finite");
        }
        if !self.base_pose.trans.is_finite() {
            return bad("base_pose", "must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Stem,
    Branch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub parent: Option<usize>,
    pub kind: SegmentKind,
    pub length: f64,
    pub radius: f64,
    /// Fixed rotation between the parent frame and this joint's frame.
    pub mount: Mat3,
    /// Effective scalar inertia about this joint (kg·m²), from the rest shape.
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf {
    pub segment: usize,
    /// Leaf centre in the segment frame, relative to the segment's distal end.
    pub offset: Vec3,
    /// Unit normal in the segment frame.
    pub normal: Vec3,
    pub radius: f64,
}

/// Immutable structure shared by every state of one plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub spec: PlantSpec,
    pub segments: Vec<Segment>,
    pub leaves: Vec<Leaf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafPose {
    pub center: Vec3,
    pub normal: Vec3,
    pub radius: f64,
}

/// Capsule used both for plant segments and for external probes (arm links).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    model: Arc<PlantModel>,
    pub joint_angles: Vec<[f64; 2]>,
    pub joint_velocities: Vec<[f64; 2]>,
    pub rest_angles: Vec<[f64; 2]>,
    frames: Vec<Mat3>,
    starts: Vec<Vec3>,
    ends: Vec<Vec3>,
    leaves: Vec<LeafPose>,
}

/// Build a plant at rest from its spec. Deterministic in `spec.seed`.
pub fn build_plant(spec: &PlantSpec) -> Result<PlantState, PlantError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut segments = Vec::new();
    let mut rest = Vec::new();
    for i in 0..spec.stem_segments {
        segments.push(Segment {
            parent: i.checked_sub(1),
            kind: SegmentKind::Stem,
            length: spec.segment_length,
            radius: spec.stem_radius,
            mount: Mat3::IDENTITY,
            inertia: 0.0,
        });
        rest.push([0.0, 0.0]);
    }

    // Branches sprout from the upper two thirds of the stem on a jittered
    // golden-angle spiral.
    let mut leaves = Vec::new();
    let first = spec.stem_segments / 3;
    let span = spec.stem_segments - first;
    let golden = core::f64::consts::PI * (3.0 - libm::sqrt(5.0));
    let az0: f64 = rng.random_range(0.0..core::f64::consts::TAU);
    for b in 0..spec.branch_count {
        let attach = first + (b * span) / spec.branch_count.max(1);
        let attach = attach.min(spec.stem_segments - 1);
        let azimuth = az0 + golden * b as f64 + rng.random_range(-0.2..0.2);
        let tilt = spec.branch_tilt * rng.random_range(0.8..1.2);
        let mut parent = attach;
        for k in 0..spec.branch_segments {
            let idx = segments.len();
            let mount = if k == 0 {
                Mat3::rot_z(azimuth)
            } else {
                Mat3::IDENTITY
            };
            // Successive branch segments droop a little further.
            let bend = if k == 0 { tilt } else { 0.25 * tilt };
            segments.push(Segment {
                parent: Some(parent),
                kind: SegmentKind::Branch,
                length: spec.branch_segment_length,
                radius: 0.6 * spec.stem_radius,
                mount,
                inertia: 0.0,
            });
            rest.push([0.0, bend]);
            parent = idx;
        }
        let chain_start = segments.len() - spec.branch_segments;
        for l in 0..spec.leaves_per_branch {
            // Spread leaves from the tip back toward the stem.
            let along = spec.branch_segments - 1 - (l % spec.branch_segments);
            let roll: f64 = rng.random_range(-0.5..0.5);
            let normal = Mat3::rot_z(roll) * Vec3::Y;
            let reach = spec.leaf_radius * (0.6 + 0.3 * (l / spec.branch_segments) as f64);
            leaves.push(Leaf {
                segment: chain_start + along,
                offset: Vec3::new(0.0, 0.0, reach),
                normal,
                radius: spec.leaf_radius,
            });
        }
    }

    let mut model = PlantModel {
        spec: spec.clone(),
        segments,
        leaves,
    };
    let zero = vec![[0.0, 0.0]; model.segments.len()];
    let kin = Kinematics::compute(&model, &rest);
    assign_inertia(&mut model, &kin);
    let model = Arc::new(model);
    let mut state = PlantState {
        model,
        joint_angles: rest.clone(),
        joint_velocities: zero,
        rest_angles: rest,
        frames: kin.frames,
        starts: kin.starts,
        ends: kin.ends,
        leaves: Vec::new(),
    };
    state.leaves = leaf_poses(&state.model, &state.frames, &state.ends);
    Ok(state)
}

struct Kinematics {
    frames: Vec<Mat3>,
    starts: Vec<Vec3>,
    ends: Vec<Vec3>,
}

impl Kinematics {
    fn compute(model: &PlantModel, angles: &[[f64; 2]]) -> Self {
        let base = &model.spec.base_pose;
        let n = model.segments.len();
        let mut frames = Vec::with_capacity(n);
        let mut starts = Vec::with_capacity(n);
        let mut ends = Vec::with_capacity(n);
        for (seg, ang) in model.segments.iter().zip(angles) {
            let (parent_rot, start) = match seg.parent {
                Some(p) => (frames[p], ends[p]),
                None => (base.rot, base.trans),
            };
            let rot = parent_rot * seg.mount * Mat3::rot_x(ang[0]) * Mat3::rot_y(ang[1]);
            let end = start + rot * Vec3::new(0.0, 0.0, seg.length);
            frames.push(rot);
            starts.push(start);
            ends.push(end);
        }
        Self {
            frames,
            starts,
            ends,
        }
    }
}

fn leaf_poses(model: &PlantModel, frames: &[Mat3], ends: &[Vec3]) -> Vec<LeafPose> {
    model
        .leaves
        .iter()
        .map(|l| LeafPose {
            center: ends[l.segment] + frames[l.segment] * l.offset,
            normal: frames[l.segment] * l.normal,
            radius: l.radius,
        })
        .collect()
}

fn assign_inertia(model: &mut PlantModel, kin: &Kinematics) {
    let n = model.segments.len();
    let seg_mass = model.spec.segment_mass;
    let leaf_mass = model.spec.leaf_mass;
    // Point masses: one per segment end, one per leaf centre.
    let mut masses: Vec<(usize, Vec3, f64)> = (0..n).map(|i| (i, kin.ends[i], seg_mass)).collect();
    for l in &model.leaves {
        let c = kin.ends[l.segment] + kin.frames[l.segment] * l.offset;
        masses.push((l.segment, c, leaf_mass));
    }
    for j in 0..n {
        let origin = kin.starts[j];
        let mut inertia = 0.0;
        for &(owner, p, m) in &masses {
            if is_ancestor_or_self(&model.segments, j, owner) {
                inertia += m * (p - origin).norm_sq();
            }
        }
        model.segments[j].inertia = inertia.max(1e-9);
    }
}

fn is_ancestor_or_self(segments: &[Segment], ancestor: usize, mut node: usize) -> bool {
    loop {
        if node == ancestor {
            return true;
        }
        match segments[node].parent {
            Some(p) => node = p,
            None => return false,
        }
    }
}

impl PlantState {
    pub fn model(&self) -> &PlantModel {
        &self.model
    }

    pub fn spec(&self) -> &PlantSpec {
        &self.model.spec
    }

    pub fn joint_count(&self) -> usize {
        self.joint_angles.len()
    }

    /// Base point followed by the distal end of every segment.
    pub fn node_positions(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.ends.len() + 1);
        out.push(self.model.spec.base_pose.trans);
        out.extend_from_slice(&self.ends);
        out
    }

    pub fn stem_tip(&self) -> Vec3 {
        self.ends[self.model.spec.stem_segments - 1]
    }

    pub fn segment_frames(&self) -> &[Mat3] {
        &self.frames
    }

    pub fn segment_capsules(&self) -> impl Iterator<Item = Capsule> + '_ {
        self.model
            .segments
            .iter()
            .enumerate()
            .map(move |(i, s)| Capsule {
                a: self.starts[i],
                b: self.ends[i],
                radius: s.radius,
            })
    }

    pub fn leaf_poses(&self) -> &[LeafPose] {
        &self.leaves
    }

    pub fn is_finite(&self) -> bool {
        self.joint_angles
            .iter()
            .chain(&self.joint_velocities)
            .all(|a| a[0].is_finite() && a[1].is_finite())
    }

    /// Replace the joint angles and recompute all derived geometry.
    pub fn set_joint_angles(&mut self, angles: Vec<[f64; 2]>) {
        assert_eq!(angles.len(), self.joint_angles.len());
        self.joint_angles = angles;
        self.refresh();
    }

    fn refresh(&mut self) {
        let kin = Kinematics::compute(&self.model, &self.joint_angles);
        self.leaves = leaf_poses(&self.model, &kin.frames, &kin.ends);
        self.frames = kin.frames;
        self.starts = kin.starts;
        self.ends = kin.ends;
    }

    /// World-frame axes of the two bend DoF of joint `j`.
    pub fn joint_axes(&self, j: usize) -> (Vec3, Vec3) {
        let seg = &self.model.segments[j];
        let parent_rot = match seg.parent {
            Some(p) => self.frames[p],
            None => self.model.spec.base_pose.rot,
        };
        let pre = parent_rot * seg.mount;
        let ax = pre * Vec3::X;
        let ay = pre * Mat3::rot_x(self.joint_angles[j][0]) * Vec3::Y;
        (ax, ay)
    }

    /// Joint torques produced by a world-frame force applied at `point` on segment `seg`.
    pub fn force_to_torques(&self, seg: usize, point: Vec3, force: Vec3, out: &mut [[f64; 2]]) {
        let mut j = Some(seg);
        while let Some(idx) = j {
            let moment = (point - self.starts[idx]).cross(force);
            let (ax, ay) = self.joint_axes(idx);
            out[idx][0] += moment.dot(ax);
            out[idx][1] += moment.dot(ay);
            j = self.model.segments[idx].parent;
        }
    }
}

/// Advance the plant by `dt`, split into `solver_iterations` substeps.
///
/// Each substep is semi-implicit: the spring-damper torque is evaluated at the
/// end-of-substep state, the external torque is held constant over `dt`. With
/// no external torque the elastic plus kinetic energy never increases.
pub fn step_plant(
    state: &PlantState,
    external_torques: &[[f64; 2]],
    dt: f64,
    solver_iterations: usize,
) -> Result<PlantState, PlantError> {
    if external_torques.len() != state.joint_count() {
        return Err(PlantError::TorqueShape {
            expected: state.joint_count(),
            got: external_torques.len(),
        });
    }
    if !external_torques.iter().all(|t| t[0].is_finite() && t[1].is_finite()) {
        return Err(PlantError::NonFinite("external torque"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(PlantError::InvalidSpec {
            field: "dt",
            reason: "must be positive and finite",
        });
    }
    if solver_iterations == 0 {
        return Err(PlantError::InvalidSpec {
            field: "solver_iterations",
            reason: "must be at least 1",
        });
    }
    let spec = &state.model.spec;
    let (k, c) = (spec.stiffness, spec.damping);
    let h = dt / solver_iterations as f64;
    let mut next = state.clone();
    for _ in 0..solver_iterations {
        for (j, seg) in state.model.segments.iter().enumerate() {
            let inv_i = 1.0 / seg.inertia;
            let denom = 1.0 + h * c * inv_i + h * h * k * inv_i;
            for d in 0..2 {
                let theta = next.joint_angles[j][d];
                let disp = theta - next.rest_angles[j][d];
                let vel = next.joint_velocities[j][d];
                let v_new = (vel + h * inv_i * (external_torques[j][d] - k * disp)) / denom;
                next.joint_velocities[j][d] = v_new;
                next.joint_angles[j][d] = theta + h * v_new;
            }
        }
    }
    next.refresh();
    Ok(next)
}

/// Force exerted by the plant on one probe capsule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeForce {
    pub probe: usize,
    pub point: Vec3,
    pub force: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contact {
    pub plant_torques: Vec<[f64; 2]>,
    pub probe_forces: Vec<ProbeForce>,
}

impl Contact {
    pub fn is_empty(&self) -> bool {
        self.probe_forces.is_empty()
    }
}

/// Linear penalty contact between plant segments and probe capsules.
pub fn contact(plant: &PlantState, probes: &[Capsule], gain: f64) -> Contact {
    let mut plant_torques = vec![[0.0, 0.0]; plant.joint_count()];
    let mut probe_forces = Vec::new();
    for (s, seg) in plant.segment_capsules().enumerate() {
        for (p, probe) in probes.iter().enumerate() {
            let reach = seg.radius + probe.radius;
            let (d2, ts, tp) = segment_segment_closest(seg.a, seg.b, probe.a, probe.b);
            if d2 >= reach * reach {
                continue;
            }
            let cs = seg.a + (seg.b - seg.a) * ts;
            let cp = probe.a + (probe.b - probe.a) * tp;
            let dist = libm::sqrt(d2);
            let normal = if dist > 1e-12 {
                (cs - cp) * (1.0 / dist)
            } else {
                fallback_normal(seg.b - seg.a, probe.b - probe.a)
            };
            let force = normal * (gain * (reach - dist));
            plant.force_to_torques(s, cs, force, &mut plant_torques);
            probe_forces.push(ProbeForce {
                probe: p,
                point: cp,
                force: -force,
            });
        }
    }
    Contact {
        plant_torques,
        probe_forces,
    }
}

fn fallback_normal(u: Vec3, v: Vec3) -> Vec3 {
    let n = u.cross(v);
    if n.norm_sq() > 1e-24 {
        return n.normalized();
    }
    let n = u.cross(Vec3::X);
    if n.norm_sq() > 1e-24 {
        n.normalized()
    } else {
        Vec3::Y
    }
}

/// Per-joint torques from probe penetration; all zero when nothing touches.
pub fn contact_torques(plant: &PlantState, probes: &[Capsule], gain: f64) -> Vec<[f64; 2]> {
    contact(plant, probes, gain).plant_torques
}

/// Elastic plus kinetic energy (J).
pub fn plant_energy(state: &PlantState) -> f64 {
    let k = state.model.spec.stiffness;
    let mut elastic = 0.0;
    let mut kinetic = 0.0;
    for (j, seg) in state.model.segments.iter().enumerate() {
        for d in 0..2 {
            let disp = state.joint_angles[j][d] - state.rest_angles[j][d];
            elastic += disp * disp;
            let v = state.joint_velocities[j][d];
            kinetic += seg.inertia * v * v;
        }
    }
    0.5 * k * elastic + 0.5 * kinetic
}
