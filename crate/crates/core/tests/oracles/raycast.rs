//! Per-pixel raycast occlusion oracle, written independently of the rasterizer.

use leafpush_core::arm::{forward_kinematics, ArmSpec, JOINTS};
use leafpush_core::geom::{Pose, Vec3};
use leafpush_core::plant::{build_plant, Capsule, PlantSpec, PlantState};
use leafpush_core::render::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_camera() -> CameraSpec {
    CameraSpec {
        width: 32,
        height: 32,
        ..CameraSpec::default()
    }
}

/// First hit of the ray `o + t d` with a sphere, by projecting the centre onto the ray.
pub fn sphere_hit(o: Vec3, d: Vec3, center: Vec3, r: f64, t_min: f64) -> Option<f64> {
    let dd = d.dot(d);
    let tc = (center - o).dot(d) / dd;
    let off = center - (o + d * tc);
    let h2 = r * r - off.dot(off);
    if h2 < 0.0 {
        return None;
    }
    let half = (h2 / dd).sqrt();
    [tc - half, tc + half].into_iter().find(|&t| t >= t_min)
}

/// Squared distance between two segments, coded from the clamped-parameter
/// formulation and checked against all endpoint projections.
pub fn seg_seg_dist2(p0: Vec3, p1: Vec3, q0: Vec3, q1: Vec3) -> f64 {
    let point_seg = |p: Vec3, a: Vec3, b: Vec3| {
        let ab = b - a;
        let l = ab.dot(ab);
        let t = if l > 0.0 { ((p - a).dot(ab) / l).clamp(0.0, 1.0) } else { 0.0 };
        let x = p - (a + ab * t);
        x.dot(x)
    };
    let mut best = point_seg(p0, q0, q1)
        .min(point_seg(p1, q0, q1))
        .min(point_seg(q0, p0, p1))
        .min(point_seg(q1, p0, p1));
    // interior-interior candidate
    let u = p1 - p0;
    let v = q1 - q0;
    let w = p0 - q0;
    let (a, b, c, d, e) = (u.dot(u), u.dot(v), v.dot(v), u.dot(w), v.dot(w));
    let den = a * c - b * b;
    if den > 1e-14 * a * c {
        let s = (b * e - c * d) / den;
        let t = (a * e - b * d) / den;
        if (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t) {
            let x = (p0 + u * s) - (q0 + v * t);
            best = best.min(x.dot(x));
        }
    }
    best
}

pub struct OracleScene {
    pub fruit: (Vec3, f64),
    pub capsules: Vec<Capsule>,
    pub discs: Vec<(Vec3, Vec3, f64)>,
    pub arm: Vec<Capsule>,
}

impl OracleScene {
    pub fn scene(&self, wall: bool) -> Scene {
        let mut s = Scene::new();
        if wall {
            s.add_wall(0.5);
        }
        s.add_fruit(&FruitSpec::new(self.fruit.0, self.fruit.1));
        s.add_capsules(&self.capsules, Material::Stem);
        for &(center, normal, radius) in &self.discs {
            s.push(Shape::Disc { center, normal, radius }, Material::Leaf);
        }
        s.add_capsules(&self.arm, Material::Arm);
        s
    }

    pub fn from_plant(plant: &PlantState, fruit: (Vec3, f64), arm: Vec<Capsule>) -> Self {
        Self {
            fruit,
            capsules: plant.segment_capsules().collect(),
            discs: plant.leaf_poses().iter().map(|l| (l.center, l.normal, l.radius)).collect(),
            arm,
        }
    }

    /// Per-pixel raycast: footprint and plant-occluded counts.
    pub fn counts(&self, cam: &CameraSpec) -> (u32, u32) {
        let o = cam.origin();
        let (mut total, mut occluded) = (0, 0);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let d = cam.pixel_ray(u, v);
                let Some(tf) = sphere_hit(o, d, self.fruit.0, self.fruit.1, cam.near).filter(|&t| t <= cam.far)
                else {
                    continue;
                };
                total += 1;
                let (a, b) = (o + d * cam.near, o + d * tf);
                let by_capsule = self.capsules.iter().any(|c| seg_seg_dist2(a, b, c.a, c.b) < c.radius * c.radius);
                let by_disc = self.discs.iter().any(|&(center, n, r)| {
                    let den = d.dot(n);
                    if den.abs() < 1e-15 {
                        return false;
                    }
                    let t = (center - o).dot(n) / den;
                    let p = o + d * t;
                    t >= cam.near && t < tf && (p - center).dot(p - center) <= r * r
                });
                if by_capsule || by_disc {
                    occluded += 1;
                }
            }
        }
        (total, occluded)
    }
}

pub fn random_scene(seed: u64) -> OracleScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = PlantSpec {
        seed: rng.random(),
        base_pose: Pose::from_xyz_yaw(Vec3::new(0.0, 0.22, 0.0), rng.random_range(0.0..std::f64::consts::TAU)),
        ..PlantSpec::default()
    };
    let mut plant = build_plant(&spec).unwrap();
    let angles = plant
        .rest_angles
        .iter()
        .map(|r| [r[0] + rng.random_range(-0.4..0.4), r[1] + rng.random_range(-0.4..0.4)])
        .collect();
    plant.set_joint_angles(angles);
    let fruit = (
        Vec3::new(
            rng.random_range(-0.12..0.12),
            rng.random_range(0.3..0.46),
            rng.random_range(0.05..0.35),
        ),
        rng.random_range(0.02..0.05),
    );
    let arm_spec = ArmSpec {
        base_pose: Pose::from_translation(Vec3::new(0.0, 0.04, 0.0)),
        ..ArmSpec::default()
    };
    let q: [f64; JOINTS] = core::array::from_fn(|_| rng.random_range(-1.5..1.5));
    let arm = forward_kinematics(&arm_spec, &q).capsules(&arm_spec).to_vec();
    OracleScene::from_plant(&plant, fruit, arm)
}
