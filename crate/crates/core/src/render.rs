//! Depth-buffered software rasterizer for RGBA-D observations.
//!
//! Every primitive is rasterized over the screen rectangle covered by its
//! projected bounding volume; coverage and depth inside that rectangle come
//! from an exact ray test through each pixel centre. Depth is planar
//! (distance along the camera's optical axis).

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{Pose, Vec3};
use crate::plant::{Capsule, PlantState};

/// Depth value written for pixels that hit nothing.
pub const BACKGROUND_DEPTH: f32 = 0.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSpec {
    /// Camera-to-world pose; the camera looks along its local +z axis.
    pub pose: Pose,
    /// Vertical field of view (radians).
    pub fov: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            pose: Pose::look_at(
                Vec3::new(0.0, -0.18, 0.3),
                Vec3::new(0.0, 0.42, 0.17),
                Vec3::Z,
            ),
            fov: 45f64.to_radians(),
            width: 64,
            height: 64,
            near: 0.05,
            far: 2.0,
        }
    }
}

impl CameraSpec {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fov.is_finite() && self.fov > 0.0 && self.fov < core::f64::consts::PI) {
            return Err(RenderError::InvalidCamera("fov must lie in (0, pi)"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(RenderError::InvalidCamera("width and height must be at least 8"));
        }
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(RenderError::InvalidCamera("require 0 < near < far"));
        }
        if !self.pose.trans.is_finite() {
            return Err(RenderError::InvalidCamera("pose must be finite"));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / libm::tan(0.5 * self.fov)
    }

    /// Unnormalised world-space ray direction through the centre of pixel
    /// `(u, v)`; its component along the optical axis is 1, so the ray
    /// parameter equals planar depth.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Vec3 {
        let f = self.focal();
        let x = (u as f64 + 0.5 - 0.5 * self.width as f64) / f;
        let y = (v as f64 + 0.5 - 0.5 * self.height as f64) / f;
        self.pose.rot * Vec3::new(x, y, 1.0)
    }

    pub fn origin(&self) -> Vec3 {
        self.pose.trans
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Material {
    Fruit,
    Stem,
    Leaf,
    Arm,
    Wall,
}

impl Material {
    pub fn is_plant(self) -> bool {
        matches!(self, Material::Stem | Material::Leaf)
    }

    pub fn base_color(self) -> [f32; 3] {
        match self {
            Material::Fruit => [0.85, 0.12, 0.1],
            Material::Stem => [0.35, 0.45, 0.18],
            Material::Leaf => [0.2, 0.62, 0.22],
            Material::Arm => [0.55, 0.55, 0.6],
            Material::Wall => [0.95, 0.95, 0.95],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Capsule(Capsule),
    Disc { center: Vec3, normal: Vec3, radius: f64 },
    Plane { point: Vec3, normal: Vec3 },
}

impl Shape {
    /// Ray parameter of the first hit with `t >= t_min`, if any.
    /// `dir` need not be normalised.
    pub fn intersect(&self, origin: Vec3, dir: Vec3, t_min: f64) -> Option<f64> {
        match *self {
            Shape::Sphere { center, radius } => ray_sphere(origin, dir, center, radius, t_min),
            Shape::Capsule(c) => ray_capsule(origin, dir, &c, t_min),
            Shape::Disc {
                center,
                normal,
                radius,
            } => {
                let t = ray_plane(origin, dir, center, normal)?;
                if t < t_min {
                    return None;
                }
                let p = origin + dir * t;
                ((p - center).norm_sq() <= radius * radius).then_some(t)
            }
            Shape::Plane { point, normal } => {
                ray_plane(origin, dir, point, normal).filter(|&t| t >= t_min)
            }
        }
    }

    /// World-space bounding sphere; `None` for unbounded shapes.
    fn bounds(&self) -> Option<(Vec3, f64)> {
        match *self {
            Shape::Sphere { center, radius } => Some((center, radius)),
            Shape::Capsule(c) => Some(((c.a + c.b) * 0.5, 0.5 * (c.b - c.a).norm() + c.radius)),
            Shape::Disc { center, radius, .. } => Some((center, radius)),
            Shape::Plane { .. } => None,
        }
    }
}

fn ray_plane(origin: Vec3, dir: Vec3, point: Vec3, normal: Vec3) -> Option<f64> {
    let denom = dir.dot(normal);
    if denom.abs() < 1e-15 {
        return None;
    }
    Some((point - origin).dot(normal) / denom)
}

fn ray_sphere(origin: Vec3, dir: Vec3, center: Vec3, radius: f64, t_min: f64) -> Option<f64> {
    let oc = origin - center;
    let a = dir.norm_sq();
    let b = oc.dot(dir);
    let c = oc.norm_sq() - radius * radius;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = libm::sqrt(disc);
    let t0 = (-b - sq) / a;
    if t0 >= t_min {
        return Some(t0);
    }
    let t1 = (-b + sq) / a;
    (t1 >= t_min).then_some(t1)
}

fn ray_capsule(origin: Vec3, dir: Vec3, cap: &Capsule, t_min: f64) -> Option<f64> {
    let ba = cap.b - cap.a;
    let oa = origin - cap.a;
    let baba = ba.dot(ba);
    let bard = ba.dot(dir);
    let baoa = ba.dot(oa);
    let rdoa = dir.dot(oa);
    let oaoa = oa.dot(oa);
    let rr = cap.radius * cap.radius;
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t >= t_min && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    // Cylinder body.
    let a = baba * dir.dot(dir) - bard * bard;
    if a > 1e-18 {
        let b = baba * rdoa - baoa * bard;
        let c = baba * oaoa - baoa * baoa - rr * baba;
        let h = b * b - a * c;
        if h >= 0.0 {
            let sq = libm::sqrt(h);
            for t in [(-b - sq) / a, (-b + sq) / a] {
                let y = baoa + t * bard;
                if y > 0.0 && y < baba {
                    consider(t);
                }
            }
        }
    }
    // End caps.
    for end in [cap.a, cap.b] {
        if let Some(t) = ray_sphere(origin, dir, end, cap.radius, t_min) {
            consider(t);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FruitSpec {
    pub center: Vec3,
    pub radius: f64,
    pub color: [f32; 3],
}

impl FruitSpec {
    pub fn new(center: Vec3, radius: f64) -> Self {
        Self {
            center,
            radius,
            color: Material::Fruit.base_color(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub fruit_color: Option<[f32; 3]>,
}

impl Scene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, shape: Shape, material: Material) {
        self.primitives.push(Primitive { shape, material });
    }

    pub fn add_fruit(&mut self, fruit: &FruitSpec) {
        self.fruit_color = Some(fruit.color);
        self.push(
            Shape::Sphere {
                center: fruit.center,
                radius: fruit.radius,
            },
            Material::Fruit,
        );
    }

    /// Vertical wall facing -y at `y`.
    pub fn add_wall(&mut self, y: f64) {
        self.push(
            Shape::Plane {
                point: Vec3::new(0.0, y, 0.0),
                normal: Vec3::Y,
            },
            Material::Wall,
        );
    }

    pub fn add_plant(&mut self, plant: &PlantState) {
        for cap in plant.segment_capsules() {
            self.push(Shape::Capsule(cap), Material::Stem);
        }
        for leaf in plant.leaf_poses() {
            self.push(
                Shape::Disc {
                    center: leaf.center,
                    normal: leaf.normal,
                    radius: leaf.radius,
                },
                Material::Leaf,
            );
        }
    }

    pub fn add_capsules(&mut self, caps: &[Capsule], material: Material) {
        for c in caps {
            self.push(Shape::Capsule(*c), material);
        }
    }

    pub fn has_fruit(&self) -> bool {
        self.primitives.iter().any(|p| p.material == Material::Fruit)
    }

    fn color_of(&self, m: Material) -> [f32; 3] {
        match (m, self.fruit_color) {
            (Material::Fruit, Some(c)) => c,
            _ => m.base_color(),
        }
    }
}

/// RGB, binary fruit mask and planar depth, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// 1.0 where the fruit is the nearest surface, else 0.0.
    pub alpha: Vec<f32>,
    /// Planar depth in metres, or [`BACKGROUND_DEPTH`] where nothing was hit.
    pub depth: Vec<f32>,
}

impl Frame {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha.iter().map(|&a| a as f64).sum()
    }

    /// Channel-major RGBA-D planes (5 × H × W) as f64 for the policy.
    pub fn to_planes(&self, out: &mut Vec<f64>) {
        let n = self.pixel_count();
        out.reserve(5 * n);
        for c in 0..3 {
            out.extend((0..n).map(|i| self.rgb[3 * i + c] as f64));
        }
        out.extend(self.alpha.iter().map(|&a| a as f64));
        out.extend(self.depth.iter().map(|&d| d as f64));
    }
}

/// Fruit footprint statistics. `total` counts fruit pixels with the plant
/// hidden; `occluded` counts those where a plant surface lies in front.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OcclusionStats {
    pub fruit_pixels_total: u32,
    pub occluded_pixels: u32,
    pub visible_pixels: u32,
}

impl OcclusionStats {
    pub fn out_of_view(&self) -> bool {
        self.fruit_pixels_total == 0
    }

    /// Occluded fraction, or `None` when the fruit is out of view.
    pub fn occluded_fraction(&self) -> Option<f64> {
        (self.fruit_pixels_total > 0)
            .then(|| self.occluded_pixels as f64 / self.fruit_pixels_total as f64)
    }
}

/// Per-pixel nearest hits for the full scene and for the fruit and plant alone.
#[derive(Debug, Clone)]
pub struct DepthLayers {
    pub width: usize,
    pub height: usize,
    pub nearest: Vec<f64>,
    pub nearest_id: Vec<u32>,
    pub fruit: Vec<f64>,
    pub plant: Vec<f64>,
}

const NO_HIT: u32 = u32::MAX;

impl DepthLayers {
    pub fn occlusion(&self) -> OcclusionStats {
        let mut total = 0u32;
        let mut occluded = 0u32;
        for (f, p) in self.fruit.iter().zip(&self.plant) {
            if f.is_finite() {
                total += 1;
                if p < f {
                    occluded += 1;
                }
            }
        }
        OcclusionStats {
            fruit_pixels_total: total,
            occluded_pixels: occluded,
            visible_pixels: total - occluded,
        }
    }
}

/// Screen rectangle (inclusive) that contains every pixel whose centre ray
/// can hit the bounding sphere.
fn screen_rect(cam: &CameraSpec, inv: &Pose, center: Vec3, radius: f64) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (cam.width, cam.height);
    let full = Some((0, w - 1, 0, h - 1));
    let c = inv.transform_point(center);
    if c.z + radius < cam.near || c.z - radius > cam.far {
        return None;
    }
    if c.z - radius <= cam.near.min(1e-6) || c.z - radius <= 0.0 {
        return full;
    }
    let f = cam.focal();
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for corner in 0..8 {
        let x = c.x + if corner & 1 == 0 { -radius } else { radius };
        let y = c.y + if corner & 2 == 0 { -radius } else { radius };
        let z = c.z + if corner & 4 == 0 { -radius } else { radius };
        let u = f * x / z + 0.5 * w as f64 - 0.5;
        let v = f * y / z + 0.5 * h as f64 - 0.5;
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let lo = |x: f64| libm::floor(x) - 1.0;
    let hi = |x: f64| libm::ceil(x) + 1.0;
    let (u0, u1, v0, v1) = (lo(umin), hi(umax), lo(vmin), hi(vmax));
    if u1 < 0.0 || v1 < 0.0 || u0 > (w - 1) as f64 || v0 > (h - 1) as f64 {
        return None;
    }
    let clamp = |x: f64, n: usize| x.clamp(0.0, (n - 1) as f64) as usize;
    Some((clamp(u0, w), clamp(u1, w), clamp(v0, h), clamp(v1, h)))
}

pub fn rasterize(scene: &Scene, cam: &CameraSpec) -> Result<DepthLayers, RenderError> {
    cam.validate()?;
    let (w, h) = (cam.width, cam.height);
    let n = w * h;
    let mut layers = DepthLayers {
        width: w,
        height: h,
        nearest: vec![f64::INFINITY; n],
        nearest_id: vec![NO_HIT; n],
        fruit: vec![f64::INFINITY; n],
        plant: vec![f64::INFINITY; n],
    };
    let origin = cam.origin();
    let inv = cam.pose.inverse();
    let rays: Vec<Vec3> = (0..n).map(|i| cam.pixel_ray(i % w, i / w)).collect();
    for (id, prim) in scene.primitives.iter().enumerate() {
        let rect = match prim.shape.bounds() {
            Some((c, r)) => screen_rect(cam, &inv, c, r),
            None => Some((0, w - 1, 0, h - 1)),
        };
        let Some((u0, u1, v0, v1)) = rect else { continue };
        for v in v0..=v1 {
            for u in u0..=u1 {
                let i = v * w + u;
                let Some(t) = prim.shape.intersect(origin, rays[i], cam.near) else { continue };
                if t > cam.far {
                    continue;
                }
                if t < layers.nearest[i] {
                    layers.nearest[i] = t;
                    layers.nearest_id[i] = id as u32;
                }
                match prim.material {
                    Material::Fruit if t < layers.fruit[i] => layers.fruit[i] = t,
                    m if m.is_plant() && t < layers.plant[i] => layers.plant[i] = t,
                    _ => {}
                }
            }
        }
    }
    Ok(layers)
}

/// Flat-shaded RGBA-D frame; `lighting` scales every surface colour.
pub fn render(scene: &Scene, cam: &CameraSpec, lighting: f64) -> Result<Frame, RenderError> {
    let layers = rasterize(scene, cam)?;
    Ok(frame_from_layers(scene, &layers, lighting))
}

pub fn frame_from_layers(scene: &Scene, layers: &DepthLayers, lighting: f64) -> Frame {
    let n = layers.width * layers.height;
    let mut rgb = vec![0.0f32; 3 * n];
    let mut alpha = vec![0.0f32; n];
    let mut depth = vec![BACKGROUND_DEPTH; n];
    let gain = lighting as f32;
    for i in 0..n {
        let id = layers.nearest_id[i];
        if id == NO_HIT {
            continue;
        }
        let mat = scene.primitives[id as usize].material;
        let col = scene.color_of(mat);
        for c in 0..3 {
            rgb[3 * i + c] = (col[c] * gain).clamp(0.0, 1.0);
        }
        if mat == Material::Fruit {
            alpha[i] = 1.0;
        }
        depth[i] = layers.nearest[i] as f32;
    }
    Frame {
        width: layers.width,
        height: layers.height,
        rgb,
        alpha,
        depth,
    }
}

/// Fruit footprint and plant occlusion counts for `scene`.
pub fn occlusion_stats(scene: &Scene, cam: &CameraSpec) -> Result<OcclusionStats, RenderError> {
    Ok(rasterize(scene, cam)?.occlusion())
}

/// I.i.d. Gaussian noise on every valid depth pixel, clamped to `[near, far]`.
pub fn add_depth_noise(frame: &Frame, sigma: f64, seed: u64, near: f64, far: f64) -> Frame {
    let mut out = frame.clone();
    if sigma <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let (lo, hi) = (near as f32, far as f32);
    for d in out.depth.iter_mut() {
        if *d != BACKGROUND_DEPTH {
            let noise: f64 = normal.sample(&mut rng);
            *d = (*d + noise as f32).clamp(lo, hi);
        }
    }
    out
}
