use leafpush_core::geom::{Mat3, Pose, Vec3};
use leafpush_core::plant::Capsule;
use leafpush_core::render::*;
use proptest::prelude::*;

#[path = "oracles/raycast.rs"]
mod raycast;
use raycast::*;

#[test]
fn rasterizer_matches_raycast_oracle_on_random_scenes() {
    let cam = toy_camera();
    let mut nontrivial = 0;
    for seed in 0..200 {
        let s = random_scene(seed);
        let stats = occlusion_stats(&s.scene(true), &cam).unwrap();
        let (total, occluded) = s.counts(&cam);
        assert_eq!(stats.fruit_pixels_total, total, "scene {seed}");
        assert_eq!(stats.occluded_pixels, occluded, "scene {seed}");
        assert_eq!(stats.visible_pixels, total - occluded);
        if occluded > 0 && occluded < total {
            nontrivial += 1;
        }
    }
    // the corpus has to exercise partial occlusion, not only the extremes
    assert!(nontrivial > 40, "{nontrivial}");
}

#[test]
fn wall_only_scene() {
    let cam = CameraSpec {
        pose: Pose::look_at(Vec3::new(0.0, -0.3, 0.2), Vec3::new(0.0, 1.0, 0.2), Vec3::Z),
        width: 24,
        height: 16,
        ..CameraSpec::default()
    };
    let mut scene = Scene::new();
    scene.add_wall(0.5);
    let frame = render(&scene, &cam, 1.0).unwrap();
    assert_eq!(frame.alpha_sum(), 0.0);
    for &d in &frame.depth {
        assert!((d - 0.8).abs() < 1e-6, "{d}");
    }
}

#[test]
fn centred_fruit_is_a_disc() {
    for (size, r) in [(32, 0.05), (64, 0.08), (48, 0.03)] {
        let cam = CameraSpec {
            pose: Pose::look_at(Vec3::new(0.0, -0.5, 0.0), Vec3::ZERO, Vec3::Z),
            width: size,
            height: size,
            ..CameraSpec::default()
        };
        let mut scene = Scene::new();
        scene.add_fruit(&FruitSpec::new(Vec3::ZERO, r));
        let frame = render(&scene, &cam, 1.0).unwrap();
        // image-plane radius of the silhouette cone, in pixels
        let big_r = cam.focal() * (r / 0.5f64).asin().tan();
        let c = 0.5 * size as f64;
        let mut analytic = 0usize;
        let mut rows = 0usize;
        for v in 0..size {
            let y = v as f64 + 0.5 - c;
            let mut any = false;
            for u in 0..size {
                let x = u as f64 + 0.5 - c;
                if x * x + y * y < big_r * big_r {
                    analytic += 1;
                    any = true;
                }
            }
            rows += any as usize;
        }
        let got = frame.alpha_sum() as usize;
        assert!(got.abs_diff(analytic) <= rows, "{got} vs {analytic}");
        assert!(got > 20);
    }
}

#[test]
fn stem_in_front_of_fruit_clears_mask_on_covered_pixels() {
    let cam = CameraSpec {
        pose: Pose::look_at(Vec3::new(0.0, -0.5, 0.0), Vec3::ZERO, Vec3::Z),
        width: 32,
        height: 32,
        ..CameraSpec::default()
    };
    let stem = Capsule {
        a: Vec3::new(0.0, -0.1, -0.2),
        b: Vec3::new(0.0, -0.1, 0.2),
        radius: 0.01,
    };
    let mut scene = Scene::new();
    scene.add_fruit(&FruitSpec::new(Vec3::ZERO, 0.06));
    scene.add_capsules(&[stem], Material::Stem);
    let layers = rasterize(&scene, &cam).unwrap();
    let frame = frame_from_layers(&scene, &layers, 1.0);
    let occ = layers.occlusion();
    assert!(occ.occluded_pixels > 0 && occ.visible_pixels > 0);
    for i in 0..frame.pixel_count() {
        let on_fruit = layers.fruit[i].is_finite();
        let covered = layers.plant[i] < layers.fruit[i];
        let expected = if on_fruit && !covered { 1.0 } else { 0.0 };
        assert_eq!(frame.alpha[i], expected);
    }
    assert_eq!(frame.alpha_sum() as u32, occ.visible_pixels);
}

#[test]
fn leaf_larger_than_footprint_occludes_everything() {
    let cam = toy_camera();
    let fruit = FruitSpec::new(Vec3::new(0.0, 0.42, 0.17), 0.03);
    let mut scene = Scene::new();
    scene.add_fruit(&fruit);
    let free = occlusion_stats(&scene, &cam).unwrap();
    assert!(free.fruit_pixels_total > 0);
    assert_eq!(free.occluded_pixels, 0);
    assert_eq!(free.visible_pixels, free.fruit_pixels_total);
    let towards_cam = (cam.origin() - fruit.center).normalized();
    scene.push(
        Shape::Disc {
            center: fruit.center + towards_cam * 0.08,
            normal: towards_cam,
            radius: 0.06,
        },
        Material::Leaf,
    );
    let hidden = occlusion_stats(&scene, &cam).unwrap();
    assert_eq!(hidden.fruit_pixels_total, free.fruit_pixels_total);
    assert_eq!(hidden.occluded_pixels, hidden.fruit_pixels_total);
    assert_eq!(render(&scene, &cam, 1.0).unwrap().alpha_sum(), 0.0);
}

#[test]
fn fruit_outside_frustum_is_out_of_view() {
    let cam = toy_camera();
    let mut scene = Scene::new();
    scene.add_fruit(&FruitSpec::new(Vec3::new(3.0, 0.4, 0.2), 0.03));
    let occ = occlusion_stats(&scene, &cam).unwrap();
    assert!(occ.out_of_view());
    assert_eq!(occ.occluded_fraction(), None);
}

#[test]
fn degenerate_camera_is_rejected() {
    let cam = CameraSpec {
        fov: 0.0,
        ..toy_camera()
    };
    assert!(matches!(render(&Scene::new(), &cam, 1.0), Err(RenderError::InvalidCamera(_))));
}

#[test]
fn mask_pixels_sit_on_the_fruit_surface() {
    let cam = toy_camera();
    for seed in 0..30 {
        let s = random_scene(1000 + seed);
        let frame = render(&s.scene(true), &cam, 1.0).unwrap();
        for v in 0..cam.height {
            for u in 0..cam.width {
                let i = v * cam.width + u;
                if frame.alpha[i] == 1.0 {
                    let t = sphere_hit(cam.origin(), cam.pixel_ray(u, v), s.fruit.0, s.fruit.1, cam.near)
                        .expect("alpha pixel must hit the fruit");
                    let quantum = f32::EPSILON * t as f32;
                    assert!((frame.depth[i] - t as f32).abs() <= quantum, "{} vs {t}", frame.depth[i]);
                }
            }
        }
    }
}

#[test]
fn depth_noise_statistics() {
    let cam = CameraSpec {
        pose: Pose::look_at(Vec3::new(0.0, -0.5, 0.2), Vec3::new(0.0, 0.5, 0.2), Vec3::Z),
        width: 128,
        height: 128,
        ..CameraSpec::default()
    };
    let mut scene = Scene::new();
    scene.add_wall(0.5);
    let frame = render(&scene, &cam, 1.0).unwrap();
    assert_eq!(add_depth_noise(&frame, 0.0, 3, cam.near, cam.far), frame);
    let noisy = add_depth_noise(&frame, 0.01, 3, cam.near, cam.far);
    assert_eq!(noisy, add_depth_noise(&frame, 0.01, 3, cam.near, cam.far));
    assert_eq!(noisy.rgb, frame.rgb);
    assert_eq!(noisy.alpha, frame.alpha);
    let diffs: Vec<f64> = noisy.depth.iter().zip(&frame.depth).map(|(a, b)| (*a - *b) as f64).collect();
    assert!(diffs.len() >= 10_000);
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
    assert!((std - 0.01).abs() < 0.001, "{std}");
    assert_ne!(noisy, add_depth_noise(&frame, 0.01, 4, cam.near, cam.far));
}

#[test]
fn lighting_scales_colour() {
    let cam = toy_camera();
    let mut scene = Scene::new();
    scene.add_wall(0.5);
    scene.add_fruit(&FruitSpec::new(Vec3::new(0.0, 0.42, 0.17), 0.04));
    let a = render(&scene, &cam, 0.5).unwrap();
    let b = render(&scene, &cam, 1.0).unwrap();
    for (x, y) in a.rgb.iter().zip(&b.rgb) {
        assert!((2.0 * x - y).abs() < 1e-6);
    }
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.alpha, b.alpha);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn extra_occluder_never_reduces_occlusion(
        seed in 0u64..100_000,
        c in prop::array::uniform3(-0.15f64..0.45),
        n in prop::array::uniform3(-1.0f64..1.0),
        r in 0.01f64..0.08,
    ) {
        let cam = toy_camera();
        let s = random_scene(seed);
        let mut scene = s.scene(true);
        let before = occlusion_stats(&scene, &cam).unwrap();
        let normal = Vec3::new(n[0], n[1], n[2] + 1e-3).normalized();
        scene.push(Shape::Disc { center: Vec3::new(c[0], c[1], c[2]), normal, radius: r }, Material::Leaf);
        let after = occlusion_stats(&scene, &cam).unwrap();
        prop_assert_eq!(after.fruit_pixels_total, before.fruit_pixels_total);
        prop_assert!(after.occluded_pixels >= before.occluded_pixels);
    }

    #[test]
    fn rotating_the_scene_with_the_camera_preserves_counts(seed in 0u64..100_000, yaw in -3.0f64..3.0) {
        let cam = toy_camera();
        let s = random_scene(seed);
        let rot = Mat3::rot_z(yaw);
        let moved = OracleScene {
            fruit: (rot * s.fruit.0, s.fruit.1),
            capsules: s.capsules.iter().map(|c| Capsule { a: rot * c.a, b: rot * c.b, radius: c.radius }).collect(),
            discs: s.discs.iter().map(|&(c, n, r)| (rot * c, rot * n, r)).collect(),
            arm: vec![],
        };
        let cam2 = CameraSpec { pose: Pose::new(rot * cam.pose.rot, rot * cam.pose.trans), ..cam.clone() };
        let a = occlusion_stats(&s.scene(false), &cam).unwrap();
        let b = occlusion_stats(&moved.scene(false), &cam2).unwrap();
        // rounding can move a silhouette pixel, never more than a handful
        prop_assert!(a.fruit_pixels_total.abs_diff(b.fruit_pixels_total) <= 2);
        prop_assert!(a.occluded_pixels.abs_diff(b.occluded_pixels) <= 4);
    }
}
