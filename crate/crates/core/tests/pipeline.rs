//! Cross-module checks against the synthetic renderer as ground truth.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viewsynth::geometry::{quantize, sample_bilinear, Camera, Intrinsics, Pose, RgbaImage};
use viewsynth::psv::{build_psv, DepthSampling, DepthScheme, PosedImage, Region};
use viewsynth::synthdata::{make_dataset, random_scene, render_view, transfer_pixel, Dataset, Layer, RigSpec, SceneEntry, SceneGenConfig, SceneSpec, Texture};

fn smooth_plane(depth: f64) -> SceneSpec {
    SceneSpec {
        layers: vec![Layer {
            depth,
            extent: [-50.0, 50.0, -50.0, 50.0],
            texel_density: 24.0 / depth,
            texture: Texture::ValueNoise { octaves: 2, seed: 17, cell: 24.0 },
        }],
        background: [0.0; 3],
    }
}

fn intrinsics() -> Intrinsics {
    Intrinsics::new(40.0, 40.0, 23.5, 23.5, 48, 48).unwrap()
}

/// Mean absolute RGB difference over the pixels `a` fully covers.
fn mean_abs_rgb(a: &RgbaImage, b: &RgbaImage) -> f64 {
    let (mut s, mut n) = (0.0, 0);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.pixel(x, y), b.pixel(x, y));
            if p[3] < 1.0 {
                continue;
            }
            for c in 0..3 {
                s += (p[c] - q[c]).abs() as f64;
                n += 1;
            }
        }
    }
    s / n as f64
}

#[test]
fn sweep_is_photoconsistent_only_at_the_true_depth() {
    let sampling = DepthSampling::new(2.0, 8.0, 9, DepthScheme::InverseDepthUniform).unwrap();
    let planes = sampling.depth_planes();
    let true_plane = 4;
    let scene = smooth_plane(planes[true_plane]);
    let cams = RigSpec::linear_track(intrinsics(), 4, 0.5, 0.0, 0).cameras().unwrap();
    let target = cams[1];
    let truth = render_view(&scene, &target).0;
    let sources: Vec<PosedImage> = [0, 2, 3].iter().map(|&i| PosedImage { image: render_view(&scene, &cams[i]).0, camera: cams[i] }).collect();
    let volumes = build_psv(&sources, &target, &sampling, Region::full(&target)).unwrap();
    for vol in &volumes {
        let errors: Vec<f64> = vol.planes.iter().map(|p| mean_abs_rgb(p, &truth)).collect();
        assert!(errors[true_plane] < 2.0 / 255.0, "{errors:?}");
        for (z, e) in errors.iter().enumerate() {
            if z != true_plane {
                assert!(*e > 2.0 * errors[true_plane], "plane {z}: {errors:?}");
            }
        }
    }
}

#[test]
fn transferred_pixels_lie_on_epipolar_lines() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scene = random_scene(&SceneGenConfig::default(), 4).unwrap();
    let k = intrinsics();
    for _ in 0..10 {
        let c = |rng: &mut ChaCha8Rng| Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..0.2));
        let a = Camera::new(k, Pose::from_center(Matrix3::identity(), c(&mut rng)).unwrap()).unwrap();
        let b = Camera::new(k, Pose::from_center(Matrix3::identity(), c(&mut rng)).unwrap()).unwrap();
        let depth = render_view(&scene, &a).1;
        // Fundamental matrix from A to B.
        let r = b.pose.rotation() * a.pose.rotation().transpose();
        let t = b.pose.translation() - r * a.pose.translation();
        let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
        let f = k.inverse_matrix().transpose() * tx * r * k.inverse_matrix();
        for _ in 0..50 {
            let (x, y) = (rng.gen_range(0..48), rng.gen_range(0..48));
            let Some(uv) = transfer_pixel(&a, depth.get(x, y), x, y, &b) else { continue };
            let line = f * Vector3::new(x as f64, y as f64, 1.0);
            let dist = (uv.x * line.x + uv.y * line.y + line.z).abs() / line.xy().norm();
            assert!(dist < 1e-6, "{dist}");
        }
    }
}

#[test]
fn stored_dataset_matches_a_fresh_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let k = Intrinsics::new(24.0, 24.0, 11.5, 11.5, 24, 24).unwrap();
    let entries: Vec<SceneEntry> = (0..2)
        .map(|s| SceneEntry { scene: random_scene(&SceneGenConfig::default(), s).unwrap(), rig: RigSpec::linear_track(k, 3, 0.3, 0.01, s) })
        .collect();
    let manifest = make_dataset(&entries, dir.path()).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    assert_eq!(data.manifest, manifest);
    assert_eq!(data.view_count(), 6);
    for (entry, scene) in entries.iter().zip(&data.scenes) {
        let cams = entry.rig.cameras().unwrap();
        for (cam, view) in cams.iter().zip(&scene.views) {
            assert_eq!(&view.camera, cam);
            let (img, depth) = render_view(&scene.spec, cam);
            let bytes: Vec<u8> = img.as_raw().chunks_exact(4).flat_map(|p| [quantize(p[0]), quantize(p[1]), quantize(p[2]), 255]).collect();
            let stored: Vec<u8> = view.image.as_raw().iter().map(|&v| quantize(v)).collect();
            assert_eq!(bytes, stored);
            assert_eq!(depth.to_bytes(), view.depth.to_bytes());
        }
    }
}

#[test]
fn ground_truth_depth_transfers_colors_between_views() {
    // Smooth textures make colors comparable after reprojection.
    let gen = SceneGenConfig { cell: 24.0, octaves: 1, ..SceneGenConfig::default() };
    let cams = RigSpec::linear_track(intrinsics(), 2, 0.3, 0.0, 0).cameras().unwrap();
    for seed in 0..3 {
        let scene = random_scene(&gen, seed).unwrap();
        let (ia, da) = render_view(&scene, &cams[0]);
        let (ib, db) = render_view(&scene, &cams[1]);
        let (mut checked, mut worst) = (0, 0.0f32);
        for y in 0..48 {
            for x in 0..48 {
                let d = da.get(x, y);
                let Some(uv) = transfer_pixel(&cams[0], d, x, y, &cams[1]) else { continue };
                let (u0, v0) = (uv.x.floor(), uv.y.floor());
                if u0 < 0.0 || v0 < 0.0 || u0 + 1.0 >= 48.0 || v0 + 1.0 >= 48.0 {
                    continue;
                }
                let p = cams[0].unproject(&Vector2::new(x as f64, y as f64), d as f64).unwrap();
                let z = cams[1].project(&p).unwrap().1;
                // Skip pixels near occlusion boundaries in B.
                let visible = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
                    .iter()
                    .all(|(du, dv)| ((db.get((u0 + du) as u32, (v0 + dv) as u32) as f64 - z) / z).abs() < 1e-3);
                if !visible {
                    continue;
                }
                let (pa, pb) = (ia.pixel(x, y), sample_bilinear(&ib, uv.x, uv.y));
                worst = (0..3).map(|c| (pa[c] - pb[c]).abs()).fold(worst, f32::max);
                checked += 1;
            }
        }
        assert!(checked > 1000, "only {checked} pixels checked");
        assert!(worst < 0.03, "seed {seed}: {worst}");
    }
}
