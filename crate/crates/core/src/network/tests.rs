use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{Intrinsics, Pose};
use crate::psv::DepthScheme;

fn tiny_config() -> ModelConfig {
    gradcheck_config()
}

fn tiny_input(rng: &mut impl Rng) -> NetworkInput<f64> {
    gradcheck_input(rng)
}

fn random_params<T: Element>(config: &ModelConfig, seed: u64, scale: f64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::<T>::zeros(config).unwrap();
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v = T::of_f64(rng.gen_range(-scale..scale));
        }
    }
    p
}

#[test]
fn presets_meet_the_patch_contract() {
    for cfg in [ModelConfig::standard(5, 16), ModelConfig::compact(5, 16), ModelConfig::desk(5, 16), ModelConfig::default()] {
        cfg.check_patch_contract().unwrap();
        assert_eq!(cfg.receptive_shrink(), 18);
    }
    assert_eq!(ModelConfig::standard(5, 16).feature_channels(), 48);
    assert!(tiny_config().check_patch_contract().is_err());
    tiny_config().validate().unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let base = ModelConfig::compact(5, 16);
    let mut bad = vec![];
    let mut c = base.clone();
    c.sources = 0;
    bad.push(c);
    let mut c = base.clone();
    c.depth_planes = 1;
    bad.push(c);
    let mut c = base.clone();
    c.cross_depth = vec![16];
    bad.push(c);
    let mut c = base.clone();
    c.cross_depth = vec![32, 8];
    bad.push(c);
    let mut c = base.clone();
    c.pathways[0].factor = 2;
    bad.push(c);
    let mut c = base.clone();
    c.pathways[1].factor = 1;
    bad.push(c);
    let mut c = base.clone();
    c.merged[0].kernel = 4;
    bad.push(c);
    let mut c = base.clone();
    c.pathways.clear();
    bad.push(c);
    for c in bad {
        assert!(matches!(c.validate(), Err(NetworkError::InvalidConfig(_))), "{c:?}");
    }
}

#[test]
fn parameters_cover_both_towers() {
    let cfg = ModelConfig::standard(5, 16);
    let p = ModelParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let w = p.get("select/path0/conv0/weight").unwrap();
    assert_eq!(w.shape(), &[32, 20, 3, 3]);
    assert_eq!(p.get("color/merge/conv0/weight").unwrap().shape(), &[48, 4 * 48, 3, 3]);
    assert_eq!(p.get("select/depth0/weight").unwrap().shape(), &[96, 16 * 48, 1, 1]);
    assert_eq!(p.get("select/depth1/weight").unwrap().shape(), &[16, 96, 1, 1]);
    assert_eq!(p.get("color/out/weight").unwrap().shape(), &[3, 48, 1, 1]);
    assert!(p.get("select/depth1/weight").unwrap().data().iter().all(|&v| v == 0.0));
    let limit = (6.0f64 / ((20 + 32) * 9) as f64).sqrt() as f32;
    assert!(w.data().iter().all(|v| v.abs() <= limit));
    assert!(w.data().iter().any(|v| v.abs() > limit / 2.0));
    assert!(p.names().all(|n| n.starts_with("select/") || n.starts_with("color/")));
    // Both towers have the same shared-stage shapes but independent values.
    let (a, b) = (p.get("select/path1/conv2/weight").unwrap(), p.get("color/path1/conv2/weight").unwrap());
    assert_eq!(a.shape(), b.shape());
    assert_ne!(a, b);

    let again = ModelParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(p, again);
    assert!(ModelParams::from_tensors(&cfg, p.as_map().clone()).is_ok());
    let mut missing = p.as_map().clone();
    missing.remove("color/out/bias");
    assert!(ModelParams::from_tensors(&cfg, missing).is_err());
}

#[test]
fn selection_is_a_distribution_over_depth() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..5 {
        let input = tiny_input(&mut rng);
        let params = random_params::<f64>(&cfg, seed, 1.0);
        let sel = selection_tower(&input, &params, &cfg).unwrap();
        assert_eq!(sel.0.shape(), &[3, 2, 2]);
        for p in 0..4 {
            let s: f64 = (0..3).map(|z| sel.0.data()[z * 4 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((0..3).all(|z| sel.0.data()[z * 4 + p] >= 0.0));
        }
    }
}

#[test]
fn zero_parameters_give_uniform_selection_and_black_image() {
    let cfg = tiny_config();
    let input = tiny_input(&mut ChaCha8Rng::seed_from_u64(1));
    let params = ModelParams::<f64>::zeros(&cfg).unwrap();
    let pred = forward(&input, &params, &cfg).unwrap();
    assert!(pred.selection.0.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    assert!(pred.colors.0.data().iter().all(|&v| v == 0.0));
    assert!(pred.image.data().iter().all(|&v| v == 0.0));
    assert_eq!(pred.image.shape(), &[3, 2, 2]);
}

#[test]
fn combine_examples() {
    // D=2, 1x1 pixel: weights (0.25, 0.75), colors red and blue.
    let sel = SelectionMap(Tensor::new(vec![2, 1, 1], vec![0.25f64, 0.75]).unwrap());
    let col = ColorVolume(Tensor::new(vec![2, 3, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
    assert_eq!(combine(&sel, &col).unwrap().data(), &[0.25, 0.0, 0.75]);

    // One-hot selection returns that plane's colors exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let col = ColorVolume(Tensor::from_fn(&[4, 3, 2, 3], |_| rng.gen_range(-1.0f64..2.0)));
    for z in 0..4 {
        let sel = SelectionMap(Tensor::from_fn(&[4, 2, 3], |i| if i / 6 == z { 1.0 } else { 0.0 }));
        let out = combine(&sel, &col).unwrap();
        assert_eq!(out.data(), col.0.slice_axis(0, z, 1).unwrap().data());
    }

    let bad = SelectionMap(Tensor::<f64>::zeros(&[3, 2, 3]));
    assert!(combine(&bad, &col).is_err());
}

#[test]
fn output_is_a_convex_combination_of_plane_colors() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..4 {
        let input = tiny_input(&mut rng);
        let pred = forward(&input, &random_params::<f64>(&cfg, 100 + seed, 0.8), &cfg).unwrap();
        let c = pred.colors.0.data();
        for ch in 0..3 {
            for p in 0..4 {
                let vals: Vec<f64> = (0..3).map(|z| c[(z * 3 + ch) * 4 + p]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = pred.image.data()[ch * 4 + p];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn color_tower_is_per_plane() {
    // Permuting the planes of the input permutes the color volume the same way.
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = tiny_input(&mut rng);
    let params = random_params::<f64>(&cfg, 7, 0.7);
    let perm = [2usize, 0, 1];
    let permute = |t: &Tensor<f64>| {
        let parts: Vec<Tensor<f64>> = perm.iter().map(|&z| t.slice_axis(0, z, 1).unwrap()).collect();
        let shape = t.shape().to_vec();
        Tensor::new(shape, parts.iter().flat_map(|p| p.data().to_vec()).collect()).unwrap()
    };
    let mut permuted = input.clone();
    for p in &mut permuted.pathways {
        p.data = permute(&p.data);
    }
    let a = color_tower(&input, &params, &cfg).unwrap();
    let b = color_tower(&permuted, &params, &cfg).unwrap();
    assert!(permute(&a.0).max_abs_diff(&b.0) < 1e-12);
}

#[test]
fn passthrough_weights_reproduce_the_nearest_source_at_the_true_plane() {
    // A single full-resolution 1x1 layer that copies source 0's RGB, a color
    // layer that reads it back, and selection logits that pick plane 1.
    let cfg = ModelConfig {
        sources: 2,
        depth_planes: 3,
        pathways: vec![PathwayConfig { factor: 1, layers: vec![ConvLayer::new(1, 3)] }],
        merged: vec![],
        cross_depth: vec![2, 3],
        source_order: SourceOrder::NearestFirst,
    };
    let mut p = ModelParams::<f64>::zeros(&cfg).unwrap();
    let w = p.get_mut("color/path0/conv0/weight").unwrap();
    for c in 0..3 {
        w.data_mut()[c * 8 + c] = 1.0;
    }
    let w = p.get_mut("color/out/weight").unwrap();
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    p.get_mut("select/depth1/bias").unwrap().data_mut()[1] = 50.0;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = Tensor::from_fn(&[3, 8, 4, 4], |_| rng.gen_range(0.0..1.0));
    let input = NetworkInput {
        pathways: vec![PathwayInput { factor: 1, data: data.clone(), crop_top: 0, crop_left: 0 }],
        out_height: 4,
        out_width: 4,
    };
    let pred = forward(&input, &p, &cfg).unwrap();
    let expected = data.slice_axis(0, 1, 1).unwrap().slice_axis(1, 0, 3).unwrap();
    assert!(pred.image.max_abs_diff(&expected.reshaped(&[3, 4, 4]).unwrap()) < 1e-9);
    assert!(pred.selection.argmax().iter().all(|&z| z == 1));
}

#[test]
fn forward_rejects_mismatched_inputs() {
    let cfg = tiny_config();
    let params = ModelParams::<f64>::zeros(&cfg).unwrap();
    let mut input = tiny_input(&mut ChaCha8Rng::seed_from_u64(0));
    input.out_height = 3;
    assert!(forward(&input, &params, &cfg).is_err());
    let mut input = tiny_input(&mut ChaCha8Rng::seed_from_u64(0));
    input.pathways.pop();
    assert!(forward(&input, &params, &cfg).is_err());
    let mut input = tiny_input(&mut ChaCha8Rng::seed_from_u64(0));
    input.pathways[0].data = Tensor::zeros(&[3, 4, 6, 6]);
    assert!(forward(&input, &params, &cfg).is_err());
}

#[test]
fn downsample_weights_color_by_alpha() {
    let img = RgbaImage::from_raw(
        2,
        2,
        vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.0],
    )
    .unwrap();
    let d = downsample_area(&img, 2);
    assert_eq!((d.width(), d.height()), (1, 1));
    assert_eq!(d.pixel(0, 0), [0.5, 0.0, 0.5, 0.5]);
    assert_eq!(downsample_area(&RgbaImage::transparent(4, 4), 2).pixel(1, 1), [0.0; 4]);
}

#[test]
fn pathway_windows_are_grid_anchored() {
    let pc = PathwayConfig { factor: 4, layers: vec![ConvLayer::new(1, 6), ConvLayer::new(3, 6)] };
    // merged shrink 10 -> margin 5; 8x8 output at (0, 0) needs [-5, 13).
    let (win, top, left) = pathway_window(Region::new(0, 0, 8, 8), 10, &pc);
    // Cells -2..=3, plus one cell of context on each side.
    assert_eq!(win, Region::new(-12, -12, 32, 32));
    assert_eq!((top, left), (3, 3));
    let (win, top, left) = pathway_window(Region::new(3, 8, 8, 8), 10, &pc);
    assert_eq!(win.x0 % 4, 0);
    assert_eq!(win.y0 % 4, 0);
    assert_eq!((top, left), (3, 2));
    let full = PathwayConfig { factor: 1, layers: vec![ConvLayer::new(5, 6)] };
    assert_eq!(pathway_window(Region::new(2, 1, 8, 8), 10, &full), (Region::new(-5, -6, 22, 22), 0, 0));
}

fn test_scene(rng: &mut ChaCha8Rng) -> (Vec<PosedImage>, Camera) {
    let k = Intrinsics::new(20.0, 20.0, 11.5, 11.5, 24, 24).unwrap();
    let target = Camera::new(k, Pose::identity()).unwrap();
    let sources = [-0.3, 0.25]
        .iter()
        .map(|&x| {
            let image = RgbaImage::from_fn(24, 24, |_, _| [rng.gen(), rng.gen(), rng.gen(), 1.0]).unwrap();
            let pose = Pose::from_center(Matrix3::identity(), Vector3::new(x, 0.05, 0.0)).unwrap();
            PosedImage { image, camera: Camera::new(k, pose).unwrap() }
        })
        .collect();
    (sources, target)
}

#[test]
fn tiled_rendering_matches_whole_image() {
    let mut cfg = ModelConfig::compact(2, 4);
    cfg.cross_depth = vec![8, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (sources, target) = test_scene(&mut rng);
    let sampling = DepthSampling::new(2.0, 10.0, 4, DepthScheme::InverseDepthUniform).unwrap();
    let sweep = SweepInputs { sources: &sources, target: &target, sampling: &sampling };
    let params = random_params::<f32>(&cfg, 4, 0.3);

    let whole = multires_preprocess::<f32>(Region::new(0, 0, 24, 24), &sweep, &cfg).unwrap();
    let whole = forward(&whole, &params, &cfg).unwrap().image;
    assert!(whole.data().iter().any(|&v| v.abs() > 1e-3));
    for (x0, y0, w, h) in [(0, 0, 7, 24), (7, 0, 17, 11), (7, 11, 17, 13), (5, 3, 8, 8)] {
        let input = multires_preprocess::<f32>(Region::new(x0, y0, w as u32, h as u32), &sweep, &cfg).unwrap();
        let tile = forward(&input, &params, &cfg).unwrap().image;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let a = tile.data()[(c * h + y) * w + x];
                    let b = whole.data()[(c * 24 + y + y0 as usize) * 24 + x + x0 as usize];
                    assert!((a - b).abs() < 1e-5, "tile ({x0},{y0}) pixel ({x},{y}) channel {c}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn preprocess_shapes_and_errors() {
    let cfg = ModelConfig::compact(2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (sources, target) = test_scene(&mut rng);
    let sampling = DepthSampling::new(2.0, 10.0, 4, DepthScheme::InverseDepthUniform).unwrap();
    let sweep = SweepInputs { sources: &sources, target: &target, sampling: &sampling };
    let input = multires_preprocess::<f32>(Region::new(0, 0, 8, 8), &sweep, &cfg).unwrap();
    assert_eq!(input.pathways[0].data.shape(), &[4, 8, 26, 26]);
    assert_eq!(input.pathways[1].data.shape()[..2], [4, 8]);
    let bad = DepthSampling::new(2.0, 10.0, 5, DepthScheme::InverseDepthUniform).unwrap();
    let sweep = SweepInputs { sources: &sources, target: &target, sampling: &bad };
    assert!(multires_preprocess::<f32>(Region::new(0, 0, 8, 8), &sweep, &cfg).is_err());
    let sweep = SweepInputs { sources: &sources[..1], target: &target, sampling: &sampling };
    assert!(multires_preprocess::<f32>(Region::new(0, 0, 8, 8), &sweep, &cfg).is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let reports = end_to_end_gradcheck(77, 3, 1e-5, 1e-3).unwrap();
    assert_eq!(reports.len(), 3);
    for r in &reports {
        assert!(r.passed(1e-4), "{r:?}");
        assert!(r.checked > 200);
    }
}
