use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const OP_TOL: f64 = 1e-4;

fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random point whose entries stay at least `margin` away from zero.
fn random_away_from_zero(rng: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) { v } else { -v }
    })
}

/// Projects an op output onto a fixed random direction so the check covers the full Jacobian.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let r = g.input(random(&mut rng, &shape))?;
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

fn check_points(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<(String, Tensor<f64>)>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Copy) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for point in 0..5 {
        let inputs = make(&mut rng);
        let report = grad_check(name, &inputs, STEP, build).unwrap();
        assert!(report.passed(OP_TOL), "{name} point {point}: {report:?}");
    }
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.input(t32(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let w = g.param("w", t32(&[1, 1, 1, 1], &[1.0])).unwrap();
    let b = g.param("b", t32(&[1], &[0.0])).unwrap();
    let y = g.conv2d(x, w, b).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let x = g.input(Tensor::full(&[1, 3, 3], 1.0)).unwrap();
    let w = g.param("w9", Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let y = g.conv2d(x, w, b).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn conv2d_output_shape_and_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[2, 3, 7, 9])).unwrap();
    let w = g.param("w", Tensor::zeros(&[4, 3, 3, 5])).unwrap();
    let b = g.param("b", Tensor::zeros(&[4])).unwrap();
    let y = g.conv2d(x, w, b).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 4, 5, 5]);

    let bad_w = g.param("bad", Tensor::zeros(&[4, 2, 3, 3])).unwrap();
    assert!(matches!(g.conv2d(x, bad_w, b), Err(TensorError::ShapeMismatch(_))));
    let big = g.param("big", Tensor::zeros(&[4, 3, 8, 3])).unwrap();
    assert!(matches!(g.conv2d(x, big, b), Err(TensorError::InvalidArgument(_))));
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, h, w, co, k) = (3, 6, 5, 2, 3);
    let x = random(&mut rng, &[c, h, w]);
    let wt = random(&mut rng, &[co, c, k, k]);
    let bias = random(&mut rng, &[co]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()).unwrap(), g.input(wt.clone()).unwrap(), g.input(bias.clone()).unwrap());
    let y = g.conv2d(xv, wv, bv).unwrap();
    let out = g.value(y);
    for o in 0..co {
        for oy in 0..h - k + 1 {
            for ox in 0..w - k + 1 {
                let mut s = bias.data()[o];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            s += wt.data()[((o * c + ci) * k + ky) * k + kx] * x.data()[(ci * h + oy + ky) * w + ox + kx];
                        }
                    }
                }
                let got = out.data()[(o * (h - k + 1) + oy) * (w - k + 1) + ox];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv2d_gradients() {
    check_points(
        "conv2d",
        |rng| {
            vec![
                ("x".into(), random(rng, &[2, 3, 5, 6])),
                ("w".into(), random(rng, &[4, 3, 3, 2])),
                ("b".into(), random(rng, &[4])),
            ]
        },
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            project(g, y, 1)
        },
    );
    check_points(
        "conv2d_pointwise",
        |rng| vec![("x".into(), random(rng, &[3, 4, 4])), ("w".into(), random(rng, &[2, 3, 1, 1])), ("b".into(), random(rng, &[2]))],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            project(g, y, 2)
        },
    );
}

#[test]
fn relu_and_tanh_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.input(t32(&[3], &[-1.0, 0.0, 2.0])).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let z = g.input(Tensor::scalar(0.0)).unwrap();
    let t = g.tanh(z).unwrap();
    assert_eq!(g.value(t).item(), 0.0);
}

#[test]
fn relu_and_tanh_gradients() {
    check_points(
        "relu",
        |rng| vec![("x".into(), random_away_from_zero(rng, &[3, 4, 5], 10.0 * STEP))],
        |g, v| {
            let y = g.relu(v[0])?;
            project(g, y, 3)
        },
    );
    check_points(
        "tanh",
        |rng| vec![("x".into(), random(rng, &[3, 4, 5]))],
        |g, v| {
            let y = g.tanh(v[0])?;
            project(g, y, 4)
        },
    );
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2, 5, 3])).unwrap();
    let s = g.softmax(x, 1).unwrap();
    assert!(g.value(s).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

    let x = g.input(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
    let s = g.softmax(x, 0).unwrap();
    let d = g.value(s).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

    // Large logits stay finite thanks to max subtraction.
    let x = g.input(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap()).unwrap();
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 0.0]);
}

#[test]
fn softmax_gradients() {
    for axis in 0..3 {
        check_points(
            "softmax",
            |rng| vec![("x".into(), Tensor::from_fn(&[3, 4, 2], |_| rng.gen_range(-3.0..3.0)))],
            move |g, v| {
                let y = g.softmax(v[0], axis)?;
                project(g, y, 5)
            },
        );
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f32>::new();
    let b = g.input(t32(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
    let ones = g.input(Tensor::full(&[2, 3], 1.0)).unwrap();
    let y = g.mul(ones, b).unwrap();
    assert_eq!(g.value(y), g.value(b));

    let v = g.input(t32(&[1, 1], &[7.0])).unwrap();
    let up = g.upsample_nearest(v, 2).unwrap();
    assert_eq!(g.value(up), &t32(&[2, 2], &[7.0; 4]));

    let s = g.sum_axis(b, 0).unwrap();
    assert_eq!(g.value(s), &t32(&[3], &[5.0, 7.0, 9.0]));

    // Single-channel broadcast against three channels.
    let a = g.input(t32(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let c = g.input(Tensor::full(&[2, 3, 2], 1.0)).unwrap();
    let m = g.mul(a, c).unwrap();
    assert_eq!(g.value(m).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);

    let bad = g.input(Tensor::zeros(&[2, 2, 2])).unwrap();
    assert!(matches!(g.mul(c, bad), Err(TensorError::ShapeMismatch(_))));
}

#[test]
fn elementwise_gradients() {
    check_points(
        "eltwise_mul",
        |rng| vec![("a".into(), random(rng, &[2, 1, 3, 2])), ("b".into(), random(rng, &[2, 3, 3, 2]))],
        |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 6)
        },
    );
    check_points(
        "sum_over_axis",
        |rng| vec![("x".into(), random(rng, &[3, 2, 4]))],
        |g, v| {
            let y = g.sum_axis(v[0], 1)?;
            project(g, y, 7)
        },
    );
    check_points(
        "concat",
        |rng| vec![("a".into(), random(rng, &[2, 3, 2])), ("b".into(), random(rng, &[2, 1, 2]))],
        |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 1)?;
            project(g, y, 8)
        },
    );
    check_points(
        "upsample_nearest",
        |rng| vec![("x".into(), random(rng, &[2, 3, 2]))],
        |g, v| {
            let y = g.upsample_nearest(v[0], 3)?;
            project(g, y, 9)
        },
    );
    check_points(
        "crop",
        |rng| vec![("x".into(), random(rng, &[2, 5, 6]))],
        |g, v| {
            let y = g.crop(v[0], 1, 2, 3, 3)?;
            project(g, y, 10)
        },
    );
}

#[test]
fn l1_loss_examples_and_gradient() {
    let mut g = Graph::<f32>::new();
    let a = g.input(t32(&[2], &[0.0, 0.0])).unwrap();
    let b = g.input(t32(&[2], &[1.0, -1.0])).unwrap();
    let l = g.l1_loss(a, b).unwrap();
    assert_eq!(g.value(l).item(), 2.0);
    let l = g.l1_loss(b, b).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let c = g.input(Tensor::zeros(&[3])).unwrap();
    assert!(matches!(g.l1_loss(a, c), Err(TensorError::ShapeMismatch(_))));

    check_points(
        "l1_loss",
        |rng| vec![("p".into(), random_away_from_zero(rng, &[3, 4], 10.0 * STEP))],
        |g, v| {
            let t = g.input(Tensor::zeros(&[3, 4]))?;
            g.l1_loss(v[0], t)
        },
    );
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f32>::new();
    let p = g.param("p", t32(&[2, 2], &[1.0, -2.0, 3.0, 0.5])).unwrap();
    let unused = g.param("unused", Tensor::full(&[3], 4.0)).unwrap();
    let _ = unused;
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get("p").unwrap(), &Tensor::full(&[2, 2], 1.0));
    assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[3]));

    assert!(matches!(g.backward(p), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn shared_parameter_accumulates() {
    let mut g = Graph::<f64>::new();
    let p = g.param("p", Tensor::new(vec![2], vec![2.0, 3.0]).unwrap()).unwrap();
    let sq = g.mul(p, p).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get("p").unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f32>::new();
    assert!(matches!(g.input(t32(&[1], &[f32::NAN])), Err(TensorError::NonFinite { .. })));
    let big = g.input(t32(&[1], &[3e38])).unwrap();
    assert!(matches!(g.mul(big, big), Err(TensorError::NonFinite { op: "mul" })));
    assert!(matches!(g.param("x", t32(&[1], &[1.0])).and_then(|_| g.param("x", t32(&[1], &[1.0]))), Err(TensorError::DuplicateParameter(_))));
}

#[test]
fn gradcheck_trivial_cases() {
    let report = grad_check("empty", &[], STEP, |g, _| g.input(Tensor::scalar(3.0))).unwrap();
    assert_eq!(report.checked, 0);
    assert!(report.passed(1e-12));

    let inputs = vec![("x".to_string(), Tensor::full(&[4], 0.3))];
    let report = grad_check("constant", &inputs, STEP, |g, _| {
        let c = g.input(Tensor::full(&[2], 1.5))?;
        g.sum(c)
    })
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);
    assert_eq!(report.checked, 4);
}

#[test]
fn gradcheck_detects_wrong_gradient() {
    // relu evaluated right at the kink: analytic subgradient 0, numeric 0.5.
    let inputs = vec![("x".to_string(), Tensor::zeros(&[1]))];
    let report = grad_check("relu_kink", &inputs, STEP, |g, v| {
        let y = g.relu(v[0])?;
        g.sum(y)
    })
    .unwrap();
    assert!(!report.passed(1e-4));
    assert_eq!(report.kink_margin, 0.0);
}

#[test]
fn concat_then_slice_recovers_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[2, 3, 4]);
    let b = random(&mut rng, &[2, 5, 4]);
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()).unwrap(), g.input(b.clone()).unwrap());
    let c = g.concat(&[va, vb], 1).unwrap();
    let joined = g.value(c);
    assert_eq!(joined.slice_axis(1, 0, 3).unwrap(), a);
    assert_eq!(joined.slice_axis(1, 3, 5).unwrap(), b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_are_distributions(vals in prop::collection::vec(-10.0f64..10.0, 24), axis in 0usize..3) {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 3, 4], vals).unwrap()).unwrap();
        let s = g.softmax(x, axis).unwrap();
        let y = g.value(s);
        prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let sums = g.sum_axis(s, axis).unwrap();
        prop_assert!(g.value(sums).data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn conv2d_is_linear(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 5, 5]);
        let y = random(&mut rng, &[2, 5, 5]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let conv = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let (tv, wv, bv) = (g.input(t.clone()).unwrap(), g.input(w.clone()).unwrap(), g.input(Tensor::zeros(&[3])).unwrap());
            let o = g.conv2d(tv, wv, bv).unwrap();
            g.value(o).clone()
        };
        let mix = Tensor::from_fn(x.shape(), |i| alpha * x.data()[i] + beta * y.data()[i]);
        let lhs = conv(&mix);
        let (cx, cy) = (conv(&x), conv(&y));
        let rhs = Tensor::from_fn(cx.shape(), |i| alpha * cx.data()[i] + beta * cy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }
}

#[test]
fn library_suite_covers_every_op() {
    let reports = super::op_suite(3, 3, 1e-4, None).unwrap();
    assert_eq!(reports.len(), super::SUITE_OPS.len());
    for r in &reports {
        assert!(r.passed(1e-4), "{r:?}");
    }
    let one = super::op_suite(3, 1, 1e-4, Some("softmax")).unwrap();
    assert_eq!(one.len(), 1);
    assert!(super::op_suite(3, 1, 1e-4, Some("nope")).is_err());
}
