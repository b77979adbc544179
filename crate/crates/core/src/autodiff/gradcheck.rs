use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, TensorError, Var};

/// Outcome of comparing analytic gradients against central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    /// Largest `|a - n| / max(|a|, |n|, 1e-6)` over all checked elements.
    pub max_rel_error: f64,
    /// Input name and element index where the largest error occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Distance of the evaluation point to the nearest relu/L1 kink.
    pub kink_margin: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks every element of every named input with central differences
/// `(f(x + h) - f(x - h)) / 2h`, in 64-bit precision.
///
/// `build` receives the graph and one parameter leaf per input (same order)
/// and must return a scalar loss.
pub fn grad_check<F>(op: &str, inputs: &[(String, Tensor<f64>)], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[(String, Tensor<f64>)]| -> Result<(Graph<f64>, Var)> {
        let mut g = Graph::new();
        let vars = values.iter().map(|(n, t)| g.param(n, t.clone())).collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        Ok((g, loss))
    };

    let (graph, loss) = eval(inputs)?;
    let grads = graph.backward(loss)?;
    let kink_margin = graph.kink_margin();

    let mut report = GradCheckReport { op: op.to_string(), max_rel_error: 0.0, worst: None, checked: 0, kink_margin };
    let mut values = inputs.to_vec();
    for (i, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads.get(name).expect("every input is a parameter").clone();
        for e in 0..analytic.len() {
            let orig = values[i].1.data()[e];
            values[i].1.data_mut()[e] = orig + step;
            let (gp, lp) = eval(&values)?;
            values[i].1.data_mut()[e] = orig - step;
            let (gm, lm) = eval(&values)?;
            values[i].1.data_mut()[e] = orig;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * step);
            let err = relative_error(analytic.data()[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), e));
            }
        }
    }
    Ok(report)
}

/// Operations covered by [`op_suite`].
pub const SUITE_OPS: &[&str] = &[
    "conv2d",
    "conv2d_pointwise",
    "relu",
    "tanh",
    "softmax",
    "mul",
    "sum_axis",
    "sum",
    "concat",
    "upsample_nearest",
    "crop",
    "reshape",
    "l1_loss",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Entries at least `margin` away from zero, so relu and |.| are smooth near them.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduces an op output to a scalar by projecting it onto a fixed random direction.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let r = g.input(uniform(&mut rng, &shape, -1.0, 1.0))?;
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

fn inputs_for(op: &str, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor<f64>)> {
    let one = |name: &str, t: Tensor<f64>| vec![(name.to_string(), t)];
    match op {
        "conv2d" => vec![
            ("x".into(), uniform(rng, &[2, 3, 5, 6], -1.0, 1.0)),
            ("w".into(), uniform(rng, &[4, 3, 3, 2], -1.0, 1.0)),
            ("b".into(), uniform(rng, &[4], -1.0, 1.0)),
        ],
        "conv2d_pointwise" => vec![
            ("x".into(), uniform(rng, &[3, 4, 4], -1.0, 1.0)),
            ("w".into(), uniform(rng, &[2, 3, 1, 1], -1.0, 1.0)),
            ("b".into(), uniform(rng, &[2], -1.0, 1.0)),
        ],
        "relu" => one("x", away_from_zero(rng, &[3, 4, 5], 0.05)),
        "tanh" => one("x", uniform(rng, &[3, 4, 5], -2.0, 2.0)),
        "softmax" => one("x", uniform(rng, &[3, 4, 2], -3.0, 3.0)),
        "mul" => vec![("a".into(), uniform(rng, &[2, 1, 3, 2], -1.0, 1.0)), ("b".into(), uniform(rng, &[2, 3, 3, 2], -1.0, 1.0))],
        "sum_axis" | "sum" | "reshape" => one("x", uniform(rng, &[3, 2, 4], -1.0, 1.0)),
        "concat" => vec![("a".into(), uniform(rng, &[2, 3, 2], -1.0, 1.0)), ("b".into(), uniform(rng, &[2, 1, 2], -1.0, 1.0))],
        "upsample_nearest" => one("x", uniform(rng, &[2, 3, 2], -1.0, 1.0)),
        "crop" => one("x", uniform(rng, &[2, 5, 6], -1.0, 1.0)),
        "l1_loss" => {
            let target = uniform(rng, &[3, 4], -1.0, 1.0);
            let offset = away_from_zero(rng, &[3, 4], 0.05);
            let pred = Tensor::from_fn(&[3, 4], |i| target.data()[i] + offset.data()[i]);
            vec![("pred".into(), pred), ("target".into(), target)]
        }
        _ => unreachable!("unknown op {op}"),
    }
}

fn build_op(op: &str, point: u64, g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
    let seed = 1000 + point;
    let y = match op {
        "conv2d" | "conv2d_pointwise" => g.conv2d(v[0], v[1], v[2])?,
        "relu" => g.relu(v[0])?,
        "tanh" => g.tanh(v[0])?,
        "softmax" => g.softmax(v[0], (point % 3) as usize)?,
        "mul" => g.mul(v[0], v[1])?,
        "sum_axis" => g.sum_axis(v[0], (point % 3) as usize)?,
        "sum" => return g.sum(v[0]),
        "concat" => g.concat(&[v[0], v[1], v[0]], 1)?,
        "upsample_nearest" => g.upsample_nearest(v[0], 3)?,
        "crop" => g.crop(v[0], 1, 2, 3, 3)?,
        "reshape" => g.reshape(v[0], &[4, 6])?,
        "l1_loss" => return g.l1_loss(v[0], v[1]),
        _ => unreachable!("unknown op {op}"),
    };
    project(g, y, seed)
}

/// Central-difference checks of every op (or only `filter`) at `points`
/// random evaluation points each; one report per op holding its worst point.
pub fn op_suite(seed: u64, points: usize, step: f64, filter: Option<&str>) -> Result<Vec<GradCheckReport>> {
    if let Some(f) = filter {
        if !SUITE_OPS.contains(&f) {
            return Err(TensorError::InvalidArgument(format!("unknown op {f:?}; known ops: {}", SUITE_OPS.join(", "))));
        }
    }
    let mut reports = Vec::new();
    for (i, &op) in SUITE_OPS.iter().enumerate() {
        if filter.is_some_and(|f| f != op) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst: Option<GradCheckReport> = None;
        for p in 0..points as u64 {
            let inputs = inputs_for(op, &mut rng);
            let r = grad_check(op, &inputs, step, |g, v| build_op(op, p, g, v))?;
            worst = Some(match worst {
                Some(w) if w.max_rel_error >= r.max_rel_error => GradCheckReport { checked: w.checked + r.checked, ..w },
                Some(w) => GradCheckReport { checked: w.checked + r.checked, ..r },
                None => r,
            });
        }
        reports.extend(worst);
    }
    Ok(reports)
}
