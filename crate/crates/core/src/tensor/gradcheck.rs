use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest element-wise relative error over all inputs.
    pub max_rel_error: f64,
    /// Input index and element index where the largest error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Checks the gradient of the scalar function `f` at `inputs` by central differences.
///
/// Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, floor)` where
/// `floor = 1e-6 · max(1, |f|)` sits above the round-off noise of the difference
/// quotient, so vanishing gradients are compared absolutely.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let f0 = tape.value(loss).item();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let floor = 1e-6 * f0.abs().max(1.0);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Finite-difference step used by [`op_suite`].
pub const GRAD_CHECK_EPS: f64 = 1e-5;
/// Relative error below which a check passes.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Reduces a tensor to a scalar with fixed uneven weights so every output element
/// contributes a distinct gradient.
fn project(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    let w: Vec<f64> = (0..n).map(|k| ((k * 7919 % 113) as f64 / 113.0) - 0.45).collect();
    tape.dot_const(v, &w)
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

/// Checks every differentiable tape operation on random inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let a = random(&[3, 4], r);
    let b = random(&[3, 4], r);
    let s = random(&[1], r);
    let m = random(&[4, 5], r);
    let x5 = random(&[5], r);
    let m53 = random(&[5, 3], r);
    let logits = random(&[66], r);
    let p5 = random(&[5], r);
    let img = random(&[3, 8, 8], r);
    let w = random(&[4, 3, 3, 3], r);
    let bias = random(&[4], r);
    let fm = random(&[3, 5, 5], r);
    let c3 = random(&[3], r);
    let map = random(&[1, 5, 5], r);

    fn unary(f: fn(&mut Tape, Var) -> Result<Var>) -> Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>> {
        Box::new(move |t, v| {
            let y = f(t, v[0])?;
            project(t, y)
        })
    }
    fn binary(f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>> {
        Box::new(move |t, v| {
            let y = f(t, v[0], v[1])?;
            project(t, y)
        })
    }

    let cases: Vec<Case> = vec![
        ("add", vec![a.clone(), b.clone()], binary(|t, x, y| t.add(x, y))),
        ("sub", vec![a.clone(), s.clone()], binary(|t, x, y| t.sub(x, y))),
        ("mul", vec![a.clone(), b.clone()], binary(|t, x, y| t.mul(x, y))),
        ("mul broadcast", vec![a.clone(), s.clone()], binary(|t, x, y| t.mul(x, y))),
        ("scale", vec![a.clone()], unary(|t, x| Ok(t.scale(x, -1.7)))),
        ("sum_all", vec![a.clone(), b.clone()], binary(|t, x, y| t.sum_all(&[x, y]))),
        ("relu", vec![a.clone()], unary(|t, x| Ok(t.relu(x)))),
        ("sigmoid", vec![a.clone()], unary(|t, x| Ok(t.sigmoid(x)))),
        ("softmax", vec![a.clone()], unary(|t, x| t.softmax(x, 1))),
        ("softmax axis 0", vec![a.clone()], unary(|t, x| t.softmax(x, 0))),
        ("reshape", vec![a.clone()], unary(|t, x| t.reshape(x, &[12]))),
        ("matvec", vec![m.clone(), x5.clone()], binary(|t, x, y| t.matmul(x, y))),
        ("matmul", vec![m, m53], binary(|t, x, y| t.matmul(x, y))),
        ("cross_entropy", vec![logits], Box::new(|t, v| t.cross_entropy(v[0], 17))),
        ("mse", vec![x5, p5], Box::new(|t, v| t.mse(v[0], v[1]))),
        (
            "conv2d s1 p1",
            vec![img.clone(), w.clone(), bias.clone()],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                project(t, y)
            }),
        ),
        (
            "conv2d s2 p0",
            vec![img, w, bias],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 0)?;
                project(t, y)
            }),
        ),
        ("global_avg_pool", vec![fm.clone()], unary(|t, x| t.global_avg_pool(x))),
        ("global_max_pool", vec![fm.clone()], unary(|t, x| t.global_max_pool(x))),
        ("channel_mean_map", vec![fm.clone()], unary(|t, x| t.channel_mean_map(x))),
        ("channel_max_map", vec![fm.clone()], unary(|t, x| t.channel_max_map(x))),
        ("scale_by_channel", vec![fm.clone(), c3], binary(|t, x, y| t.scale_by_channel(x, y))),
        ("scale_by_map", vec![fm.clone(), map.clone()], binary(|t, x, y| t.scale_by_map(x, y))),
        ("concat", vec![fm, map], binary(|t, x, y| t.concat(&[x, y], 0))),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, grad_check(f, &inputs, GRAD_CHECK_EPS)?)))
        .collect()
}
