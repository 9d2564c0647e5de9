//! Backward passes against central finite differences.

use geocloak::ndiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TRIALS: u64 = 100;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// values bounded away from zero, for ops with a kink there
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Loss `sum(op(inputs) * w)` with fixed random weights `w`.
fn weighted_loss(inputs: &[Tensor<f64>], weights: &Tensor<f64>, build: &Build, grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = tape.constant(weights.reshape(tape.value(out).shape().to_vec()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let value = tape.value(loss).item();
    if !grads {
        return (value, vec![]);
    }
    tape.backward(loss).unwrap();
    (value, vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect())
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-8, f64::max);
    diff / scale
}

fn check_op(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, build: &Build, tol: f64) {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let inputs = make(&mut rng);
        let out_len = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).len()
        };
        let weights = random(&mut rng, &[out_len], -1.0, 1.0);
        let (_, analytic) = weighted_loss(&inputs, &weights, build, true);
        for (k, input) in inputs.iter().enumerate() {
            assert!(input.len() <= 64, "{name}: input {k} has {} elements", input.len());
            let numeric: Vec<f64> = (0..input.len())
                .map(|i| {
                    let shifted = |delta: f64| {
                        let mut data = input.data().to_vec();
                        data[i] += delta;
                        let mut xs = inputs.clone();
                        xs[k] = Tensor::new(input.shape().to_vec(), data).unwrap();
                        weighted_loss(&xs, &weights, build, false).0
                    };
                    (shifted(H) - shifted(-H)) / (2.0 * H)
                })
                .collect();
            let err = relative_error(&analytic[k], &numeric);
            worst = worst.max(err);
            assert!(err <= tol, "{name} trial {trial} input {k}: rel err {err:e}");
        }
    }
    println!("{name}: worst relative error {worst:.3e} over {TRIALS} trials");
}

#[test]
fn elementwise_binary_ops() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)];
    check_op("add", make, &|t, v| t.add(v[0], v[1]).unwrap(), 1e-4);
    check_op("sub", make, &|t, v| t.sub(v[0], v[1]).unwrap(), 1e-4);
    check_op("mul", make, &|t, v| t.mul(v[0], v[1]).unwrap(), 1e-4);
}

#[test]
fn elementwise_unary_ops() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, &[5, 6], -2.0, 2.0)];
    check_op("scale", make, &|t, v| t.scale(v[0], -1.7).unwrap(), 1e-4);
    check_op("tanh", make, &|t, v| t.tanh(v[0]).unwrap(), 1e-4);
    check_op("square", make, &|t, v| t.square(v[0]).unwrap(), 1e-4);
    check_op("relu", |r| vec![random_off_zero(r, &[5, 6])], &|t, v| t.relu(v[0]).unwrap(), 1e-4);
    check_op("sqrt", |r| vec![random(r, &[5, 6], 0.1, 2.0)], &|t, v| t.sqrt(v[0]).unwrap(), 1e-4);
}

#[test]
fn reductions_and_reshape() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, &[4, 8], -1.0, 1.0)];
    check_op("sum", make, &|t, v| t.sum(v[0]).unwrap(), 1e-4);
    check_op("mean", make, &|t, v| t.mean(v[0]).unwrap(), 1e-4);
    check_op("reshape", make, &|t, v| t.reshape(v[0], vec![8, 4]).unwrap(), 1e-4);
}

#[test]
fn matmul() {
    check_op(
        "matmul",
        |r| vec![random(r, &[4, 5], -1.0, 1.0), random(r, &[5, 3], -1.0, 1.0)],
        &|t, v| t.matmul(v[0], v[1]).unwrap(),
        1e-4,
    );
}

#[test]
fn conv2d() {
    check_op(
        "conv2d stride 1",
        |r| {
            vec![
                random(r, &[2, 5, 5], -1.0, 1.0),
                random(r, &[3, 2, 2, 2], -1.0, 1.0),
                random(r, &[3], -1.0, 1.0),
            ]
        },
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1).unwrap(),
        1e-4,
    );
    check_op(
        "conv2d stride 2",
        |r| vec![random(r, &[2, 5, 5], -1.0, 1.0), random(r, &[2, 2, 3, 3], -1.0, 1.0)],
        &|t, v| t.conv2d(v[0], v[1], None, 2).unwrap(),
        1e-4,
    );
}

#[test]
fn bilinear_sample() {
    check_op(
        "bilinear",
        |r| vec![random(r, &[2, 4, 4], -1.0, 1.0), random(r, &[6, 2], 0.02, 0.98)],
        &|t, v| t.bilinear_sample(v[0], v[1]).unwrap(),
        1e-6,
    );
}

#[test]
fn chamfer_wrt_both_clouds() {
    check_op(
        "chamfer 2d",
        |r| vec![random(r, &[12, 2], -0.5, 0.5), random(r, &[9, 2], -0.5, 0.5)],
        &|t, v| t.chamfer(v[0], v[1]).unwrap(),
        1e-4,
    );
    check_op(
        "chamfer 3d",
        |r| vec![random(r, &[10, 3], -0.5, 0.5), random(r, &[7, 3], -0.5, 0.5)],
        &|t, v| t.chamfer(v[0], v[1]).unwrap(),
        1e-4,
    );
}

#[test]
fn composed_mean_relu_dense() {
    check_op(
        "mean(relu(Wx))",
        |r| vec![random(r, &[6, 5], -1.0, 1.0), random(r, &[5, 1], -1.0, 1.0)],
        &|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let y = t.relu(y).unwrap();
            t.mean(y).unwrap()
        },
        1e-6,
    );
}
