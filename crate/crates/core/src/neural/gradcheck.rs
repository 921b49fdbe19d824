//! Central finite-difference checks of the analytic gradients.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dense::{Activation, DenseStack};
use super::kabsch_grad::kabsch_backward;
use super::loss::{loss_total, loss_total_grad, LossConfig};
use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::geom::RigidTransform;

const FD_STEP: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized data")
}

/// Worst relative error between the tape gradient of `Σ probe ⊙ f(inputs)` and
/// its central differences, over all inputs.
pub fn check_tape_op(
    inputs: &[Matrix],
    rng: &mut impl Rng,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let forward = |values: &[Matrix]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = forward(inputs);
    let (rows, cols) = tape.value(out).shape();
    let probe = random_matrix(rng, rows, cols);
    let contract = |values: &[Matrix]| {
        let (t, _, o) = forward(values);
        t.value(o).zip_map(&probe, |x, p| x * p).sum()
    };
    let grads = tape.backward(&[(out, probe.clone())]);

    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, inputs[i].shape());
        let mut values = inputs.to_vec();
        let mut numeric = Vec::with_capacity(inputs[i].as_slice().len());
        for j in 0..inputs[i].as_slice().len() {
            let orig = inputs[i].as_slice()[j];
            values[i].as_mut_slice()[j] = orig + FD_STEP;
            let plus = contract(&values);
            values[i].as_mut_slice()[j] = orig - FD_STEP;
            let minus = contract(&values);
            values[i].as_mut_slice()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(analytic.as_slice(), &numeric));
    }
    worst
}

fn random_transform(rng: &mut impl Rng, max_angle: f64, max_t: f64) -> RigidTransform {
    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let t = Vector3::from_fn(|_, _| rng.random_range(-max_t..max_t));
    RigidTransform::from_axis_angle(axis, rng.random_range(0.05..max_angle), t)
}

/// Worst relative error of [`loss_total_grad`] against central differences
/// over the entries of `R̂` and `t̂`.
pub fn check_loss(rng: &mut impl Rng) -> f64 {
    let cfg = LossConfig::new(1.8).expect("positive alpha");
    let gt = random_transform(rng, 3.0, 5.0);
    let est = random_transform(rng, 3.0, 5.0);
    let (g_r, g_t) = loss_total_grad(&est, &gt, &cfg);
    let analytic: Vec<f64> = g_r.iter().chain(g_t.iter()).copied().collect();
    let mut numeric = Vec::with_capacity(12);
    let at = |r: Matrix3<f64>, t: Vector3<f64>| loss_total(&RigidTransform::new(r, t), &gt, &cfg);
    for k in 0..9 {
        let mut p = est.rotation;
        let mut m = est.rotation;
        p.as_mut_slice()[k] += FD_STEP;
        m.as_mut_slice()[k] -= FD_STEP;
        numeric.push((at(p, est.translation) - at(m, est.translation)) / (2.0 * FD_STEP));
    }
    for k in 0..3 {
        let mut p = est.translation;
        let mut m = est.translation;
        p[k] += FD_STEP;
        m[k] -= FD_STEP;
        numeric.push((at(est.rotation, p) - at(est.rotation, m)) / (2.0 * FD_STEP));
    }
    relative_error(&analytic, &numeric)
}

/// Relative difference of the Kabsch backward pass at steps `1e-4` and `1e-5`,
/// and whether both results are finite.
pub fn check_kabsch_steps(rng: &mut impl Rng, n: usize) -> Result<(f64, bool)> {
    let source: Vec<Point3<f64>> = (0..n)
        .map(|_| Point3::from(Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0))))
        .collect();
    let gt = random_transform(rng, 1.0, 3.0);
    let target: Vec<Point3<f64>> = source
        .iter()
        .map(|p| gt.transform_point(p) + Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)))
        .collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let g_r = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let g_t = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let coarse = kabsch_backward(&source, &target, &weights, &g_r, &g_t, 1e-4)?;
    let fine = kabsch_backward(&source, &target, &weights, &g_r, &g_t, 1e-5)?;
    let flat = |g: &super::KabschInputGrad| -> Vec<f64> {
        g.target.iter().flat_map(|v| [v.x, v.y, v.z]).chain(g.weights.iter().copied()).collect()
    };
    let (a, b) = (flat(&coarse), flat(&fine));
    let finite = a.iter().chain(&b).all(|x| x.is_finite());
    Ok((relative_error(&a, &b), finite))
}

/// Worst error per primitive over `instances` random small problems.
pub fn tape_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![
        ("dense", 0.0f64),
        ("relu", 0.0),
        ("sigmoid", 0.0),
        ("softmax", 0.0),
        ("maxpool", 0.0),
        ("weighted sum", 0.0),
        ("broadcast/gather/concat", 0.0),
        ("mlp", 0.0),
        ("loss", 0.0),
    ];
    let mut record = |name: &str, e: f64| {
        let slot = worst.iter_mut().find(|(n, _)| *n == name).expect("known op");
        slot.1 = slot.1.max(e);
    };
    for _ in 0..instances {
        let n = rng.random_range(2..5);
        let k = rng.random_range(2..5);
        let c = rng.random_range(2..5);
        let x = random_matrix(&mut rng, n * k, c);
        let w = random_matrix(&mut rng, c, 3);
        let b = random_matrix(&mut rng, 1, 3);
        record(
            "dense",
            check_tape_op(&[x.clone(), w, b], &mut rng, |t, v| {
                let y = t.matmul(v[0], v[1]);
                t.add_row_bias(y, v[2])
            }),
        );
        let away_from_kink = x.map(|e| if e.abs() < 1e-3 { e + 0.01 } else { e });
        record("relu", check_tape_op(&[away_from_kink], &mut rng, |t, v| t.relu(v[0])));
        record("sigmoid", check_tape_op(&[x.clone()], &mut rng, |t, v| t.sigmoid(v[0])));
        let scores = random_matrix(&mut rng, n * k, 1).scale(3.0);
        record("softmax", check_tape_op(&[scores.clone()], &mut rng, |t, v| t.group_softmax(v[0], k)));
        record("maxpool", check_tape_op(&[x.clone()], &mut rng, |t, v| t.group_max(v[0], k)));
        record(
            "weighted sum",
            check_tape_op(&[scores, x.clone()], &mut rng, |t, v| t.group_weighted_sum(v[0], v[1], k)),
        );
        let pooled = random_matrix(&mut rng, n, c);
        let rows: Vec<usize> = (0..n * k).map(|_| rng.random_range(0..n * k)).collect();
        record(
            "broadcast/gather/concat",
            check_tape_op(&[x.clone(), pooled], &mut rng, |t, v| {
                let wide = t.group_broadcast(v[1], k);
                let cat = t.concat_cols(v[0], wide);
                let g = t.gather(cat, rows.clone());
                let tall = t.concat_rows(g, cat);
                let sq = t.mul(tall, tall);
                let s = t.scale(sq, 0.5);
                t.add(s, tall)
            }),
        );
        let stack = DenseStack::new(
            &[c, 4, 4, 1],
            &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
            &mut rng,
        );
        // Random biases keep pre-activations off the relu kink when a layer is dead.
        let mut inputs = vec![x];
        for p in stack.params().chunks(2) {
            inputs.push(p[0].clone());
            inputs.push(random_matrix(&mut rng, 1, p[1].cols()));
        }
        record(
            "mlp",
            check_tape_op(&inputs, &mut rng, |t, v| {
                let mut h = v[0];
                for (i, l) in stack.layers.iter().enumerate() {
                    let y = t.matmul(h, v[1 + 2 * i]);
                    let y = t.add_row_bias(y, v[2 + 2 * i]);
                    h = match l.activation {
                        Activation::Relu => t.relu(y),
                        Activation::Sigmoid => t.sigmoid(y),
                        Activation::None => y,
                    };
                }
                let p = t.group_max(h, k);
                let s = t.group_softmax(h, k);
                let agg = t.group_weighted_sum(s, h, k);
                t.add(p, agg)
            }),
        );
        record("loss", check_loss(&mut rng));
    }
    worst
}
