use agrekd::losses::{combined_loss, cross_entropy, ensemble_kd_loss, kd_loss, KdDirection};
use agrekd::model::{Layer, Mlp};
use agrekd::tensor::{finite_diff_check, Rng, Tape, Tensor, Var};
use agrekd::weighting::weighted_kd_loss;
use agrekd::Result;
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn labels(rng: &mut Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(c as u64) as usize).collect()
}

/// Forward pass of `model` in which parameter tensor `k` (weight, bias,
/// weight, ...) is the leaf `theta` and every other tensor is a constant.
fn forward_with(tape: &mut Tape, model: &Mlp, k: usize, theta: Var, x: &Tensor) -> Result<Var> {
    let mut h = tape.constant(x.clone());
    let last = model.layers().len() - 1;
    for (i, l) in model.layers().iter().enumerate() {
        let w = if 2 * i == k { theta } else { tape.constant(l.weight.clone()) };
        let b = if 2 * i + 1 == k { theta } else { tape.constant(l.bias.clone()) };
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if i < last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn param(model: &Mlp, k: usize) -> Tensor {
    let l: &Layer = &model.layers()[k / 2];
    if k.is_multiple_of(2) {
        l.weight.clone()
    } else {
        l.bias.clone()
    }
}

fn random_mlp(rng: &mut Rng, d: usize, h: usize, c: usize) -> Mlp {
    let mut m = Mlp::new(&[d, h, c], rng).unwrap();
    // nonzero biases so no unit sits exactly at its kink
    for l in m.layers_mut() {
        l.bias = randn(rng, l.bias.shape(), 0.5);
    }
    m
}

fn direction(flag: bool) -> KdDirection {
    if flag {
        KdDirection::TeacherToStudent
    } else {
        KdDirection::StudentToTeacher
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn elementwise_and_reduction_ops(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let mut rng = Rng::new(seed);
        let other = randn(&mut rng, &[m, n], 1.0);
        let row = randn(&mut rng, &[n], 1.0);
        let right = randn(&mut rng, &[n, 3], 1.0);
        let idx = labels(&mut rng, m, n);
        let theta = randn(&mut rng, &[m, n], 1.0);
        let err = finite_diff_check(|tape, t| {
            let o = tape.constant(other.clone());
            let r = tape.constant(row.clone());
            let b = tape.constant(right.clone());
            let a = tape.mul(t, o)?;
            let a = tape.add(a, t)?;
            let a = tape.add_row(a, r)?;
            let e = tape.scale(t, 0.3);
            let e = tape.exp(e);
            let a = tape.sub(a, e)?;
            let p = tape.matmul(a, b)?;
            let p = tape.relu(p);
            let s = tape.sum_rows(p)?;
            let lsm = tape.log_softmax(a)?;
            let g = tape.gather(lsm, &idx)?;
            let cols = tape.stack_cols(&[s, g])?;
            let total = tape.sum(cols);
            let avg = tape.mean(a);
            tape.add(total, avg)
        }, &theta, STEP).unwrap();
        prop_assert!(err <= TOL, "relative error {err}");
    }

    #[test]
    fn cross_entropy_through_mlp(seed in any::<u64>(), d in 1usize..5, h in 1usize..6, c in 2usize..5, n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let model = random_mlp(&mut rng, d, h, c);
        let x = randn(&mut rng, &[n, d], 1.0);
        let y = labels(&mut rng, n, c);
        for k in 0..4 {
            let err = finite_diff_check(|tape, t| {
                let z = forward_with(tape, &model, k, t, &x)?;
                let ce = cross_entropy(tape, z, &y)?;
                Ok(tape.mean(ce))
            }, &param(&model, k), STEP).unwrap();
            prop_assert!(err <= TOL, "param {k}: relative error {err}");
        }
    }

    #[test]
    fn kd_loss_through_mlp(seed in any::<u64>(), d in 1usize..5, h in 1usize..6, c in 2usize..5, n in 1usize..6,
                           tau in 0.5f64..8.0, teacher_first in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let model = random_mlp(&mut rng, d, h, c);
        let x = randn(&mut rng, &[n, d], 1.0);
        let teacher = randn(&mut rng, &[n, c], 2.0);
        for k in 0..4 {
            let err = finite_diff_check(|tape, t| {
                let z = forward_with(tape, &model, k, t, &x)?;
                let l = kd_loss(tape, z, &teacher, tau, direction(teacher_first))?;
                Ok(tape.mean(l))
            }, &param(&model, k), STEP).unwrap();
            prop_assert!(err <= TOL, "param {k}: relative error {err}");
        }
    }

    #[test]
    fn ensemble_and_combined_loss(seed in any::<u64>(), c in 2usize..5, n in 1usize..6, m in 1usize..5,
                                  tau in 0.5f64..8.0, alpha in 0.0f64..1.0, teacher_first in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let model = random_mlp(&mut rng, 3, 4, c);
        let x = randn(&mut rng, &[n, 3], 1.0);
        let y = labels(&mut rng, n, c);
        let teachers: Vec<Tensor> = (0..m).map(|_| randn(&mut rng, &[n, c], 2.0)).collect();
        for k in 0..4 {
            let err = finite_diff_check(|tape, t| {
                let z = forward_with(tape, &model, k, t, &x)?;
                let kd = ensemble_kd_loss(tape, z, &teachers, tau, direction(teacher_first))?;
                let kd = tape.mean(kd);
                let ce = cross_entropy(tape, z, &y)?;
                let ce = tape.mean(ce);
                combined_loss(tape, kd, ce, alpha)
            }, &param(&model, k), STEP).unwrap();
            prop_assert!(err <= TOL, "param {k}: relative error {err}");
        }
    }

    #[test]
    fn weighted_kd_loss_through_mlp(seed in any::<u64>(), c in 2usize..5, n in 1usize..6, m in 1usize..5, tau in 0.5f64..8.0) {
        let mut rng = Rng::new(seed);
        let model = random_mlp(&mut rng, 3, 4, c);
        let x = randn(&mut rng, &[n, 3], 1.0);
        let teachers: Vec<Tensor> = (0..m).map(|_| randn(&mut rng, &[n, c], 2.0)).collect();
        let w = Tensor::matrix(n, m, (0..n * m).map(|_| 2.0 * rng.uniform()).collect()).unwrap();
        for k in 0..4 {
            let err = finite_diff_check(|tape, t| {
                let z = forward_with(tape, &model, k, t, &x)?;
                let cols = teachers
                    .iter()
                    .map(|tl| kd_loss(tape, z, tl, tau, KdDirection::TeacherToStudent))
                    .collect::<Result<Vec<_>>>()?;
                let stacked = tape.stack_cols(&cols)?;
                let l = weighted_kd_loss(tape, stacked, &w, 1e-8)?;
                Ok(tape.mean(l))
            }, &param(&model, k), STEP).unwrap();
            prop_assert!(err <= TOL, "param {k}: relative error {err}");
        }
    }
}
