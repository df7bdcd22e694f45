//! Finite-difference checks for every differentiable op in the tensor engine.

use dssl_core::tensor::{batch_norm_eval, batch_norm_train, cat0, conv2d, ArrF, Tape, Tensor, Var};
use ndarray::{Array1, Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrF {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ArrF::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Compare autodiff gradients against central finite differences for a scalar
/// function of several vars.
fn check_grads(vars: &[Var], f: impl Fn(&Tape, &[Tensor]) -> Tensor, tol: f64) {
    let eval = |vars: &[Var]| -> f64 {
        let tape = Tape::new();
        let inputs: Vec<Tensor> = vars.iter().map(|v| tape.var(v)).collect();
        f(&tape, &inputs).scalar()
    };
    let tape = Tape::new();
    let inputs: Vec<Tensor> = vars.iter().map(|v| tape.var(v)).collect();
    let loss = f(&tape, &inputs);
    let grads = loss.backward();

    let h = 1e-5;
    for var in vars {
        let grad = grads
            .get(var)
            .unwrap_or_else(|| panic!("no gradient for {}", var.name()))
            .clone();
        let base = var.clone_value();
        for idx in 0..base.len() {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            var.set_value(plus);
            let fp = eval(vars);
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            var.set_value(minus);
            let fm = eval(vars);
            var.set_value(base.clone());
            let fd = (fp - fm) / (2.0 * h);
            let ad = grad.as_slice().unwrap()[idx];
            let denom = fd.abs().max(ad.abs()).max(1.0);
            assert!(
                ((fd - ad) / denom).abs() < tol,
                "{} [{}]: fd {} vs ad {}",
                var.name(),
                idx,
                fd,
                ad
            );
        }
    }
}

#[test]
fn elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Var::new("a", random_arr(&mut rng, &[3, 4]));
    let b = Var::new("b", random_arr(&mut rng, &[3, 4]));
    check_grads(
        &[a, b],
        |_t, xs| {
            let y = xs[0].mul(&xs[1]).add(&xs[0]).sub(&xs[1]).scale(0.7).add_scalar(0.3);
            y.relu().mean_all()
        },
        1e-6,
    );
}

#[test]
fn matmul_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Var::new("x", random_arr(&mut rng, &[5, 3]));
    let w = Var::new("w", random_arr(&mut rng, &[3, 4]));
    let b = Var::new("b", random_arr(&mut rng, &[4]));
    check_grads(
        &[x, w, b],
        |_t, xs| xs[0].matmul(&xs[1]).add_bias2d(&xs[2]).relu().sum_all().scale(0.1),
        1e-6,
    );
}

#[test]
fn matmul_nt_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Var::new("a", random_arr(&mut rng, &[4, 3]));
    let b = Var::new("b", random_arr(&mut rng, &[5, 3]));
    check_grads(&[a, b], |_t, xs| xs[0].matmul_nt(&xs[1]).relu().mean_all(), 1e-6);
}

#[test]
fn row_normalize_and_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Var::new("x", random_arr(&mut rng, &[4, 6]) + 0.5);
    check_grads(
        &[x],
        |_t, xs| xs[0].row_l2_normalize().sum_rows().mean_all(),
        1e-6,
    );
}

#[test]
fn conv2d_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Var::new("x", random_arr(&mut rng, &[2, 3, 6, 6]));
    let w = Var::new("w", random_arr(&mut rng, &[4, 3, 3, 3]));
    let b = Var::new("b", random_arr(&mut rng, &[4]));
    check_grads(
        &[x, w, b],
        |_t, xs| conv2d(&xs[0], &xs[1], Some(&xs[2]), 1, 1).relu().mean_all(),
        1e-5,
    );
}

#[test]
fn conv2d_strided_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Var::new("x", random_arr(&mut rng, &[2, 2, 5, 5]));
    let w = Var::new("w", random_arr(&mut rng, &[3, 2, 3, 3]));
    check_grads(
        &[x, w],
        |_t, xs| conv2d(&xs[0], &xs[1], None, 2, 1).mean_all(),
        1e-5,
    );
}

#[test]
fn global_avg_pool_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Var::new("x", random_arr(&mut rng, &[2, 3, 4, 4]));
    check_grads(&[x], |_t, xs| xs[0].global_avg_pool().relu().sum_all(), 1e-6);
}

#[test]
fn batch_norm_train_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Var::new("x", random_arr(&mut rng, &[6, 3, 2, 2]));
    let g = Var::new("g", random_arr(&mut rng, &[3]) + 1.5);
    let b = Var::new("b", random_arr(&mut rng, &[3]));
    check_grads(
        &[x, g, b],
        |_t, xs| {
            let (y, _) = batch_norm_train(&xs[0], &xs[1], &xs[2], 1e-5);
            y.relu().mean_all()
        },
        1e-4,
    );
}

#[test]
fn batch_norm_train_grad_2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Var::new("x", random_arr(&mut rng, &[8, 5]));
    let g = Var::new("g", random_arr(&mut rng, &[5]) + 1.5);
    let b = Var::new("b", random_arr(&mut rng, &[5]));
    check_grads(
        &[x, g, b],
        |_t, xs| {
            let (y, _) = batch_norm_train(&xs[0], &xs[1], &xs[2], 1e-5);
            y.mul(&y).mean_all()
        },
        1e-4,
    );
}

#[test]
fn batch_norm_eval_grad() {
    // Eval-mode BN folds gamma/beta into constants; only the x path carries
    // gradient, which is all feature extraction ever needs.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Var::new("x", random_arr(&mut rng, &[4, 3, 2, 2]));
    let g = random_arr(&mut rng, &[3]) + 1.0;
    let b = random_arr(&mut rng, &[3]);
    let rm = Array1::from_vec(vec![0.1, -0.2, 0.3]);
    let rv = Array1::from_vec(vec![1.1, 0.9, 1.3]);
    check_grads(
        &[x],
        move |t, xs| {
            let gc = t.constant(g.clone());
            let bc = t.constant(b.clone());
            batch_norm_eval(&xs[0], &gc, &bc, &rm, &rv, 1e-5).relu().mean_all()
        },
        1e-6,
    );
}

#[test]
fn log_softmax_and_gather_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Var::new("x", random_arr(&mut rng, &[4, 5]));
    let mut mask = Array2::from_elem((4, 5), true);
    mask[[0, 0]] = false;
    mask[[2, 3]] = false;
    let idx = vec![1usize, 0, 2, 4];
    check_grads(
        &[x],
        move |_t, xs| {
            xs[0]
                .log_softmax_rows(Some(&mask))
                .gather_rows(&idx)
                .mean_all()
                .neg()
        },
        1e-6,
    );
}

#[test]
fn cat0_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = Var::new("a", random_arr(&mut rng, &[2, 3]));
    let b = Var::new("b", random_arr(&mut rng, &[4, 3]));
    check_grads(
        &[a, b],
        |_t, xs| cat0(&[xs[0].clone(), xs[1].clone()]).relu().mean_all(),
        1e-6,
    );
}

#[test]
fn detached_branch_gets_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = Var::new("a", random_arr(&mut rng, &[2, 2]));
    let tape = Tape::new();
    let at = tape.var(&a);
    let loss = at.detach().mul(&at.detach()).mean_all();
    let grads = loss.backward();
    assert!(grads.get(&a).is_none());
}
