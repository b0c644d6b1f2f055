//! Every primitive op against central differences, 20 seeds each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphx::tensor::{grad_check, Activation, GradCheckOptions, Tape, Tensor, TensorError, Var};

type R<T> = Result<T, TensorError>;

const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Runs `f` on 20 seeds of random inputs with the given shapes.
fn check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> R<Var<'t>> + Sync + Send,
{
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
        let r = grad_check(&params, &GradCheckOptions::default(), &f).unwrap();
        assert!(r.passed(TOL), "{name} seed {seed}: {r:?}");
    }
}

// Non-linear readout so every output entry gets a distinct upstream grad.
fn readout<'t>(v: Var<'t>) -> R<Var<'t>> {
    let w = v.tape().constant(&Tensor::from_fn(v.shape()[0], v.numel() / v.shape()[0], |i, j| {
        0.3 + 0.1 * i as f64 - 0.2 * j as f64
    }).reshape(v.shape())?);
    v.mul(w)?.sigmoid()?.sum()
}

#[test]
fn matmul_and_transpose() {
    check("matmul", &[&[3, 4], &[4, 2]], |_, v| readout(v[0].matmul(v[1])?));
    check("transpose", &[&[3, 2]], |_, v| readout(v[0].transpose()?));
}

#[test]
fn elementwise_arithmetic() {
    check("add", &[&[2, 3], &[2, 3]], |_, v| readout(v[0].add(v[1])?));
    check("sub", &[&[2, 3], &[2, 3]], |_, v| readout(v[0].sub(v[1])?));
    check("mul", &[&[2, 3], &[2, 3]], |_, v| readout(v[0].mul(v[1])?));
    check("scale", &[&[2, 3]], |_, v| readout(v[0].scale(-1.7)?));
    check("add_bias", &[&[4, 3], &[3]], |_, v| readout(v[0].add_bias(v[1])?));
}

#[test]
fn activations() {
    for act in [
        Activation::Identity,
        Activation::Relu,
        Activation::LeakyRelu(0.2),
        Activation::Sigmoid,
        Activation::Tanh,
    ] {
        check(&format!("{act:?}"), &[&[3, 3]], move |_, v| readout(v[0].activate(act)?));
    }
}

#[test]
fn masked_row_softmax() {
    let mask = Tensor::from_rows(&[&[1.0, 0.0, 1.0], &[1.0, 1.0, 1.0], &[0.0, 1.0, 0.0]]);
    check("row_softmax", &[&[3, 3]], move |_, v| readout(v[0].row_softmax(&mask)?));
}

#[test]
fn reductions_and_losses() {
    check("sum", &[&[2, 3]], |_, v| v[0].sum()?.sigmoid());
    check("mean", &[&[2, 3]], |_, v| v[0].mean()?.sigmoid());
    check("mse", &[&[3, 2], &[3, 2]], |_, v| v[0].mse_loss(v[1]));
    check("mae", &[&[3, 2], &[3, 2]], |_, v| v[0].mae_loss(v[1]));
    let labels = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let mask = Tensor::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]);
    let l = labels.clone();
    check("bce", &[&[2, 2]], move |_, v| v[0].sigmoid()?.bce_loss(&l));
    check("bce_masked", &[&[2, 2]], move |_, v| v[0].sigmoid()?.bce_loss_masked(&labels, &mask));
}

#[test]
fn structural_ops() {
    check("slice", &[&[12]], |_, v| readout(v[0].slice(2, &[2, 3])?));
    check("reshape", &[&[2, 6]], |_, v| readout(v[0].reshape(&[3, 4])?));
    check("gather_rows", &[&[4, 2]], |_, v| readout(v[0].gather_rows(&[3, 0, 3, 1])?));
    check("slice_rows", &[&[5, 2]], |_, v| readout(v[0].slice_rows(1, 4)?));
    check("concat_rows", &[&[2, 3], &[1, 3]], |t, v| readout(t.concat_rows(&[v[0], v[1]])?));
    check("concat_cols", &[&[2, 3], &[2, 1]], |t, v| readout(t.concat_cols(&[v[0], v[1]])?));
    check("outer_add", &[&[3], &[4]], |t, v| readout(t.outer_add(v[0], v[1])?));
    check("sum_of", &[&[2, 2], &[2, 2], &[2, 2]], |t, v| readout(t.sum_of(v)?));
    check("mean_of", &[&[2, 2], &[2, 2], &[2, 2]], |t, v| readout(t.mean_of(v)?));
    check("max_of", &[&[2, 2], &[2, 2], &[2, 2]], |t, v| readout(t.max_of(v)?));
}

#[test]
fn matmul_is_associative() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (r, k, m, c) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let a = rand_t(&mut rng, &[r, k]);
        let b = rand_t(&mut rng, &[k, m]);
        let c = rand_t(&mut rng, &[m, c]);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) < 1e-9);
    }
}

#[test]
fn fan_out_gradient_is_the_sum_of_paths() {
    // f(x) = sum(x * x) + sum(3x)  ->  df/dx = 2x + 3
    let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let tape = Tape::new();
    let v = tape.param(&x);
    let f = v.mul(v).unwrap().sum().unwrap().add(v.scale(3.0).unwrap().sum().unwrap()).unwrap();
    let g = f.backward().unwrap().get_or_zeros(v);
    let oracle: Vec<f64> = x.data().iter().map(|x| 2.0 * x + 3.0).collect();
    assert_eq!(g, oracle);
}

#[test]
fn ops_do_not_mutate_their_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_t(&mut rng, &[3, 3]);
    let before = a.clone();
    let tape = Tape::new();
    let v = tape.param(&a);
    let out = v.matmul(v.transpose().unwrap()).unwrap().relu().unwrap().sum().unwrap();
    out.backward().unwrap();
    assert_eq!(a, before);
    assert_eq!(tape.leaf(&a).value(), before);
}
