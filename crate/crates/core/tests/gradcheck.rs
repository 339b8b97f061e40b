//! Every differentiable op against central finite differences (64-bit,
//! h = 1e-5) over ten seeds.

mod common;

use common::{grad_check, rng, uniform};
use dda_core::tensor::straight_through;
use dda_core::{Result, Tensor};

const SEEDS: u64 = 10;
const TOL: f64 = 1e-4;

/// Contracts an op's output with fixed random weights to get a scalar.
fn check(
    name: &str,
    shapes: &[&[usize]],
    lo: f64,
    hi: f64,
    op: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) {
    for seed in 0..SEEDS {
        let mut r = rng(seed * 7919 + name.len() as u64);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(&mut r, s, lo, hi)).collect();
        let out_shape = op(&inputs).unwrap().shape().to_vec();
        let weights = uniform(&mut r, &out_shape, -1.0, 1.0);
        let f = |xs: &[Tensor<f64>]| op(xs)?.mul(&weights).map(|t| t.sum_all());
        let err = grad_check(&f, &inputs);
        assert!(err < TOL, "{name} seed {seed}: max rel err {err:e}");
    }
}

#[test]
fn binary_ops_with_broadcasting() {
    check("add", &[&[3, 4], &[4]], -1.0, 1.0, |x| x[0].add(&x[1]));
    check("sub", &[&[3, 1], &[1, 4]], -1.0, 1.0, |x| x[0].sub(&x[1]));
    check("mul", &[&[2, 3, 4], &[3, 1]], -1.0, 1.0, |x| x[0].mul(&x[1]));
    check("div", &[&[3, 4], &[4]], 0.5, 2.0, |x| x[0].div(&x[1]));
    check("pow", &[&[3, 4], &[3, 4]], 0.5, 2.0, |x| x[0].pow(&x[1]));
}

#[test]
fn unary_ops() {
    check("exp", &[&[5]], -1.0, 1.0, |x| Ok(x[0].exp()));
    check("log", &[&[5]], 0.2, 3.0, |x| x[0].log());
    check("sqrt", &[&[5]], 0.2, 3.0, |x| x[0].sqrt());
    check("sigmoid", &[&[5]], -3.0, 3.0, |x| Ok(x[0].sigmoid()));
    check("softplus", &[&[5]], -3.0, 3.0, |x| Ok(x[0].softplus()));
    check("sin", &[&[5]], -3.0, 3.0, |x| Ok(x[0].sin()));
    check("cos", &[&[5]], -3.0, 3.0, |x| Ok(x[0].cos()));
    check("powf", &[&[5]], 0.2, 3.0, |x| Ok(x[0].powf(2.5)));
    check("affine", &[&[5]], -1.0, 1.0, |x| Ok(x[0].affine(-1.5, 0.25)));
    // kinks at 0 / clamp bounds are avoided by the input range
    check("relu", &[&[5]], 0.1, 1.0, |x| Ok(x[0].neg().relu()));
    check("clamp", &[&[5]], 0.1, 0.9, |x| Ok(x[0].clamp(0.0, 1.0)));
}

#[test]
fn contractions() {
    check("matmul", &[&[3, 4], &[4, 2]], -1.0, 1.0, |x| x[0].matmul(&x[1]));
    check("conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], -1.0, 1.0, |x| {
        x[0].conv2d(&x[1], Some(&x[2]), 1, 1)
    });
    check("conv2d_stride", &[&[1, 2, 6, 6], &[3, 2, 3, 3]], -1.0, 1.0, |x| {
        x[0].conv2d(&x[1], None, 2, 1)
    });
    check("pairwise", &[&[5, 3]], -1.0, 1.0, |x| x[0].pairwise_sq_distances());
}

#[test]
fn reductions_and_normalisers() {
    check("sum_axes", &[&[2, 3, 4]], -1.0, 1.0, |x| x[0].sum_axes(&[0, 2], false));
    check("mean_axes", &[&[2, 3, 4]], -1.0, 1.0, |x| x[0].mean_axes(&[1], true));
    check("softmax", &[&[3, 4]], -2.0, 2.0, |x| x[0].softmax(1));
    check("softmax0", &[&[3, 4]], -2.0, 2.0, |x| x[0].softmax(0));
    check("log_softmax", &[&[3, 4]], -2.0, 2.0, |x| x[0].log_softmax(1));
    check("l2_normalize", &[&[3, 4]], -1.0, 1.0, |x| x[0].l2_normalize(1, 1e-12));
}

#[test]
fn index_ops() {
    check("take", &[&[2, 3]], -1.0, 1.0, |x| x[0].take(vec![5, 0, 0, 3], &[2, 2]));
    check("gather_cols", &[&[3, 3]], -1.0, 1.0, |x| {
        x[0].gather_cols(&[vec![1, 2], vec![0, 2], vec![1, 0]])
    });
    check("concat", &[&[1, 3], &[2, 3]], -1.0, 1.0, |x| Tensor::concat(&[&x[0], &x[1]]));
    check("transpose", &[&[2, 3]], -1.0, 1.0, |x| x[0].transpose2d());
    check("rot90", &[&[1, 2, 3, 3]], -1.0, 1.0, |x| x[0].rot90(3));
    check("flip", &[&[1, 2, 3, 3]], -1.0, 1.0, |x| x[0].flip_w());
    check("reshape", &[&[2, 3]], -1.0, 1.0, |x| x[0].reshape(&[3, 2]));
}

#[test]
fn network_layers() {
    check("batch_norm_train", &[&[4, 3, 2, 2], &[3], &[3]], -1.0, 1.0, |x| {
        Ok(x[0].batch_norm_train(&x[1], &x[2], 1e-5)?.0)
    });
    check("batch_norm_eval", &[&[4, 3], &[3], &[3]], -1.0, 1.0, |x| {
        x[0].batch_norm_eval(&x[1], &x[2], &[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0], 1e-5)
    });
    check("avg_pool2d", &[&[2, 2, 4, 4]], -1.0, 1.0, |x| x[0].avg_pool2d(2));
    check("filter2d", &[&[2, 2, 5, 5], &[3, 3]], -1.0, 1.0, |x| x[0].filter2d(&x[1]));
}

#[test]
fn straight_through_uses_surrogate_gradient() {
    check("st_square", &[&[4]], -1.0, 1.0, |x| {
        // the forward value differs from the surrogate only by a constant
        straight_through(|t| Ok(t.square().add_scalar(3.0)), |t| Ok(t.square()), &x[0])
    });
}

#[test]
fn backward_is_deterministic() {
    let mut r = rng(3);
    let x = uniform(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    let run = || {
        let tape = dda_core::Tape::<f64>::new();
        let (xl, wl) = (tape.leaf(&x), tape.leaf(&w));
        let y = xl.conv2d(&wl, None, 1, 1).unwrap().relu().softmax(1).unwrap().log().unwrap();
        let g = y.sum_all().backward().unwrap();
        (g.get(&xl).unwrap().to_vec(), g.get(&wl).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn unreachable_leaves_get_zero_and_detached_output_errors() {
    let tape = dda_core::Tape::<f64>::new();
    let a = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.leaf(&Tensor::from_vec(vec![5.0]));
    let y = a.square().sum_all();
    let g = y.backward().unwrap();
    assert_eq!(g.get(&b).unwrap().data(), &[0.0]);
    assert_eq!(g.get(&a).unwrap().data(), &[2.0, 4.0]);
    // constants are never differentiated leaves
    assert!(g.get(&Tensor::from_vec(vec![1.0, 2.0])).is_none());
    assert!(Tensor::<f64>::scalar(1.0).backward().is_err());
    assert!(a.square().backward().is_err(), "non-scalar output");
}

#[test]
fn x_times_x_at_three() {
    let tape = dda_core::Tape::<f64>::new();
    let x = tape.leaf(&Tensor::scalar(3.0));
    let g = x.mul(&x).unwrap().backward().unwrap();
    assert_eq!(g.get(&x).unwrap().item().unwrap(), 6.0);
}
