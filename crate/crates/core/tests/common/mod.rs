//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use dda_core::{Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_grads(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Vec<Vec<f64>> {
    let eval = |xs: &[Tensor<f64>]| f(xs).unwrap().item().unwrap();
    inputs
        .iter()
        .enumerate()
        .map(|(which, x)| {
            (0..x.numel())
                .map(|i| {
                    let bump = |delta: f64| {
                        let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
                        let mut d = x.to_vec();
                        d[i] += delta;
                        xs[which] = Tensor::new(x.shape(), d).unwrap();
                        eval(&xs)
                    };
                    (bump(h) - bump(-h)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Reverse-mode gradients of the same function, every input a leaf.
pub fn analytic_grads(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
) -> Vec<Vec<f64>> {
    let tape = Tape::<f64>::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let y = f(&leaves).unwrap();
    let g = tape.backward(&y).unwrap();
    leaves.iter().map(|l| g.get(l).unwrap().to_vec()).collect()
}

/// Elementwise relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(a: &[Vec<f64>], n: &[Vec<f64>], floor: f64) -> f64 {
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn grad_check(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
) -> f64 {
    let a = analytic_grads(f, inputs);
    let n = numeric_grads(f, inputs, 1e-5);
    max_rel_err(&a, &n, 1e-3)
}
