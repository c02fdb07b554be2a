#![allow(dead_code)]

use hyperaug::autodiff::{backward, Tape, Tensor};
use hyperaug::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central finite-difference gradient of `f` with respect to every input.
pub fn fd_grad(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    inputs
        .iter()
        .enumerate()
        .map(|(k, x)| {
            (0..x.numel())
                .map(|i| {
                    let eval = |delta: f64| {
                        let mut vals = inputs.to_vec();
                        let mut d = x.to_vec();
                        d[i] += delta;
                        vals[k] = Tensor::new(x.shape(), d).unwrap();
                        f(&vals).unwrap().item()
                    };
                    (eval(h) - eval(-h)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Reverse-mode gradient of `f` with respect to every input.
pub fn ad_grad(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let leaves = tape.leaves(inputs);
    let out = f(&leaves).unwrap();
    backward(&out, &leaves, false)
        .unwrap()
        .iter()
        .map(|g| g.to_vec())
        .collect()
}

/// Largest per-input relative error between reverse mode and central differences.
pub fn grad_check(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor], h: f64) -> f64 {
    let ad = ad_grad(f, inputs);
    let fd = fd_grad(f, inputs, h);
    ad.iter()
        .zip(&fd)
        .map(|(a, b)| rel_err(a, b))
        .fold(0.0, f64::max)
}
