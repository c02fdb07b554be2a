//! Self-checks run by `hyperaug verify`: every check compares the library
//! against an independent closed form, dense solve or finite difference.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_op, OpKind};
use crate::autodiff::{backward, flatten_tensors, hvp, with_precision, ParamSet, Precision, Tape, Tensor};
use crate::error::Result;
use crate::hypergrad::{hypergradient, neumann_inverse_hvp, unrolled_hypergradient, HypergradConfig, UnrollConfig};
use crate::models::{loss_ce, ModelSpec};
use crate::policy::{init_policy, NUM_OPS};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<40} {:>9.1} ms  {}", self.name, self.millis, self.detail)
    }
}

fn timed(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        name,
        passed,
        detail,
        millis: start.elapsed().as_secs_f64() * 1e3,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-300)
}

/// Gaussian elimination with partial pivoting on a dense row-major system.
fn dense_solve(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .expect("non-empty range");
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            x.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = m[row * n + col] / m[col * n + col];
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
            x[row] -= factor * x[col];
        }
    }
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row * n + k] * x[k]).sum();
        x[row] = (x[row] - s) / m[row * n + row];
    }
    x
}

fn params(name: &str, values: Vec<f64>) -> Result<ParamSet> {
    let n = values.len();
    ParamSet::new().with(name, &[n], values)
}

fn neumann_closed_form() -> Result<(bool, String)> {
    let f = |th: &[Tensor], _: &[Tensor]| Ok(th[0].square().sum());
    let cfg = |j| HypergradConfig {
        alpha: 0.1,
        neumann_terms: j,
        ..Default::default()
    };
    let theta = params("theta", vec![0.7])?;
    let got = neumann_inverse_hvp(&f, &theta, &ParamSet::new(), &[1.0], &cfg(5))?[0];
    let oracle = 0.1 * (1.0 - 0.8f64.powi(6)) / (1.0 - 0.8);
    let limit = neumann_inverse_hvp(&f, &theta, &ParamSet::new(), &[1.0], &cfg(200))?[0];
    let ok = (got - oracle).abs() < 1e-9 && (got - 0.368928).abs() < 1e-6 && (limit - 0.5).abs() < 1e-6;
    Ok((ok, format!("J=5: {got:.9} (series {oracle:.9}); J=200: {limit:.9} (1/a = 0.5)")))
}

fn analytic_bilevel() -> Result<(bool, String)> {
    let f = |th: &[Tensor], ph: &[Tensor]| Ok(th[0].sub(&ph[0])?.square().sum().scale(0.5));
    let g = |th: &[Tensor]| Ok(th[0].square().sum().scale(0.5));
    let cfg = HypergradConfig {
        alpha: 0.5,
        neumann_terms: 20,
        ..Default::default()
    };
    let res = hypergradient(&f, &g, &params("theta", vec![1.0])?, &params("phi", vec![1.0])?, &cfg)?;
    let got = res.grad_phi[0];
    Ok(((got - 1.0).abs() < 1e-4, format!("dg/dphi = {got:.8}, best-response oracle 1")))
}

fn random_quadratics() -> Result<(bool, String)> {
    let (n, k) = (10, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // A = MᵀM / n + ½ I is symmetric positive definite.
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|r| m[r * n + i] * m[r * n + j]).sum::<f64>() / n as f64;
            }
            a[i * n + i] += 0.5;
        }
        let b: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let phi: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Gershgorin bound on the largest eigenvalue keeps αλ_max < 1.
        let bound = (0..n).map(|i| (0..n).map(|j| a[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max);
        let cfg = HypergradConfig {
            alpha: 0.9 / bound,
            neumann_terms: 200,
            ..Default::default()
        };
        let (a_t, b_t, t_t) = (Tensor::new(&[n, n], a.clone())?, Tensor::new(&[n, k], b.clone())?, Tensor::from_vec(t.clone()));
        let f = |th: &[Tensor], ph: &[Tensor]| {
            let row = th[0].reshape(&[1, n])?;
            let quad = row.matmul(&a_t)?.matmul(&th[0].reshape(&[n, 1])?)?.sum().scale(0.5);
            quad.sub(&row.matmul(&b_t)?.matmul(&ph[0].reshape(&[k, 1])?)?.sum())
        };
        let g = |th: &[Tensor]| Ok(th[0].sub(&t_t)?.square().sum().scale(0.5));
        let got = hypergradient(&f, &g, &params("theta", theta.clone())?, &params("phi", phi)?, &cfg)?.grad_phi;
        // Exact: −∇g · A⁻¹ · (−B) = Bᵀ A⁻¹ (θ − t).
        let grad_g: Vec<f64> = theta.iter().zip(&t).map(|(x, y)| x - y).collect();
        let u = dense_solve(&a, &grad_g, n);
        let exact: Vec<f64> = (0..k).map(|j| (0..n).map(|i| b[i * k + j] * u[i]).sum()).collect();
        worst = worst.max(rel_err(&got, &exact));
    }
    Ok((worst < 1e-3, format!("worst relative error {worst:.2e} over 10 problems (tolerance 1e-3)")))
}

fn hvp_vs_finite_differences() -> Result<(bool, String)> {
    let spec = ModelSpec::smallcnn([1, 8, 8], 3);
    let theta = spec.init(5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::new(&[4, 1, 8, 8], (0..256).map(|_| rng.gen::<f64>()).collect())?;
    let labels = vec![0, 1, 2, 1];
    let f = |th: &[Tensor]| loss_ce(&spec.forward(th, &x)?, &labels);
    let grad_at = |flat: &[f64]| -> Result<Vec<f64>> {
        let p = theta.unflatten(flat)?;
        let tape = Tape::new();
        let leaves = p.leaves(&tape);
        Ok(flatten_tensors(&backward(&f(&leaves)?, &leaves, false)?))
    };
    let base = theta.flatten();
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let v: Vec<f64> = (0..base.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Unit directions keep the ±h probes inside one linear region of the
        // ReLU/max-pool network; long directions straddle kinks.
        let len = norm(&v);
        let v: Vec<f64> = v.iter().map(|x| x / len).collect();
        let got = hvp(&f, &theta, &v)?;
        let h = 1e-5;
        let plus: Vec<f64> = base.iter().zip(&v).map(|(t, d)| t + h * d).collect();
        let minus: Vec<f64> = base.iter().zip(&v).map(|(t, d)| t - h * d).collect();
        let (gp, gm) = (grad_at(&plus)?, grad_at(&minus)?);
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        worst = worst.max(rel_err(&got, &fd));
    }
    Ok((worst < 1e-3, format!("{} params, worst relative error {worst:.2e}", base.len())))
}

fn unrolled_one_step() -> Result<(bool, String)> {
    let f = |_: usize, th: &[Tensor], ph: &[Tensor]| Ok(th[0].sub(&ph[0])?.square().sum().scale(0.5));
    let g = |th: &[Tensor]| Ok(th[0].square().sum().scale(0.5));
    let phi = 0.7;
    let res = unrolled_hypergradient(&f, &g, &params("theta", vec![0.0])?, &params("phi", vec![phi])?, &UnrollConfig::sgd(1, 1.0))?;
    let got = res.grad_phi[0];
    Ok(((got - phi).abs() < 1e-12, format!("dg/dphi = {got}, hand derivation {phi}")))
}

fn augmentation_gradients() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::new(&[2, 3, 8, 8], (0..384).map(|_| rng.gen::<f64>()).collect())?;
    let w = Tensor::new(&[2, 3, 8, 8], (0..384).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let loss = |kind: OpKind, m: &Tensor| -> Result<Tensor> { Ok(apply_op(kind, &x, m)?.mul(&w)?.sum()) };
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for kind in OpKind::with_magnitude().filter(|k| k.is_smooth()) {
        count += 1;
        let tape = Tape::new();
        let leaf = tape.leaf(&Tensor::scalar(0.37));
        let g = backward(&loss(kind, &leaf)?, &[leaf], false)?[0].item();
        let h = 1e-6;
        let fd = (loss(kind, &Tensor::scalar(0.37 + h))?.item() - loss(kind, &Tensor::scalar(0.37 - h))?.item()) / (2.0 * h);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-8));
    }
    Ok((worst < 1e-3 && count == 10, format!("{count} ops, worst relative error {worst:.2e}")))
}

fn policy_initialization() -> Result<(bool, String)> {
    let policy = init_policy(2, 0)?;
    let snap = policy.snapshot(0);
    let expected = 1.0 / (1.0 + (-0.5f64).exp());
    let uniform = 1.0 / NUM_OPS as f64;
    let ok = policy.num_params() == 78
        && snap.stages.iter().all(|s| {
            s.p.iter().chain(&s.mu).all(|v| (v - expected).abs() < 1e-12) && s.pi.iter().all(|v| (v - uniform).abs() < 1e-12)
        });
    Ok((ok, format!("{} parameters, p = mu = {expected:.6}", policy.num_params())))
}

/// Runs every check in 64-bit precision.
pub fn run_checks() -> Vec<Check> {
    with_precision(Precision::F64, || {
        vec![
            timed("neumann series closed form", neumann_closed_form),
            timed("analytic bilevel hypergradient", analytic_bilevel),
            timed("quadratic bilevel vs dense inverse", random_quadratics),
            timed("hessian-vector product vs differences", hvp_vs_finite_differences),
            timed("unrolled one-step derivation", unrolled_one_step),
            timed("augmentation magnitude gradients", augmentation_gradients),
            timed("policy initialization", policy_initialization),
        ]
    })
}
