mod common;

use common::*;
use hyperaug::augment::{apply_with_probability_noise, OpKind};
use hyperaug::autodiff::{backward, Tape, Tensor};
use hyperaug::policy::{
    apply_policy, init_policy, select_ops, snapshot, PolicyNoise, PolicyParams, PolicySnapshot, Temperatures,
    NUM_OPS,
};
use rand::Rng;

const SIG_HALF: f64 = 0.622_459_331_201_854_6;

fn images(seed: u64, batch: usize) -> Tensor {
    uniform(&mut rng(seed), &[batch, 3, 8, 8], 0.05, 0.95)
}

#[test]
fn initial_policy_values() {
    let p = init_policy(2, 0).unwrap();
    assert_eq!(p.num_params(), 78);
    assert_eq!(p.to_param_set().total_dim(), 78);
    let snap = p.snapshot(0);
    for s in &snap.stages {
        for &pi in &s.pi {
            assert!((pi - 1.0 / 14.0).abs() < 1e-15);
        }
        assert!(s.p.iter().chain(&s.mu).all(|&v| (v - SIG_HALF).abs() < 1e-15));
        assert_eq!(s.mu.len(), 11);
        assert_eq!(s.mu_of(OpKind::Rotate), Some(s.mu[4]));
        assert_eq!(s.mu_of(OpKind::Invert), None);
    }
    assert!((snap.stages[0].p[0] - 0.622459).abs() < 1e-6);
    assert_eq!(p.temperature, 0.05);
}

#[test]
fn parameter_count_scales_with_stages() {
    for k in 1..5 {
        assert_eq!(init_policy(k, 0).unwrap().num_params(), 39 * k);
    }
}

#[test]
fn snapshot_round_trips_through_json() {
    let mut p = init_policy(2, 0).unwrap();
    let mut r = rng(1);
    let flat: Vec<f64> = (0..78).map(|_| r.gen_range(-3.0..3.0)).collect();
    p.set_flat(&flat).unwrap();
    let snap = snapshot(&p, 7);
    assert!(snap.stages.iter().all(|s| s.pi.iter().chain(&s.mu).chain(&s.p).all(|&v| v > 0.0 && v < 1.0)));
    let line = serde_json::to_string(&snap).unwrap();
    let back: PolicySnapshot = serde_json::from_str(&line).unwrap();
    assert_eq!(back, snap);
    for (a, b) in back.stages.iter().zip(&snap.stages) {
        for (x, y) in a.pi.iter().chain(&a.mu).chain(&a.p).zip(b.pi.iter().chain(&b.mu).chain(&b.p)) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    let params_json = serde_json::to_string(&p).unwrap();
    assert_eq!(serde_json::from_str::<PolicyParams>(&params_json).unwrap(), p);
}

#[test]
fn zero_noise_at_unit_temperature_recovers_pi() {
    let logits: Vec<f64> = (0..NUM_OPS).map(|i| ((i * 7) % 5) as f64 * 0.3 - (i as f64) * 0.01).collect();
    let t = Tensor::from_vec(logits.clone());
    let (chosen, u) = select_ops(&t, &vec![0.0; 3 * NUM_OPS], 3, 1.0).unwrap();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let pi: Vec<f64> = logits.iter().map(|l| (l - max).exp() / total).collect();
    for row in u.data().chunks(NUM_OPS) {
        assert!(rel_err(row, &pi) < 1e-12);
    }
    let argmax = (0..NUM_OPS).max_by(|&a, &b| pi[a].total_cmp(&pi[b]).then(b.cmp(&a))).unwrap();
    assert!(chosen.iter().all(|&c| c == argmax));
}

/// Hard selection with the same noise: apply the argmax op of each image
/// through its gate, one image at a time.
fn hard_reference(p: &PolicyParams, x: &Tensor, noise: &PolicyNoise) -> Vec<f64> {
    let batch = x.shape()[0];
    let mut cur: Vec<Tensor> = (0..batch).map(|b| x.index_rows(&[b]).unwrap()).collect();
    for (stage, sn) in p.stages.iter().zip(&noise.stages) {
        let pi = stage.pi();
        for (b, img) in cur.iter_mut().enumerate() {
            let scores: Vec<f64> = (0..NUM_OPS).map(|i| pi[i].ln() + sn.gumbel[b * NUM_OPS + i]).collect();
            let op = (0..NUM_OPS).fold(0, |best, i| if scores[i] > scores[best] { i } else { best });
            let kind = OpKind::ALL[op];
            let mu = Tensor::scalar(kind.magnitude_index().map_or(0.0, |m| stage.mu()[m]));
            let pr = Tensor::scalar(stage.p()[op]);
            *img = apply_with_probability_noise(kind, img, &mu, &pr, p.bernoulli_temperature, &[sn.logistic[b]]).unwrap();
        }
    }
    cur.iter().flat_map(|t| t.to_vec()).collect()
}

#[test]
fn output_equals_hard_selection_with_the_same_noise() {
    for seed in 0..5 {
        let p = init_policy(2, 0).unwrap();
        let x = images(seed, 12);
        let noise = PolicyNoise::from_seed(seed, 2, 12);
        let out = apply_policy(&p.to_param_set().to_tensors(), &x, &noise, &p.temperatures()).unwrap();
        let reference = hard_reference(&p, &x, &noise);
        let worst = out.data().iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "seed {seed}: {worst:e}");
    }
}

#[test]
fn near_zero_temperature_selects_one_hot() {
    let mut p = init_policy(1, 0).unwrap();
    p.temperature = 1e-4;
    let x = images(3, 6);
    let noise = PolicyNoise::from_seed(3, 1, 6);
    let (chosen, u) = select_ops(&p.to_param_set().to_tensors()[0], &noise.stages[0].gumbel, 6, 1e-4).unwrap();
    for (b, row) in u.data().chunks(NUM_OPS).enumerate() {
        assert!((row[chosen[b]] - 1.0).abs() < 1e-9);
    }
    let out = apply_policy(&p.to_param_set().to_tensors(), &x, &noise, &p.temperatures()).unwrap();
    assert!(rel_err(out.data(), &hard_reference(&p, &x, &noise)) < 1e-15);
}

#[test]
fn sample_and_apply_is_deterministic() {
    let p = init_policy(2, 0).unwrap();
    let x = images(4, 8);
    let a = p.sample_and_apply(&x, 99).unwrap();
    let b = p.sample_and_apply(&x, 99).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(!a.is_linked());
}

#[test]
fn selection_frequencies_follow_pi() {
    let logits: Vec<f64> = (0..NUM_OPS).map(|i| (i as f64 * 0.37).sin()).collect();
    let n = 100_000;
    let noise = PolicyNoise::from_seed(5, 1, n);
    let (chosen, _) = select_ops(&Tensor::from_vec(logits.clone()), &noise.stages[0].gumbel, n, 0.05).unwrap();
    let mut counts = [0usize; NUM_OPS];
    for c in chosen {
        counts[c] += 1;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let tv: f64 = (0..NUM_OPS)
        .map(|i| ((logits[i] - max).exp() / total - counts[i] as f64 / n as f64).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.01, "total variation {tv}");
}

/// Policy concentrated on smooth ops so finite differences are meaningful.
fn smooth_policy(temperature: f64) -> PolicyParams {
    let mut p = init_policy(2, 0).unwrap();
    p.temperature = temperature;
    p.bernoulli_temperature = 0.5;
    let favoured = [OpKind::Rotate, OpKind::Solarize, OpKind::Contrast, OpKind::ShearY, OpKind::Brightness];
    let mut r = rng(6);
    for s in &mut p.stages {
        for kind in OpKind::ALL {
            s.select_logits[kind.index()] = if favoured.contains(&kind) { 4.0 } else { -30.0 };
        }
        for v in s.raw_mu.iter_mut().chain(s.raw_p.iter_mut()) {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    p
}

#[test]
fn magnitudes_and_probabilities_match_finite_differences() {
    let p = smooth_policy(0.05);
    let x = images(7, 10);
    let noise = PolicyNoise::from_seed(7, 2, 10);
    let w = uniform(&mut rng(8), &[10, 3, 8, 8], -1.0, 1.0);
    let temps = p.temperatures();
    let loss = |phi: &[Tensor]| apply_policy(phi, &x, &noise, &temps)?.mul(&w).map(|t| t.sum());
    let params = p.to_param_set().to_tensors();
    let ad = ad_grad(&loss, &params);
    let fd = fd_grad(&loss, &params, 1e-6);
    // raw_mu and raw_p of both stages
    for idx in [1, 2, 4, 5] {
        let err = rel_err(&ad[idx], &fd[idx]);
        assert!(err < 1e-3, "tensor {idx}: {err:e}");
        assert!(ad[idx].iter().any(|&g| g != 0.0));
    }
}

#[test]
fn selection_logits_get_the_straight_through_gradient() {
    // The value does not depend on the logits (the scale is exactly one), so
    // the oracle differentiates the scale's numerator alone:
    // F(ℓ) = Σ_b w·out_b · u_{b,i_b}(ℓ) / u_{b,i_b}(ℓ₀) with i_b held fixed.
    let p = smooth_policy(0.5);
    let temps: Temperatures = p.temperatures();
    let mut single = p.clone();
    single.stages.truncate(1);
    let x = images(9, 10);
    let noise = PolicyNoise::from_seed(9, 1, 10);
    let w = uniform(&mut rng(10), &[10, 3, 8, 8], -1.0, 1.0);
    let tensors = single.to_param_set().to_tensors();

    let tape = Tape::new();
    let leaves = tape.leaves(&tensors);
    let out = apply_policy(&leaves, &x, &noise, &temps).unwrap();
    let g = backward(&out.mul(&w).unwrap().sum(), &leaves[..1], false).unwrap();

    let gumbel = &noise.stages[0].gumbel;
    let u_of = |logits: &[f64]| -> Vec<f64> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
        let mut u = Vec::new();
        for b in 0..10 {
            let s: Vec<f64> = (0..NUM_OPS).map(|i| (logits[i] - lse + gumbel[b * NUM_OPS + i]) / temps.select).collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            u.extend(s.iter().map(|v| (v - m).exp() / z));
        }
        u
    };
    let base = single.stages[0].select_logits.clone();
    let u0 = u_of(&base);
    let chosen: Vec<usize> = (0..10)
        .map(|b| (0..NUM_OPS).fold(0, |best, i| if u0[b * NUM_OPS + i] > u0[b * NUM_OPS + best] { i } else { best }))
        .collect();
    let per_image: Vec<f64> = out
        .data()
        .chunks(3 * 64)
        .zip(w.data().chunks(3 * 64))
        .map(|(o, ww)| o.iter().zip(ww).map(|(a, b)| a * b).sum())
        .collect();
    let f = |logits: &[f64]| -> f64 {
        let u = u_of(logits);
        (0..10).map(|b| per_image[b] * u[b * NUM_OPS + chosen[b]] / u0[b * NUM_OPS + chosen[b]]).sum()
    };
    let h = 1e-6;
    let fd: Vec<f64> = (0..NUM_OPS)
        .map(|i| {
            let (mut plus, mut minus) = (base.clone(), base.clone());
            plus[i] += h;
            minus[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect();
    let err = rel_err(g[0].data(), &fd);
    assert!(err < 1e-3, "{err:e}");
    for &c in &chosen {
        assert!(g[0].data()[c] != 0.0);
    }

    // still nonzero at the default temperature
    let p005 = smooth_policy(0.05);
    let tape = Tape::new();
    let leaves = tape.leaves(&p005.to_param_set().to_tensors());
    let noise2 = PolicyNoise::from_seed(9, 2, 10);
    let out = apply_policy(&leaves, &x, &noise2, &p005.temperatures()).unwrap();
    let g = backward(&out.mul(&w).unwrap().sum(), &leaves[..1], false).unwrap();
    assert!(g[0].data().iter().any(|&v| v != 0.0));
}

#[test]
fn mismatched_noise_is_rejected() {
    let p = init_policy(2, 0).unwrap();
    let x = images(11, 4);
    let noise = PolicyNoise::from_seed(0, 2, 5);
    assert!(apply_policy(&p.to_param_set().to_tensors(), &x, &noise, &p.temperatures()).is_err());
    let noise = PolicyNoise::from_seed(0, 1, 4);
    assert!(apply_policy(&p.to_param_set().to_tensors(), &x, &noise, &p.temperatures()).is_err());
}
