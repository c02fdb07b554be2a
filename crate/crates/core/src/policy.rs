//! The augmentation policy `φ`: per stage, operation-selection logits and
//! per-op magnitude and probability parameters, applied as `K` sequential
//! stages of Gumbel-softmax operation selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, OpKind};
use crate::autodiff::{sigmoid, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const NUM_OPS: usize = 14;
pub const NUM_MAGNITUDES: usize = 11;
/// Learnable parameters per stage: selection logits, magnitudes, probabilities.
pub const PARAMS_PER_STAGE: usize = NUM_OPS + NUM_MAGNITUDES + NUM_OPS;

/// Raw (pre-activation) initial value of every magnitude and probability;
/// `sigmoid(0.5) ≈ 0.62`.
pub const INIT_RAW: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageParams {
    /// Parameterize `π = softmax(select_logits)`, one per op in [`OpKind::ALL`] order.
    pub select_logits: Vec<f64>,
    /// Pre-sigmoid magnitudes of the eleven magnitude-bearing ops.
    pub raw_mu: Vec<f64>,
    /// Pre-sigmoid application probabilities, one per op.
    pub raw_p: Vec<f64>,
}

impl StageParams {
    fn uniform() -> Self {
        Self {
            select_logits: vec![0.0; NUM_OPS],
            raw_mu: vec![INIT_RAW; NUM_MAGNITUDES],
            raw_p: vec![INIT_RAW; NUM_OPS],
        }
    }

    pub fn pi(&self) -> Vec<f64> {
        softmax(&self.select_logits)
    }

    pub fn mu(&self) -> Vec<f64> {
        self.raw_mu.iter().map(|&v| sigmoid(v)).collect()
    }

    pub fn p(&self) -> Vec<f64> {
        self.raw_p.iter().map(|&v| sigmoid(v)).collect()
    }

    fn validate(&self, k: usize) -> Result<()> {
        let lens = [
            ("select_logits", self.select_logits.len(), NUM_OPS),
            ("raw_mu", self.raw_mu.len(), NUM_MAGNITUDES),
            ("raw_p", self.raw_p.len(), NUM_OPS),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::InvalidInput(format!("stage {k} {name} has {got} entries, expected {want}")));
            }
        }
        let all = self.select_logits.iter().chain(&self.raw_mu).chain(&self.raw_p);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("stage {k} policy parameters")));
        }
        Ok(())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    pub stages: Vec<StageParams>,
    /// Gumbel-softmax temperature `τ` of the operation selection.
    pub temperature: f64,
    /// Temperature of the relaxed Bernoulli application gate.
    pub bernoulli_temperature: f64,
}

/// Uniform selection and `sigmoid(0.5)` magnitudes and probabilities.
///
/// The initialization is deterministic; `seed` is accepted so every
/// initializer in the crate has the same signature.
pub fn init_policy(k_stages: usize, _seed: u64) -> Result<PolicyParams> {
    PolicyParams::new(k_stages, 0.05)
}

impl PolicyParams {
    pub fn new(k_stages: usize, temperature: f64) -> Result<Self> {
        if k_stages == 0 {
            return Err(Error::InvalidInput("a policy needs at least one stage".into()));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            stages: (0..k_stages).map(|_| StageParams::uniform()).collect(),
            temperature,
            bernoulli_temperature: temperature,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// `(11 + 14 + 14) · K`.
    pub fn num_params(&self) -> usize {
        PARAMS_PER_STAGE * self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidInput("a policy needs at least one stage".into()));
        }
        for t in [self.temperature, self.bernoulli_temperature] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidInput(format!("temperature must be positive, got {t}")));
            }
        }
        self.stages.iter().enumerate().try_for_each(|(k, s)| s.validate(k))
    }

    /// Tensors in the order `[stage0.select_logits, stage0.raw_mu,
    /// stage0.raw_p, stage1.select_logits, …]`.
    pub fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (k, s) in self.stages.iter().enumerate() {
            set.push(format!("stage{k}.select_logits"), &[NUM_OPS], s.select_logits.clone())
                .and_then(|_| set.push(format!("stage{k}.raw_mu"), &[NUM_MAGNITUDES], s.raw_mu.clone()))
                .and_then(|_| set.push(format!("stage{k}.raw_p"), &[NUM_OPS], s.raw_p.clone()))
                .expect("stage vectors have fixed lengths");
        }
        set
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.stages
            .iter()
            .flat_map(|s| s.select_logits.iter().chain(&s.raw_mu).chain(&s.raw_p).copied())
            .collect()
    }

    /// Overwrites every raw parameter from a vector laid out as [`Self::flatten`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        for (s, chunk) in self.stages.iter_mut().zip(flat.chunks(PARAMS_PER_STAGE)) {
            s.select_logits.copy_from_slice(&chunk[..NUM_OPS]);
            s.raw_mu.copy_from_slice(&chunk[NUM_OPS..NUM_OPS + NUM_MAGNITUDES]);
            s.raw_p.copy_from_slice(&chunk[NUM_OPS + NUM_MAGNITUDES..]);
        }
        Ok(())
    }

    pub fn snapshot(&self, epoch: usize) -> PolicySnapshot {
        PolicySnapshot {
            epoch,
            stages: self
                .stages
                .iter()
                .map(|s| StageSnapshot {
                    pi: s.pi(),
                    mu: s.mu(),
                    p: s.p(),
                })
                .collect(),
        }
    }

    /// [`apply_policy`] on this policy's current values with noise drawn
    /// from `seed`. The result carries no gradient.
    pub fn sample_and_apply(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        self.validate()?;
        let batch = x.shape().first().copied().unwrap_or(0);
        let noise = PolicyNoise::from_seed(seed, self.num_stages(), batch);
        apply_policy(&self.to_param_set().to_tensors(), x, &noise, &self.temperatures())
    }

    pub fn temperatures(&self) -> Temperatures {
        Temperatures {
            select: self.temperature,
            bernoulli: self.bernoulli_temperature,
        }
    }
}

/// Free function form of [`PolicyParams::snapshot`].
pub fn snapshot(params: &PolicyParams, epoch: usize) -> PolicySnapshot {
    params.snapshot(epoch)
}

/// Effective (post-activation) policy values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSnapshot {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub p: Vec<f64>,
}

impl StageSnapshot {
    /// Effective magnitude of `kind`, or `None` for magnitude-free ops.
    pub fn mu_of(&self, kind: OpKind) -> Option<f64> {
        kind.magnitude_index().map(|i| self.mu[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub epoch: usize,
    pub stages: Vec<StageSnapshot>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperatures {
    pub select: f64,
    pub bernoulli: f64,
}

/// Noise for one stage of one batch: Gumbel samples `(B, 14)` for the
/// selection and one logistic sample per image for the application gate.
#[derive(Clone, Debug, PartialEq)]
pub struct StageNoise {
    pub gumbel: Vec<f64>,
    pub logistic: Vec<f64>,
}

/// Pre-drawn noise for all stages of a batch. Holding the noise fixed makes
/// the augmented batch a deterministic, differentiable function of `φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNoise {
    pub batch: usize,
    pub stages: Vec<StageNoise>,
}

impl PolicyNoise {
    pub fn sample(rng: &mut impl Rng, stages: usize, batch: usize) -> Self {
        let stages = (0..stages)
            .map(|_| StageNoise {
                gumbel: (0..batch * NUM_OPS).map(|_| -(-open_uniform(rng).ln()).ln()).collect(),
                logistic: (0..batch).map(|_| augment::logistic(rng)).collect(),
            })
            .collect();
        Self { batch, stages }
    }

    pub fn from_seed(seed: u64, stages: usize, batch: usize) -> Self {
        Self::sample(&mut ChaCha8Rng::seed_from_u64(seed), stages, batch)
    }

    /// All-zero noise: selection follows `argmax π` and the gate is
    /// `sigmoid(logit p / τ_b)`.
    pub fn zeros(stages: usize, batch: usize) -> Self {
        Self {
            batch,
            stages: (0..stages)
                .map(|_| StageNoise {
                    gumbel: vec![0.0; batch * NUM_OPS],
                    logistic: vec![0.0; batch],
                })
                .collect(),
        }
    }
}

/// Uniform sample in the open interval (0, 1).
fn open_uniform(rng: &mut impl Rng) -> f64 {
    loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            return u;
        }
    }
}

/// Selected op index and relaxed one-hot `u` for each image of one stage.
pub fn select_ops(logits: &Tensor, gumbel: &[f64], batch: usize, tau: f64) -> Result<(Vec<usize>, Tensor)> {
    if gumbel.len() != batch * NUM_OPS || logits.numel() != NUM_OPS {
        return Err(Error::InvalidInput(format!(
            "selection noise of length {} for batch {batch} and {} logits",
            gumbel.len(),
            logits.numel()
        )));
    }
    let log_pi = logits.reshape(&[1, NUM_OPS])?.log_softmax()?;
    let g = Tensor::new(&[batch, NUM_OPS], gumbel.to_vec())?;
    let u = log_pi.add(&g)?.scale(1.0 / tau).softmax()?;
    let chosen = u
        .data()
        .chunks(NUM_OPS)
        .map(|row| {
            // first maximum wins
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect();
    Ok((chosen, u))
}

/// Applies all stages of the policy `phi` (tensors laid out as
/// [`PolicyParams::to_param_set`]) to `x` with frozen `noise`.
///
/// Per image and stage, the op `i = argmax u` of a Gumbel-softmax sample
/// `u` is applied through its relaxed Bernoulli gate and multiplied by
/// `u_i / SG(u_i)`: exactly one in value, but it routes gradient into the
/// selection logits.
pub fn apply_policy(phi: &[Tensor], x: &Tensor, noise: &PolicyNoise, temps: &Temperatures) -> Result<Tensor> {
    let k = noise.stages.len();
    if phi.len() != 3 * k {
        return Err(Error::InvalidInput(format!(
            "{} policy tensors for {k} noise stages",
            phi.len()
        )));
    }
    let batch = x.shape().first().copied().unwrap_or(0);
    if batch != noise.batch {
        return Err(Error::InvalidInput(format!("noise for batch {} applied to batch {batch}", noise.batch)));
    }
    let mut cur = x.clone();
    for (stage, sn) in noise.stages.iter().enumerate() {
        let (logits, raw_mu, raw_p) = (&phi[3 * stage], &phi[3 * stage + 1], &phi[3 * stage + 2]);
        if raw_mu.numel() != NUM_MAGNITUDES || raw_p.numel() != NUM_OPS {
            return Err(Error::InvalidInput(format!("stage {stage} policy tensors have wrong sizes")));
        }
        let (chosen, u) = select_ops(logits, &sn.gumbel, batch, temps.select)?;
        let mut next: Option<Tensor> = None;
        for kind in OpKind::ALL {
            let op = kind.index();
            // Ops nobody selected still run on an empty batch, so the
            // recorded graph has the same shape whatever the draw.
            let rows: Vec<usize> = (0..batch).filter(|&b| chosen[b] == op).collect();
            let sub = cur.index_rows(&rows)?;
            let mu = match kind.magnitude_index() {
                Some(m) => raw_mu.gather(vec![m], &[])?.sigmoid(),
                None => Tensor::scalar(0.0),
            };
            let p = raw_p.gather(vec![op], &[])?.sigmoid();
            let gate_noise: Vec<f64> = rows.iter().map(|&b| sn.logistic[b]).collect();
            let out = augment::apply_with_probability_noise(kind, &sub, &mu, &p, temps.bernoulli, &gate_noise)?;
            let ui = u.gather(rows.iter().map(|&b| b * NUM_OPS + op).collect(), &[rows.len(), 1, 1, 1])?;
            let scale = ui.div(&ui.detach())?;
            let placed = out.mul(&scale)?.scatter_rows(&rows, batch)?;
            next = Some(match next {
                Some(acc) => acc.add(&placed)?,
                None => placed,
            });
        }
        if let Some(n) = next {
            cur = n;
        }
    }
    Ok(cur)
}
