//! The bilevel training loop: `s` SGD steps on policy-augmented training
//! batches, then one RMSprop step on the policy from the hypergradient of
//! the validation loss. The first `w` epochs train without augmentation and
//! leave the policy untouched.

use std::cell::RefCell;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, flatten_tensors, with_precision, ParamSet, Precision, Tape, Tensor};
use crate::data::{baseline_augment, epoch_batches, CyclicBatches, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::hypergrad::{hypergradient, unrolled_run, HypergradConfig, HypergradMethod, HypergradResult, UnrollConfig};
use crate::models::{error_rate, loss_ce, ModelSpec};
use crate::optim::{RmsProp, Sgd};
use crate::policy::{apply_policy, PolicyNoise, PolicyParams, PolicySnapshot};

/// What the policy does during a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Learn the policy from hypergradients.
    #[default]
    Madao,
    /// Apply the initial policy throughout, never updating it.
    FixedPolicy,
    /// No policy augmentation at all.
    NoAug,
}

/// Reaction to a diverging Neumann series in an outer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnDivergence {
    /// Leave the policy unchanged for this step and carry on.
    #[default]
    Skip,
    Abort,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Inner SGD steps `s` between policy updates.
    pub inner_steps: usize,
    /// Warm-up epochs `w` without augmentation.
    pub warmup_epochs: usize,
    pub inner_lr: f64,
    pub momentum: f64,
    pub policy_lr: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    /// Number of augmentation stages `K`.
    pub stages: usize,
    /// Gumbel-softmax temperature; the relaxed Bernoulli gate reuses it.
    pub temperature: f64,
    /// Apply the fixed crop (and, for natural images, flip) augmentation.
    pub baseline_augment: bool,
    pub drop_last: bool,
    /// Size of the validation minibatch used for `g`; defaults to `batch_size`.
    pub val_batch_size: Option<usize>,
    /// Batch size of the full-set evaluation passes.
    pub eval_batch_size: usize,
    pub on_divergence: OnDivergence,
    /// Record wall-clock time per epoch. Disable for byte-identical metrics.
    pub record_wall_time: bool,
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub method: Method,
    #[serde(skip)]
    pub precision: Precision,
    #[serde(skip)]
    pub hypergrad: HypergradConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            inner_steps: 30,
            warmup_epochs: 20,
            inner_lr: 0.05,
            momentum: 0.9,
            policy_lr: 1e-2,
            rmsprop_decay: 0.99,
            rmsprop_eps: 1e-8,
            stages: 2,
            temperature: 0.05,
            baseline_augment: true,
            drop_last: false,
            val_batch_size: None,
            eval_batch_size: 500,
            on_divergence: OnDivergence::Skip,
            record_wall_time: true,
            seed: 0,
            method: Method::Madao,
            precision: Precision::F32,
            hypergrad: HypergradConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.inner_lr", self.inner_lr),
            ("train.policy_lr", self.policy_lr),
            ("train.temperature", self.temperature),
            ("train.rmsprop_eps", self.rmsprop_eps),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::config("train.rmsprop_decay", format!("must lie in (0, 1), got {}", self.rmsprop_decay)));
        }
        let counts = [
            ("train.batch_size", self.batch_size),
            ("train.inner_steps", self.inner_steps),
            ("train.stages", self.stages),
            ("train.eval_batch_size", self.eval_batch_size),
            ("train.val_batch_size", self.val_batch_size.unwrap_or(1)),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        self.hypergrad.validate()
    }

    fn augments(&self, epoch: usize) -> bool {
        self.method != Method::NoAug && epoch > self.warmup_epochs
    }

    fn updates_policy(&self, epoch: usize) -> bool {
        self.method == Method::Madao && epoch > self.warmup_epochs
    }
}

/// Training, validation and test splits plus the kind of images they hold.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub kind: DatasetKind,
}

impl TrainData {
    fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for (name, ds) in [("train", &self.train), ("validation", &self.val), ("test", &self.test)] {
            if ds.is_empty() {
                return Err(Error::InvalidInput(format!("{name} set is empty")));
            }
            if ds.shape != spec.input || ds.num_classes != spec.num_classes {
                return Err(Error::InvalidInput(format!(
                    "{name} set has images {:?} and {} classes; the model expects {:?} and {}",
                    ds.shape, ds.num_classes, spec.input, spec.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss of the epoch's inner steps (full clean training set at epoch 0).
    pub train_loss: f64,
    /// Loss over the full validation set.
    pub val_loss: f64,
    /// Error rate over the full test set.
    pub test_error: f64,
    /// Mean `‖∇_θ f‖` over the epoch's inner steps.
    pub grad_norm_theta: f64,
    /// Mean `‖∂g/∂φ‖` over applied outer steps, if any.
    pub hypergrad_norm: Option<f64>,
    pub policy_snapshot: PolicySnapshot,
    /// Largest tape over all steps of the epoch.
    pub peak_tape_nodes: usize,
    /// Largest tape of an outer step (zero without outer steps).
    pub outer_peak_tape_nodes: usize,
    /// Largest auxiliary float count reported by the hypergradient.
    pub peak_aux_floats: usize,
    pub inner_steps: usize,
    pub outer_steps: usize,
    pub skipped_outer_steps: usize,
    pub wall_ms: Option<f64>,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
    pub params: ParamSet,
    pub policy: PolicyParams,
}

impl RunMetrics {
    pub fn final_test_error(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_error)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Batches passed through the augmentation policy.
    pub augment_calls: usize,
    pub inner_steps: usize,
    pub outer_steps: usize,
    pub skipped_outer_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub tape_nodes: usize,
}

#[derive(Debug)]
pub enum OuterOutcome {
    Applied(HypergradResult),
    Skipped(Error),
}

/// A training batch with the randomness already drawn, so that it can be
/// replayed exactly.
#[derive(Clone, Debug)]
struct PreparedBatch {
    x: Tensor,
    labels: Vec<usize>,
    noise: Option<PolicyNoise>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Independent random streams derived from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stateful driver of one run; exposes the individual steps for tests.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub spec: ModelSpec,
    data: &'a TrainData,
    pub params: ParamSet,
    pub policy: PolicyParams,
    pub sgd: Sgd,
    pub rmsprop: RmsProp,
    pub counters: Counters,
    shuffle_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    crop_rng: ChaCha8Rng,
    val_batches: CyclicBatches,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, spec: ModelSpec, data: &'a TrainData) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        data.validate(&spec)?;
        let params = spec.init(stream(cfg.seed, 1).next_u64())?;
        let policy = PolicyParams::new(cfg.stages, cfg.temperature)?;
        let sgd = Sgd::new(params.total_dim(), cfg.inner_lr, cfg.momentum);
        let rmsprop = RmsProp::new(policy.num_params(), cfg.policy_lr, cfg.rmsprop_decay, cfg.rmsprop_eps);
        let val_batch = cfg.val_batch_size.unwrap_or(cfg.batch_size);
        Ok(Self {
            shuffle_rng: stream(cfg.seed, 2),
            noise_rng: stream(cfg.seed, 3),
            crop_rng: stream(cfg.seed, 4),
            val_batches: CyclicBatches::new(data.val.len(), val_batch),
            cfg,
            spec,
            data,
            params,
            policy,
            sgd,
            rmsprop,
            counters: Counters::default(),
        })
    }

    fn prepare(&mut self, indices: &[usize], augment: bool) -> PreparedBatch {
        let mut x = self.data.train.images_at(indices);
        if self.cfg.baseline_augment {
            x = baseline_augment(&x, self.data.kind, self.crop_rng.next_u64());
        }
        let noise = augment.then(|| PolicyNoise::sample(&mut self.noise_rng, self.policy.num_stages(), indices.len()));
        PreparedBatch {
            x,
            labels: self.data.train.labels_at(indices),
            noise,
        }
    }

    /// Training loss `f(θ, φ)` on a prepared batch.
    fn batch_loss(&self, b: &PreparedBatch, theta: &[Tensor], phi: &[Tensor]) -> Result<Tensor> {
        let x = match &b.noise {
            Some(noise) => apply_policy(phi, &b.x, noise, &self.policy.temperatures())?,
            None => b.x.clone(),
        };
        loss_ce(&self.spec.forward(theta, &x)?, &b.labels)
    }

    fn check_loss(loss: f64) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("training loss {loss}")))
        }
    }

    fn sgd_step_on(&mut self, b: &PreparedBatch) -> Result<InnerStats> {
        let tape = Tape::new();
        let theta = self.params.leaves(&tape);
        let phi = self.policy.to_param_set().to_tensors();
        let loss = self.batch_loss(b, &theta, &phi)?;
        Self::check_loss(loss.item())?;
        let grads = flatten_tensors(&backward(&loss, &theta, false)?);
        let tape_nodes = tape.len();
        let mut flat = self.params.flatten();
        self.sgd.step(&mut flat, &grads)?;
        self.params.set_flat(&flat)?;
        self.counters.inner_steps += 1;
        if b.noise.is_some() {
            self.counters.augment_calls += 1;
        }
        Ok(InnerStats {
            loss: loss.item(),
            grad_norm: norm(&grads),
            tape_nodes,
        })
    }

    /// One SGD-with-momentum step on the (optionally policy-augmented) batch.
    pub fn inner_step(&mut self, indices: &[usize], augment: bool) -> Result<InnerStats> {
        let b = self.prepare(indices, augment);
        self.sgd_step_on(&b)
    }

    fn next_val_batch(&mut self) -> (Tensor, Vec<usize>) {
        let idx = self.val_batches.next().expect("validation set is non-empty");
        (self.data.val.images_at(&idx), self.data.val.labels_at(&idx))
    }

    fn apply_hypergradient(&mut self, grad_phi: &[f64]) -> Result<()> {
        let mut flat = self.policy.flatten();
        self.rmsprop.step(&mut flat, grad_phi)?;
        self.policy.set_flat(&flat)
    }

    fn handle(&mut self, outcome: Result<HypergradResult>) -> Result<OuterOutcome> {
        match outcome {
            Ok(res) => {
                self.apply_hypergradient(&res.grad_phi)?;
                self.counters.outer_steps += 1;
                Ok(OuterOutcome::Applied(res))
            }
            Err(e) if matches!(e.root(), Error::Divergence { .. } | Error::NonFinite(_))
                && self.cfg.on_divergence == OnDivergence::Skip =>
            {
                self.counters.skipped_outer_steps += 1;
                Ok(OuterOutcome::Skipped(e))
            }
            Err(e) => Err(e),
        }
    }

    /// Implicit (Neumann) policy update: `f` on the training batch
    /// `indices` with a fresh frozen augmentation draw, `g` on the next
    /// clean validation batch.
    pub fn outer_step(&mut self, indices: &[usize]) -> Result<OuterOutcome> {
        let b = self.prepare(indices, true);
        self.outer_step_on(&b)
    }

    fn outer_step_on(&mut self, b: &PreparedBatch) -> Result<OuterOutcome> {
        let (xv, yv) = self.next_val_batch();
        let f = |theta: &[Tensor], phi: &[Tensor]| self.batch_loss(b, theta, phi);
        let g = |theta: &[Tensor]| loss_ce(&self.spec.forward(theta, &xv)?, &yv);
        let outcome = hypergradient(&f, &g, &self.params, &self.policy.to_param_set(), &self.cfg.hypergrad);
        self.handle(outcome)
    }

    /// Runs the inner steps of one chunk as a single recorded computation
    /// and differentiates the validation loss through them.
    fn unrolled_chunk(&mut self, chunk: &[Vec<usize>]) -> Result<(Vec<InnerStats>, OuterOutcome)> {
        let batches: Vec<PreparedBatch> = chunk.iter().map(|idx| self.prepare(idx, true)).collect();
        let (xv, yv) = self.next_val_batch();
        let losses = RefCell::new(Vec::with_capacity(batches.len()));
        let f = |t: usize, theta: &[Tensor], phi: &[Tensor]| {
            let loss = self.batch_loss(&batches[t], theta, phi)?;
            Self::check_loss(loss.item())?;
            losses.borrow_mut().push(loss.item());
            Ok(loss)
        };
        let g = |theta: &[Tensor]| loss_ce(&self.spec.forward(theta, &xv)?, &yv);
        let momentum = crate::autodiff::split_flat(&self.sgd.buffer, &self.params.shapes())?;
        let ucfg = UnrollConfig {
            steps: batches.len(),
            lr: self.cfg.inner_lr,
            momentum: self.cfg.momentum,
            cache_budget: self.cfg.hypergrad.cache_budget,
        };
        let out = unrolled_run(&f, &g, &self.params, Some(&momentum), &self.policy.to_param_set(), &ucfg)?;
        self.params.set_from_tensors(&out.final_params)?;
        self.sgd.buffer = flatten_tensors(&out.final_momentum);
        self.counters.inner_steps += batches.len();
        self.counters.augment_calls += batches.len();
        let per_step = out.result.diagnostics.tape_nodes;
        let stats = losses
            .into_inner()
            .into_iter()
            .map(|loss| InnerStats {
                loss,
                grad_norm: out.result.diagnostics.grad_f_norm,
                tape_nodes: per_step,
            })
            .collect();
        let outcome = self.handle(Ok(out.result))?;
        Ok((stats, outcome))
    }

    /// Mean cross-entropy and error rate over a whole dataset, no tape.
    pub fn evaluate(&self, ds: &Dataset) -> Result<(f64, f64)> {
        let theta = self.params.to_tensors();
        let mut loss = 0.0;
        let mut wrong = 0.0;
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(self.cfg.eval_batch_size) {
            let logits = self.spec.forward(&theta, &ds.images_at(chunk))?;
            let labels = ds.labels_at(chunk);
            loss += loss_ce(&logits, &labels)?.item() * chunk.len() as f64;
            wrong += error_rate(&logits, &labels) * chunk.len() as f64;
        }
        let n = ds.len().max(1) as f64;
        Ok((loss / n, wrong / n))
    }

    /// Record describing the state before any training.
    pub fn initial_record(&self) -> Result<EpochRecord> {
        let (train_loss, _) = self.evaluate(&self.data.train)?;
        let (val_loss, _) = self.evaluate(&self.data.val)?;
        let (_, test_error) = self.evaluate(&self.data.test)?;
        Ok(EpochRecord {
            epoch: 0,
            train_loss,
            val_loss,
            test_error,
            grad_norm_theta: 0.0,
            hypergrad_norm: None,
            policy_snapshot: self.policy.snapshot(0),
            peak_tape_nodes: 0,
            outer_peak_tape_nodes: 0,
            peak_aux_floats: 0,
            inner_steps: 0,
            outer_steps: 0,
            skipped_outer_steps: 0,
            wall_ms: self.cfg.record_wall_time.then_some(0.0),
        })
    }

    /// One pass over the training set in chunks of `s` batches, each chunk
    /// followed by a policy update once warm-up is over.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let start = Instant::now();
        let augment = self.cfg.augments(epoch);
        let update = self.cfg.updates_policy(epoch);
        let batches = epoch_batches(self.data.train.len(), self.cfg.batch_size, self.cfg.drop_last, &mut self.shuffle_rng);
        let before = self.counters;
        let mut inner: Vec<InnerStats> = Vec::with_capacity(batches.len());
        let mut hyper_norms = Vec::new();
        let (mut outer_peak, mut aux_peak) = (0, 0);
        for (c, chunk) in batches.chunks(self.cfg.inner_steps).enumerate() {
            let ctx = |e: Error| e.context(format!("epoch {epoch}, chunk {c}"));
            let outcome = if update && self.cfg.hypergrad.method == HypergradMethod::Unrolled {
                let (stats, outcome) = self.unrolled_chunk(chunk).map_err(ctx)?;
                inner.extend(stats);
                Some(outcome)
            } else {
                let mut last = None;
                for idx in chunk {
                    let b = self.prepare(idx, augment);
                    inner.push(self.sgd_step_on(&b).map_err(ctx)?);
                    last = Some(idx);
                }
                match (update, last) {
                    (true, Some(idx)) => Some(self.outer_step(idx).map_err(ctx)?),
                    _ => None,
                }
            };
            match outcome {
                Some(OuterOutcome::Applied(res)) => {
                    hyper_norms.push(norm(&res.grad_phi));
                    outer_peak = outer_peak.max(res.diagnostics.tape_nodes);
                    aux_peak = aux_peak.max(res.diagnostics.peak_aux_floats);
                }
                Some(OuterOutcome::Skipped(e)) => eprintln!("warning: epoch {epoch}, chunk {c}: policy update skipped: {e}"),
                None => {}
            }
        }
        let (val_loss, _) = self.evaluate(&self.data.val)?;
        let (_, test_error) = self.evaluate(&self.data.test)?;
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let losses: Vec<f64> = inner.iter().map(|s| s.loss).collect();
        let grads: Vec<f64> = inner.iter().map(|s| s.grad_norm).collect();
        let inner_peak = inner.iter().map(|s| s.tape_nodes).max().unwrap_or(0);
        Ok(EpochRecord {
            epoch,
            train_loss: mean(&losses),
            val_loss,
            test_error,
            grad_norm_theta: mean(&grads),
            hypergrad_norm: (!hyper_norms.is_empty()).then(|| mean(&hyper_norms)),
            policy_snapshot: self.policy.snapshot(epoch),
            peak_tape_nodes: inner_peak.max(outer_peak),
            outer_peak_tape_nodes: outer_peak,
            peak_aux_floats: aux_peak,
            inner_steps: self.counters.inner_steps - before.inner_steps,
            outer_steps: self.counters.outer_steps - before.outer_steps,
            skipped_outer_steps: self.counters.skipped_outer_steps - before.skipped_outer_steps,
            wall_ms: self.cfg.record_wall_time.then(|| start.elapsed().as_secs_f64() * 1e3),
        })
    }
}

/// Runs the configured number of epochs, handing each record (including the
/// initial epoch-0 record) to `sink` as soon as it is complete.
pub fn run(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    data: &TrainData,
    mut sink: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<RunMetrics> {
    with_precision(cfg.precision, || {
        let mut trainer = Trainer::new(cfg.clone(), spec.clone(), data)?;
        let mut records = Vec::with_capacity(cfg.epochs + 1);
        let first = trainer.initial_record()?;
        sink(&first)?;
        records.push(first);
        for epoch in 1..=cfg.epochs {
            let rec = trainer.run_epoch(epoch)?;
            sink(&rec)?;
            records.push(rec);
        }
        Ok(RunMetrics {
            records,
            params: trainer.params,
            policy: trainer.policy,
        })
    })
}
