//! Hypergradients `∂g/∂φ` of a validation loss `g(θ)` with respect to the
//! hyperparameters `φ` of a training loss `f(θ, φ)`.
//!
//! The default route is implicit differentiation at an (assumed) inner
//! optimum: `∂g/∂φ = −∇_θ g · (∇²_θθ f)⁻¹ · ∂²f/∂θ∂φᵀ`, with the inverse
//! Hessian replaced by a truncated Neumann series. Only Hessian-vector and
//! mixed products are used, so auxiliary memory stays a small multiple of
//! `dim θ`. The unrolled baseline differentiates through explicit SGD steps
//! instead and pays for it with a cache that grows with the step count.

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    backward, flatten_tensors, BilevelObjective, CurvatureProbe, Objective, ParamSet, Tape, Tensor,
};
use crate::error::{Error, Result};

/// Partial sums growing past this multiple of `‖v‖` count as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypergradMethod {
    #[default]
    NeumannImplicit,
    Unrolled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypergradConfig {
    /// Neumann step size; the series approximates `(∇²f)⁻¹` when
    /// `α · λ_max(∇²f) < 1`.
    pub alpha: f64,
    /// Number of Neumann terms `J` beyond the zeroth.
    pub neumann_terms: usize,
    pub method: HypergradMethod,
    /// Upper bound, in floats, on the parameter cache of the unrolled
    /// method. `None` means unbounded.
    pub cache_budget: Option<usize>,
}

impl Default for HypergradConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            neumann_terms: 5,
            method: HypergradMethod::NeumannImplicit,
            cache_budget: None,
        }
    }
}

impl HypergradConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("hypergrad.alpha", format!("must be positive, got {}", self.alpha)));
        }
        if self.neumann_terms == 0 {
            return Err(Error::config("hypergrad.neumann_terms", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    /// `‖Σ_{i≤j} p_i‖` after each Neumann term `j = 0..=J`.
    pub neumann_norms: Vec<f64>,
    /// Largest number of `dim θ`-sized work vectors held at once, in floats.
    pub peak_aux_floats: usize,
    /// Floats held by the unrolled parameter cache (`T · dim θ`).
    pub cache_floats: usize,
    /// `‖∇_θ f‖`; implicit differentiation assumes this is near zero.
    pub grad_f_norm: f64,
    /// `‖∇_θ g‖`.
    pub grad_g_norm: f64,
    /// Tape size after recording `f` and its θ-gradient.
    pub tape_nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypergradResult {
    pub grad_phi: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Result of [`neumann_series`].
#[derive(Clone, Debug, PartialEq)]
pub struct NeumannSeries {
    pub value: Vec<f64>,
    pub partial_norms: Vec<f64>,
    pub peak_aux_floats: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `α · Σ_{j=0}^{J} (I − α H)^j v` with `H v` supplied by `hvp`.
///
/// Three work vectors live at once: the current term, its Hessian product
/// and the running sum.
pub fn neumann_series(
    hvp: impl Fn(&[f64]) -> Result<Vec<f64>>,
    v: &[f64],
    cfg: &HypergradConfig,
) -> Result<NeumannSeries> {
    cfg.validate()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Neumann input vector".into()));
    }
    let m = v.len();
    let v_norm = norm(v);
    if v_norm == 0.0 {
        return Ok(NeumannSeries {
            value: vec![0.0; m],
            partial_norms: vec![0.0; cfg.neumann_terms + 1],
            peak_aux_floats: m,
        });
    }
    let limit = DIVERGENCE_FACTOR * v_norm;
    let alpha = cfg.alpha;
    let mut p = v.to_vec();
    let mut sum = v.to_vec();
    let mut partial_norms = vec![v_norm];
    for term in 1..=cfg.neumann_terms {
        let hp = hvp(&p)?;
        for (pi, hi) in p.iter_mut().zip(&hp) {
            *pi -= alpha * hi;
        }
        drop(hp);
        for (si, pi) in sum.iter_mut().zip(&p) {
            *si += pi;
        }
        let p_norm = norm(&p);
        let s_norm = norm(&sum);
        if !(p_norm.is_finite() && s_norm.is_finite()) || p_norm > limit || s_norm > limit {
            return Err(Error::Divergence {
                term,
                norm: p_norm.max(s_norm),
            });
        }
        partial_norms.push(s_norm);
    }
    for s in &mut sum {
        *s *= alpha;
    }
    Ok(NeumannSeries {
        value: sum,
        partial_norms,
        peak_aux_floats: 3 * m,
    })
}

/// Approximates `(∇²_θθ f)⁻¹ v` at `(params, hyper)`.
pub fn neumann_inverse_hvp(
    f: &BilevelObjective<'_>,
    params: &ParamSet,
    hyper: &ParamSet,
    v: &[f64],
    cfg: &HypergradConfig,
) -> Result<Vec<f64>> {
    if v.len() != params.total_dim() {
        return Err(Error::Dimension {
            expected: params.total_dim(),
            got: v.len(),
        });
    }
    let probe = CurvatureProbe::new(f, params, hyper)?;
    Ok(neumann_series(|p| probe.hvp(p), v, cfg)?.value)
}

/// Implicit hypergradient `−(∇_θ g) (∇²_θθ f)⁻¹ ∂²f/∂θ∂φᵀ`.
///
/// `g` sees only `θ`: augmentation is never applied to validation data, so
/// the direct `∂g/∂φ` term vanishes.
pub fn hypergradient(
    f: &BilevelObjective<'_>,
    g: &Objective<'_>,
    params: &ParamSet,
    hyper: &ParamSet,
    cfg: &HypergradConfig,
) -> Result<HypergradResult> {
    cfg.validate()?;
    let grad_g = {
        let tape = Tape::new();
        let theta = params.leaves(&tape);
        let loss = g(&theta)?;
        flatten_tensors(&backward(&loss, &theta, false)?)
    };
    let probe = CurvatureProbe::new(f, params, hyper)?;
    let series = neumann_series(|p| probe.hvp(p), &grad_g, cfg)?;
    let mut grad_phi = probe.mixed(&series.value)?;
    for x in &mut grad_phi {
        *x = -*x;
    }
    if grad_phi.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hypergradient".into()));
    }
    Ok(HypergradResult {
        grad_phi,
        diagnostics: Diagnostics {
            neumann_norms: series.partial_norms,
            peak_aux_floats: series.peak_aux_floats,
            cache_floats: 0,
            grad_f_norm: norm(&probe.grad_theta()),
            grad_g_norm: norm(&grad_g),
            tape_nodes: probe.tape_nodes(),
        },
    })
}

/// Training loss of step `t` as a function of `(θ_t, φ)`.
pub type StepObjective<'a> = dyn Fn(usize, &[Tensor], &[Tensor]) -> Result<Tensor> + 'a;

/// Options of [`unrolled_hypergradient`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnrollConfig {
    pub steps: usize,
    pub lr: f64,
    /// Heavy-ball momentum (`buf ← μ·buf + ∇f`); zero gives plain SGD.
    pub momentum: f64,
    pub cache_budget: Option<usize>,
}

impl UnrollConfig {
    pub fn sgd(steps: usize, lr: f64) -> Self {
        Self {
            steps,
            lr,
            momentum: 0.0,
            cache_budget: None,
        }
    }
}

/// Parameters after an unrolled run together with the hypergradient.
#[derive(Clone, Debug)]
pub struct UnrolledOutcome {
    pub result: HypergradResult,
    pub final_params: Vec<Tensor>,
    /// Final momentum buffers (zeros when momentum is zero).
    pub final_momentum: Vec<Tensor>,
}

/// `∂g(θ_T)/∂φ` through `T` explicit SGD steps from `params_init`.
///
/// Every intermediate `θ_t` stays on the tape, so the cache is `T · dim θ`
/// floats; a run whose cache would exceed `cache_budget` is refused before
/// any work is done.
pub fn unrolled_hypergradient(
    f: &StepObjective<'_>,
    g: &Objective<'_>,
    params_init: &ParamSet,
    hyper: &ParamSet,
    cfg: &UnrollConfig,
) -> Result<HypergradResult> {
    unrolled_run(f, g, params_init, None, hyper, cfg).map(|o| o.result)
}

/// [`unrolled_hypergradient`] that also returns the final state, starting
/// from optional momentum buffers.
pub fn unrolled_run(
    f: &StepObjective<'_>,
    g: &Objective<'_>,
    params_init: &ParamSet,
    momentum_init: Option<&[Tensor]>,
    hyper: &ParamSet,
    cfg: &UnrollConfig,
) -> Result<UnrolledOutcome> {
    if cfg.steps == 0 {
        return Err(Error::InvalidInput("unrolled steps must be at least 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::InvalidInput(format!("unrolled learning rate must be non-negative, got {}", cfg.lr)));
    }
    let m = params_init.total_dim();
    let needed = cfg.steps.saturating_mul(m);
    if let Some(budget) = cfg.cache_budget {
        if needed > budget {
            return Err(Error::CacheBudget { needed, budget });
        }
    }
    let tape = Tape::new();
    let mut theta = params_init.leaves(&tape);
    let phi = hyper.leaves(&tape);
    let mut buf: Vec<Tensor> = match momentum_init {
        Some(b) => b.iter().map(Tensor::detach).collect(),
        None => theta.iter().map(|t| Tensor::zeros(t.shape())).collect(),
    };
    let mut grad_f_norm = 0.0;
    for t in 0..cfg.steps {
        let loss = f(t, &theta, &phi)?;
        let grads = backward(&loss, &theta, true)?;
        grad_f_norm = norm(&flatten_tensors(&grads));
        let mut next = Vec::with_capacity(theta.len());
        for ((p, gr), b) in theta.iter().zip(&grads).zip(buf.iter_mut()) {
            let step = if cfg.momentum != 0.0 {
                *b = b.scale(cfg.momentum).add(gr)?;
                b.clone()
            } else {
                gr.clone()
            };
            next.push(p.sub(&step.scale(cfg.lr))?);
        }
        theta = next;
    }
    let tape_nodes = tape.len();
    let val = g(&theta)?;
    let mut wrt = phi.clone();
    wrt.extend(theta.iter().cloned());
    let grads = backward(&val, &wrt, false)?;
    let grad_phi = flatten_tensors(&grads[..phi.len()]);
    let grad_g_norm = norm(&flatten_tensors(&grads[phi.len()..]));
    if grad_phi.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("unrolled hypergradient".into()));
    }
    Ok(UnrolledOutcome {
        result: HypergradResult {
            grad_phi,
            diagnostics: Diagnostics {
                neumann_norms: Vec::new(),
                peak_aux_floats: needed,
                cache_floats: needed,
                grad_f_norm,
                grad_g_norm,
                tape_nodes,
            },
        },
        final_params: theta.iter().map(Tensor::detach).collect(),
        final_momentum: buf.iter().map(Tensor::detach).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(HypergradConfig::default().validate().is_ok());
        let bad = HypergradConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let bad = HypergradConfig {
            neumann_terms: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn series_on_a_scalar() {
        let cfg = HypergradConfig {
            alpha: 0.1,
            neumann_terms: 5,
            ..Default::default()
        };
        let s = neumann_series(|p| Ok(vec![2.0 * p[0]]), &[1.0], &cfg).unwrap();
        assert!((s.value[0] - 0.1 * (1.0 - 0.8f64.powi(6)) / 0.2).abs() < 1e-12);
        assert_eq!(s.partial_norms.len(), 6);
    }

    #[test]
    fn divergence_reports_the_term() {
        let cfg = HypergradConfig {
            alpha: 1.0,
            neumann_terms: 50,
            ..Default::default()
        };
        // (1 − α·5)^j = (−4)^j passes 10⁶ at j = 10
        match neumann_series(|p| Ok(vec![5.0 * p[0]]), &[1.0], &cfg) {
            Err(Error::Divergence { term, norm }) => {
                assert_eq!(term, 10);
                assert!(norm > 1e6);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn method_serde_names() {
        let m: HypergradMethod = serde_json::from_str("\"neumann_implicit\"").unwrap();
        assert_eq!(m, HypergradMethod::NeumannImplicit);
        let m: HypergradMethod = serde_json::from_str("\"unrolled\"").unwrap();
        assert_eq!(m, HypergradMethod::Unrolled);
    }
}
