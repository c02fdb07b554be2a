//! Hessian-vector and mixed second-derivative products by differentiating
//! through a recorded gradient. Neither product materializes a matrix.

use super::params::{flatten_tensors, split_flat, ParamSet};
use super::{backward, vjp_many, Tape, Tensor};
use crate::error::{Error, Result};

/// Scalar objective of the parameters alone.
pub type Objective<'a> = dyn Fn(&[Tensor]) -> Result<Tensor> + 'a;

/// Scalar objective of parameters `θ` and hyperparameters `φ`.
pub type BilevelObjective<'a> = dyn Fn(&[Tensor], &[Tensor]) -> Result<Tensor> + 'a;

/// `f(θ, φ)` recorded once together with its tape-linked gradient `∇_θ f`.
///
/// Each [`hvp`](Self::hvp) or [`mixed`](Self::mixed) call is one extra
/// backward sweep over that gradient graph and adds no nodes to the tape,
/// so repeated products keep the tape size fixed.
pub struct CurvatureProbe {
    tape: Tape,
    theta: Vec<Tensor>,
    phi: Vec<Tensor>,
    grad_theta: Vec<Tensor>,
    shapes: Vec<Vec<usize>>,
    value: f64,
}

impl CurvatureProbe {
    pub fn new(f: &BilevelObjective<'_>, theta: &ParamSet, phi: &ParamSet) -> Result<Self> {
        let tape = Tape::new();
        let theta_t = theta.leaves(&tape);
        let phi_t = phi.leaves(&tape);
        let loss = f(&theta_t, &phi_t)?;
        let grad_theta = backward(&loss, &theta_t, true)?;
        Ok(Self {
            tape,
            theta: theta_t,
            phi: phi_t,
            grad_theta,
            shapes: theta.shapes(),
            value: loss.item(),
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// `∇_θ f` as a flat vector.
    pub fn grad_theta(&self) -> Vec<f64> {
        flatten_tensors(&self.grad_theta)
    }

    pub fn dim_theta(&self) -> usize {
        self.theta.iter().map(Tensor::numel).sum()
    }

    pub fn dim_phi(&self) -> usize {
        self.phi.iter().map(Tensor::numel).sum()
    }

    pub fn tape_nodes(&self) -> usize {
        self.tape.len()
    }

    fn seeds(&self, v: &[f64]) -> Result<Vec<Tensor>> {
        let m = self.dim_theta();
        if v.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: v.len(),
            });
        }
        split_flat(v, &self.shapes)
    }

    /// `(∇²_θθ f) v`, the θ-gradient of `⟨v, ∇_θ f⟩`.
    pub fn hvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        let seeds = self.seeds(v)?;
        let g = vjp_many(&self.grad_theta, &seeds, &self.theta, false)?;
        Ok(flatten_tensors(&g))
    }

    /// `vᵀ ∂²f/∂θ∂φᵀ`, the φ-gradient of `⟨v, ∇_θ f⟩`.
    pub fn mixed(&self, v: &[f64]) -> Result<Vec<f64>> {
        let seeds = self.seeds(v)?;
        if self.phi.is_empty() {
            return Ok(Vec::new());
        }
        let g = vjp_many(&self.grad_theta, &seeds, &self.phi, false)?;
        Ok(flatten_tensors(&g))
    }
}

/// Hessian-vector product `(∇²f) v` of a scalar objective at `params`.
pub fn hvp(f: &Objective<'_>, params: &ParamSet, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != params.total_dim() {
        return Err(Error::Dimension {
            expected: params.total_dim(),
            got: v.len(),
        });
    }
    let probe = CurvatureProbe::new(&|theta, _| f(theta), params, &ParamSet::new())?;
    probe.hvp(v)
}

/// Mixed product `vᵀ ∂²f/∂θ∂φᵀ`, a vector of length `dim φ`.
pub fn mixed_hvp(
    f: &BilevelObjective<'_>,
    params: &ParamSet,
    hyper: &ParamSet,
    v: &[f64],
) -> Result<Vec<f64>> {
    if v.len() != params.total_dim() {
        return Err(Error::Dimension {
            expected: params.total_dim(),
            got: v.len(),
        });
    }
    CurvatureProbe::new(f, params, hyper)?.mixed(v)
}
