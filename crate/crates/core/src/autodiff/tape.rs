use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::kernels::ConvGeom;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) type NodeId = usize;

/// Primitive operations the tape knows how to differentiate.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Offset,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Sin,
    Cos,
    Relu,
    Clamp(f64, f64),
    MatMul,
    Transpose,
    Reshape,
    BroadcastTo,
    SumTo,
    Gather(Rc<Vec<usize>>),
    ScatterAdd(Rc<Vec<usize>>),
    Conv2d(ConvGeom),
    Conv2dInputGrad(ConvGeom),
    Conv2dWeightGrad(ConvGeom),
    GridSample,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Offset => "offset",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Relu => "relu",
            Op::Clamp(..) => "clamp",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::BroadcastTo => "broadcast_to",
            Op::SumTo => "sum_to",
            Op::Gather(_) => "gather",
            Op::ScatterAdd(_) => "scatter_add",
            Op::Conv2d(_) => "conv2d",
            Op::Conv2dInputGrad(_) => "conv2d_input_grad",
            Op::Conv2dWeightGrad(_) => "conv2d_weight_grad",
            Op::GridSample => "grid_sample",
        }
    }
}

/// A value captured by a node: its data plus the node that produced it, if any.
#[derive(Clone)]
pub(crate) struct Saved {
    pub id: Option<NodeId>,
    pub value: Tensor,
}

#[derive(Clone)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Saved>,
    pub output: Tensor,
}

/// Append-only record of operations. Cloning a `Tape` clones the handle.
///
/// Nodes only ever refer to earlier nodes, so node ids are a topological
/// order. Backward passes never remove nodes: gradients produced with
/// `retain_graph` are themselves recorded here and can be differentiated
/// again.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    pub(crate) fn push(&self, op: Op, inputs: Vec<Saved>, output: Tensor) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, output });
        nodes.len() - 1
    }

    fn node(&self, id: NodeId) -> Node {
        self.nodes.borrow()[id].clone()
    }

    /// Registers `value` as a differentiable leaf on this tape.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let detached = value.detach();
        let id = self.push(Op::Leaf, Vec::new(), detached.clone());
        detached.linked(self.clone(), id)
    }

    /// Leaves for several tensors at once.
    pub fn leaves(&self, values: &[Tensor]) -> Vec<Tensor> {
        values.iter().map(|v| self.leaf(v)).collect()
    }
}

/// Reverse-mode gradients of the scalar `output` with respect to each tensor
/// in `wrt`.
///
/// With `retain_graph` set, the backward computation is itself recorded on
/// the tape, so the returned gradients are tape-linked and can be
/// differentiated again (grad-of-grad). Without it, the gradients are
/// constants and no nodes are added.
pub fn backward(output: &Tensor, wrt: &[Tensor], retain_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(Error::NotScalar(output.shape().to_vec()));
    }
    vjp_many(
        std::slice::from_ref(output),
        &[Tensor::ones(output.shape())],
        wrt,
        retain_graph,
    )
}

/// Vector-Jacobian product `Σ_k seeds[k]ᵀ · ∂outputs[k]/∂wrt` for several
/// outputs at once. [`backward`] is the single scalar-output case.
pub fn vjp_many(
    outputs: &[Tensor],
    seeds: &[Tensor],
    wrt: &[Tensor],
    retain_graph: bool,
) -> Result<Vec<Tensor>> {
    if outputs.len() != seeds.len() {
        return Err(Error::Dimension {
            expected: outputs.len(),
            got: seeds.len(),
        });
    }
    for (o, s) in outputs.iter().zip(seeds) {
        if o.shape() != s.shape() {
            return Err(Error::shape("vjp seed", &[o.shape(), s.shape()]));
        }
    }
    let mut wrt_ids = Vec::with_capacity(wrt.len());
    let mut tape: Option<Tape> = None;
    for t in wrt {
        let (t_tape, id) = t.link().ok_or(Error::NotOnTape)?;
        match &tape {
            Some(existing) if !existing.same(t_tape) => return Err(Error::NotOnTape),
            Some(_) => {}
            None => tape = Some(t_tape.clone()),
        }
        wrt_ids.push(id);
    }
    let zeros = || wrt.iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
    let Some(tape) = tape else {
        return Ok(Vec::new());
    };
    let mut roots: Vec<(NodeId, &Tensor)> = Vec::new();
    for (o, s) in outputs.iter().zip(seeds) {
        if let Some((o_tape, id)) = o.link() {
            if !tape.same(o_tape) {
                return Err(Error::NotOnTape);
            }
            roots.push((id, s));
        }
    }
    let lo = *wrt_ids.iter().min().expect("wrt is non-empty here");
    let Some(hi) = roots.iter().map(|r| r.0).max() else {
        return Ok(zeros());
    };
    if lo > hi {
        return Ok(zeros());
    }

    // Nodes in [lo, hi] whose value depends on some wrt tensor.
    let span = hi - lo + 1;
    let mut needs = vec![false; span];
    {
        let nodes = tape.nodes.borrow();
        for id in lo..=hi {
            needs[id - lo] = wrt_ids.contains(&id)
                || nodes[id]
                    .inputs
                    .iter()
                    .any(|s| matches!(s.id, Some(j) if j >= lo && needs[j - lo]));
        }
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; span];
    for (id, seed) in roots {
        if id < lo || !needs[id - lo] {
            continue;
        }
        let seed = seed.detach();
        let slot = &mut grads[id - lo];
        *slot = Some(match slot.take() {
            Some(acc) => acc.add(&seed)?,
            None => seed,
        });
    }
    let mut found: HashMap<NodeId, Tensor> = HashMap::new();

    for id in (lo..=hi).rev() {
        if !needs[id - lo] {
            continue;
        }
        let Some(gy) = grads[id - lo].take() else {
            continue;
        };
        if wrt_ids.contains(&id) {
            found.insert(id, gy.clone());
        }
        let node = tape.node(id);
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let mask: Vec<bool> = node
            .inputs
            .iter()
            .map(|s| matches!(s.id, Some(j) if j >= lo && needs[j - lo]))
            .collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        if retain_graph && matches!(node.op, Op::GridSample) {
            return Err(Error::NotTwiceDifferentiable(node.op.name()));
        }
        let relink = |t: &Tensor, id: Option<NodeId>| match (retain_graph, id) {
            (true, Some(id)) => t.linked(tape.clone(), id),
            _ => t.clone(),
        };
        let inputs: Vec<Tensor> = node.inputs.iter().map(|s| relink(&s.value, s.id)).collect();
        let out = relink(&node.output, Some(id));
        let gy = if retain_graph { gy } else { gy.detach() };
        let input_grads = vjp(&node.op, &inputs, &out, &gy, &mask)?;
        for ((saved, grad), needed) in node.inputs.iter().zip(input_grads).zip(&mask) {
            let (Some(j), Some(grad), true) = (saved.id, grad, *needed) else {
                continue;
            };
            let slot = &mut grads[j - lo];
            *slot = Some(match slot.take() {
                Some(acc) => acc.add(&grad)?,
                None => grad,
            });
        }
    }

    Ok(wrt
        .iter()
        .zip(&wrt_ids)
        .map(|(t, id)| found.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Vector-Jacobian product of one node, expressed through recorded tensor
/// operations so that it can be differentiated again.
fn vjp(
    op: &Op,
    x: &[Tensor],
    out: &Tensor,
    gy: &Tensor,
    mask: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| mask.get(i).copied().unwrap_or(false);
    let one = |t: Tensor| Ok(vec![Some(t)]);
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => Ok(vec![Some(gy.clone()), Some(gy.clone())]),
        Op::Sub => Ok(vec![Some(gy.clone()), Some(gy.neg())]),
        Op::Mul => Ok(vec![
            if want(0) { Some(gy.mul(&x[1])?) } else { None },
            if want(1) { Some(gy.mul(&x[0])?) } else { None },
        ]),
        Op::Div => Ok(vec![
            if want(0) { Some(gy.div(&x[1])?) } else { None },
            if want(1) {
                Some(gy.mul(out)?.div(&x[1])?.neg())
            } else {
                None
            },
        ]),
        Op::Neg => one(gy.neg()),
        Op::Scale(c) => one(gy.scale(*c)),
        Op::Offset => one(gy.clone()),
        Op::Exp => one(gy.mul(out)?),
        Op::Log => one(gy.div(&x[0])?),
        Op::Sigmoid => one(gy.mul(&out.sub(&out.mul(out)?)?)?),
        Op::Tanh => one(gy.mul(&out.mul(out)?.neg().offset(1.0))?),
        Op::Sin => one(gy.mul(&x[0].cos())?),
        Op::Cos => one(gy.mul(&x[0].sin())?.neg()),
        Op::Relu => {
            let m = x[0].map_detached(|v| if v > 0.0 { 1.0 } else { 0.0 });
            one(gy.mul(&m)?)
        }
        Op::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            let m = x[0].map_detached(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
            one(gy.mul(&m)?)
        }
        Op::MatMul => Ok(vec![
            if want(0) {
                Some(gy.matmul(&x[1].transpose()?)?)
            } else {
                None
            },
            if want(1) {
                Some(x[0].transpose()?.matmul(gy)?)
            } else {
                None
            },
        ]),
        Op::Transpose => one(gy.transpose()?),
        Op::Reshape => one(gy.reshape(x[0].shape())?),
        Op::BroadcastTo => one(gy.sum_to(x[0].shape())?),
        Op::SumTo => one(gy.broadcast_to(x[0].shape())?),
        Op::Gather(idx) => one(gy.scatter_add_shared(idx.clone(), x[0].shape())?),
        Op::ScatterAdd(idx) => one(gy.gather_shared(idx.clone(), x[0].shape())?),
        Op::Conv2d(g) => Ok(vec![
            if want(0) {
                Some(Tensor::conv2d_input_grad(gy, &x[1], *g)?)
            } else {
                None
            },
            if want(1) {
                Some(Tensor::conv2d_weight_grad(&x[0], gy, *g)?)
            } else {
                None
            },
        ]),
        // z = A(w)ᵀ g  =>  <gy, z> = <conv(gy, w), g>
        Op::Conv2dInputGrad(g) => Ok(vec![
            if want(0) {
                Some(gy.conv2d_geom(&x[1], *g)?)
            } else {
                None
            },
            if want(1) {
                Some(Tensor::conv2d_weight_grad(gy, &x[0], *g)?)
            } else {
                None
            },
        ]),
        // z = dW(x, g)  =>  <gy, z> = <conv(x, gy), g>
        Op::Conv2dWeightGrad(g) => Ok(vec![
            if want(0) {
                Some(Tensor::conv2d_input_grad(&x[1], gy, *g)?)
            } else {
                None
            },
            if want(1) {
                Some(x[0].conv2d_geom(gy, *g)?)
            } else {
                None
            },
        ]),
        Op::GridSample => {
            let (di, dx, dy) = super::kernels::grid_sample_backward(
                x[0].shape(),
                x[0].data(),
                x[1].data(),
                x[2].data(),
                gy.data(),
            );
            Ok(vec![
                Some(Tensor::new(x[0].shape(), di)?),
                Some(Tensor::new(x[1].shape(), dx)?),
                Some(Tensor::new(x[2].shape(), dy)?),
            ])
        }
    }
}
