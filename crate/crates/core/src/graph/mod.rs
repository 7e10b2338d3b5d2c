//! Reverse-mode autodiff over a define-once, run-many computation graph.
//!
//! Nodes are appended in topological order (inputs always precede
//! consumers), so forward runs front to back and backward back to front.
//! Shapes are checked at build time: activation nodes carry per-sample
//! dims and acquire a leading batch dimension at forward time, parameter
//! and constant nodes carry their full static shape, and loss nodes are
//! scalars. `Add`/`SumN` may mix batched operands with static ones of the
//! same dims; the static side is broadcast across the batch.
//!
//! Gradients flow into parameters (accumulated on the parameter's grad
//! buffer) and intermediate nodes; they are not materialized for `Input`
//! or `Const` nodes.

pub mod kernels;

use crate::tensor::Tensor;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Const,
    Param {
        param: ParamId,
    },
    Conv2d {
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        epsilon: f64,
        momentum: f64,
        running_mean: ParamId,
        running_var: ParamId,
    },
    Relu,
    Add,
    SumN,
    MaxPool2d {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Dense,
    SigmoidBce,
}

/// Build-time shape of a node's value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShapeKind {
    /// Dims of one sample; the value gains a leading batch dimension.
    PerSample(Vec<usize>),
    /// Full dims, independent of the batch (parameters, constants).
    Static(Vec<usize>),
    /// Batch-reduced scalar (losses).
    Scalar,
}

impl ShapeKind {
    pub fn dims(&self) -> &[usize] {
        match self {
            ShapeKind::PerSample(d) | ShapeKind::Static(d) => d,
            ShapeKind::Scalar => &[],
        }
    }

    fn per_sample_numel(&self) -> usize {
        match self {
            ShapeKind::PerSample(d) | ShapeKind::Static(d) => d.iter().product(),
            ShapeKind::Scalar => 1,
        }
    }

    fn value_len(&self, batch: usize) -> usize {
        match self {
            ShapeKind::PerSample(d) => batch * d.iter().product::<usize>(),
            ShapeKind::Static(d) => d.iter().product(),
            ShapeKind::Scalar => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    DuplicateParam(String),
    UnknownNode(usize),
    Shape { op: &'static str, detail: String },
    FeedMissing(usize),
    FeedNotInput(usize),
    FeedShape { node: usize, detail: String },
    BatchMismatch { expected: usize, got: usize },
    LossNotScalar(usize),
    ValueMissing(usize),
    RunningStatNotFrozen(String),
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::DuplicateParam(name) => write!(f, "duplicate parameter {name:?}"),
            GraphError::UnknownNode(i) => write!(f, "unknown node {i}"),
            GraphError::Shape { op, detail } => write!(f, "{op}: {detail}"),
            GraphError::FeedMissing(i) => write!(f, "input node {i} was not fed"),
            GraphError::FeedNotInput(i) => write!(f, "node {i} is not an input"),
            GraphError::FeedShape { node, detail } => write!(f, "feed for node {node}: {detail}"),
            GraphError::BatchMismatch { expected, got } => {
                write!(f, "inconsistent batch sizes {expected} vs {got}")
            }
            GraphError::LossNotScalar(i) => write!(f, "node {i} is not a scalar loss"),
            GraphError::ValueMissing(i) => {
                write!(f, "node {i} has no value; run forward first")
            }
            GraphError::RunningStatNotFrozen(name) => {
                write!(f, "running statistic {name:?} must be non-trainable")
            }
        }
    }
}

impl core::error::Error for GraphError {}

#[derive(Debug)]
enum Cache {
    None,
    Bn(kernels::BnStats),
    Pool(Vec<usize>),
}

#[derive(Debug)]
pub struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    kind: ShapeKind,
    tag: Option<String>,
    value: Option<Tensor>,
    grad: Option<Vec<f64>>,
    cache: Cache,
}

#[derive(Debug)]
pub struct ParamEntry {
    name: String,
    value: Tensor,
    trainable: bool,
}

impl ParamEntry {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
    param_nodes: BTreeMap<usize, NodeId>,
    batch: Option<usize>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, kind: ShapeKind) -> NodeId {
        for id in &inputs {
            debug_assert!(id.0 < self.nodes.len(), "inputs must precede the node");
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, kind, tag: None, value: None, grad: None, cache: Cache::None });
        id
    }

    fn node(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id.0))
    }

    // ---- construction ----------------------------------------------------

    /// Activation input with per-sample dims (fed with a leading batch dim).
    pub fn input(&mut self, dims: &[usize]) -> NodeId {
        self.push(Op::Input, vec![], ShapeKind::PerSample(dims.to_vec()))
    }

    /// Fixed tensor, broadcast across the batch when summed with
    /// activations.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let kind = ShapeKind::Static(value.shape().to_vec());
        let id = self.push(Op::Const, vec![], kind);
        self.nodes[id.0].value = Some(value);
        id
    }

    /// All-zero constant with the given dims.
    pub fn zero_const(&mut self, dims: &[usize]) -> NodeId {
        self.constant(Tensor::zeros(dims))
    }

    pub fn add_param(
        &mut self,
        name: &str,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId, GraphError> {
        if self.by_name.contains_key(name) {
            return Err(GraphError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.params.push(ParamEntry { name: name.to_string(), value, trainable });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Node view of a parameter; one node per parameter, memoized.
    pub fn param_node(&mut self, param: ParamId) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&param.0) {
            return id;
        }
        let kind = ShapeKind::Static(self.params[param.0].value.shape().to_vec());
        let id = self.push(Op::Param { param }, vec![], kind);
        self.param_nodes.insert(param.0, id);
        id
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        let xd = match &self.node(x)?.kind {
            ShapeKind::PerSample(d) if d.len() == 3 => d.clone(),
            k => return Err(shape_err("conv2d", format!("input must be batched [c,h,w], got {k:?}"))),
        };
        let wd = match &self.node(weight)?.kind {
            ShapeKind::Static(d) if d.len() == 4 => d.clone(),
            k => return Err(shape_err("conv2d", format!("weight must be static [co,ci,k,k], got {k:?}"))),
        };
        let (ci, h, w) = (xd[0], xd[1], xd[2]);
        let (co, wci, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        if wci != ci || kh != kw {
            return Err(shape_err("conv2d", format!("weight {wd:?} does not match input channels {ci}")));
        }
        let ho = kernels::conv_out_extent(h, kh, stride, pad);
        let wo = kernels::conv_out_extent(w, kh, stride, pad);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(self.push(
                Op::Conv2d { stride, pad },
                vec![x, weight],
                ShapeKind::PerSample(vec![co, ho, wo]),
            )),
            _ => Err(shape_err(
                "conv2d",
                format!("kernel {kh} stride {stride} pad {pad} does not fit input {h}x{w}"),
            )),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: ParamId,
        running_var: ParamId,
        epsilon: f64,
        momentum: f64,
    ) -> Result<NodeId, GraphError> {
        let xd = match &self.node(x)?.kind {
            ShapeKind::PerSample(d) if d.len() == 3 => d.clone(),
            k => return Err(shape_err("batch_norm", format!("input must be batched [c,h,w], got {k:?}"))),
        };
        let c = xd[0];
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            match &self.node(id)?.kind {
                ShapeKind::Static(d) if d == &vec![c] => {}
                k => {
                    return Err(shape_err(
                        "batch_norm",
                        format!("{name} must be static [{c}], got {k:?}"),
                    ))
                }
            }
        }
        for pid in [running_mean, running_var] {
            let entry = self.params.get(pid.0).ok_or(GraphError::UnknownNode(pid.0))?;
            if entry.trainable {
                return Err(GraphError::RunningStatNotFrozen(entry.name.clone()));
            }
            if entry.value.numel() != c {
                return Err(shape_err(
                    "batch_norm",
                    format!("running stat {:?} must have {c} elements", entry.name),
                ));
            }
        }
        Ok(self.push(
            Op::BatchNorm { epsilon, momentum, running_mean, running_var },
            vec![x, gamma, beta],
            ShapeKind::PerSample(xd),
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let kind = match &self.node(x)?.kind {
            ShapeKind::PerSample(d) => ShapeKind::PerSample(d.clone()),
            k => return Err(shape_err("relu", format!("input must be batched, got {k:?}"))),
        };
        Ok(self.push(Op::Relu, vec![x], kind))
    }

    /// Elementwise sum of two operands with identical dims.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let kind = self.elementwise_kind("add", &[a, b])?;
        Ok(self.push(Op::Add, vec![a, b], kind))
    }

    /// Residual connection; same semantics as [`Graph::add`].
    pub fn residual_add(&mut self, trunk: NodeId, skip: NodeId) -> Result<NodeId, GraphError> {
        self.add(trunk, skip)
    }

    /// N-ary elementwise sum (n >= 2). Used for feature fusion so the
    /// fan-in stays visible as one node.
    pub fn sum_n(&mut self, terms: &[NodeId]) -> Result<NodeId, GraphError> {
        if terms.len() < 2 {
            return Err(shape_err("sum_n", format!("needs at least 2 terms, got {}", terms.len())));
        }
        let kind = self.elementwise_kind("sum_n", terms)?;
        Ok(self.push(Op::SumN, terms.to_vec(), kind))
    }

    fn elementwise_kind(&self, op: &'static str, terms: &[NodeId]) -> Result<ShapeKind, GraphError> {
        let mut dims: Option<Vec<usize>> = None;
        let mut scalar = 0usize;
        let mut batched = 0usize;
        for &t in terms {
            match &self.node(t)?.kind {
                ShapeKind::Scalar => scalar += 1,
                ShapeKind::PerSample(d) | ShapeKind::Static(d) => {
                    if matches!(self.nodes[t.0].kind, ShapeKind::PerSample(_)) {
                        batched += 1;
                    }
                    match &dims {
                        None => dims = Some(d.clone()),
                        Some(prev) if prev == d => {}
                        Some(prev) => {
                            return Err(shape_err(
                                op,
                                format!("operand dims {d:?} differ from {prev:?}"),
                            ))
                        }
                    }
                }
            }
        }
        if scalar == terms.len() {
            return Ok(ShapeKind::Scalar);
        }
        if scalar > 0 {
            return Err(shape_err(op, "cannot mix scalar and tensor operands".to_string()));
        }
        let dims = dims.expect("nonempty");
        if batched > 0 {
            Ok(ShapeKind::PerSample(dims))
        } else {
            Ok(ShapeKind::Static(dims))
        }
    }

    pub fn max_pool2d(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        let xd = match &self.node(x)?.kind {
            ShapeKind::PerSample(d) if d.len() == 3 => d.clone(),
            k => return Err(shape_err("max_pool2d", format!("input must be batched [c,h,w], got {k:?}"))),
        };
        let ho = kernels::conv_out_extent(xd[1], kernel, stride, pad);
        let wo = kernels::conv_out_extent(xd[2], kernel, stride, pad);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(self.push(
                Op::MaxPool2d { kernel, stride, pad },
                vec![x],
                ShapeKind::PerSample(vec![xd[0], ho, wo]),
            )),
            _ => Err(shape_err(
                "max_pool2d",
                format!("kernel {kernel} stride {stride} pad {pad} does not fit {}x{}", xd[1], xd[2]),
            )),
        }
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let xd = match &self.node(x)?.kind {
            ShapeKind::PerSample(d) if d.len() == 3 => d.clone(),
            k => {
                return Err(shape_err(
                    "global_avg_pool",
                    format!("input must be batched [c,h,w], got {k:?}"),
                ))
            }
        };
        Ok(self.push(Op::GlobalAvgPool, vec![x], ShapeKind::PerSample(vec![xd[0]])))
    }

    /// `x w + b` with `x` batched `[f]`, `w` static `[f, g]`, `b` static `[g]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let f = match &self.node(x)?.kind {
            ShapeKind::PerSample(d) if d.len() == 1 => d[0],
            k => return Err(shape_err("dense", format!("input must be batched [f], got {k:?}"))),
        };
        let g = match &self.node(w)?.kind {
            ShapeKind::Static(d) if d.len() == 2 && d[0] == f => d[1],
            k => return Err(shape_err("dense", format!("weight must be static [{f}, g], got {k:?}"))),
        };
        match &self.node(b)?.kind {
            ShapeKind::Static(d) if d == &vec![g] => {}
            k => return Err(shape_err("dense", format!("bias must be static [{g}], got {k:?}"))),
        }
        Ok(self.push(Op::Dense, vec![x, w, b], ShapeKind::PerSample(vec![g])))
    }

    /// Batch-mean binary cross-entropy on logits. Labels are fed as an
    /// input; gradients flow to the logits only.
    pub fn sigmoid_bce_loss(&mut self, logit: NodeId, label: NodeId) -> Result<NodeId, GraphError> {
        for (name, id) in [("logit", logit), ("label", label)] {
            match &self.node(id)?.kind {
                ShapeKind::PerSample(d) if d == &vec![1] => {}
                k => {
                    return Err(shape_err(
                        "sigmoid_bce_loss",
                        format!("{name} must be batched [1], got {k:?}"),
                    ))
                }
            }
        }
        Ok(self.push(Op::SigmoidBce, vec![logit, label], ShapeKind::Scalar))
    }

    // ---- inspection ------------------------------------------------------

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs_of(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn kind(&self, id: NodeId) -> &ShapeKind {
        &self.nodes[id.0].kind
    }

    pub fn set_tag(&mut self, id: NodeId, tag: &str) {
        self.nodes[id.0].tag = Some(tag.to_string());
    }

    pub fn tag_of(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].tag.as_deref()
    }

    pub fn find_tag(&self, tag: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.tag.as_deref() == Some(tag))
            .map(NodeId)
    }

    pub fn tagged_prefix(&self, prefix: &str) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.tag.as_deref().is_some_and(|t| t.starts_with(prefix)))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// True when `ancestor` can influence `descendant` through graph edges.
    pub fn reaches(&self, ancestor: NodeId, descendant: NodeId) -> bool {
        let mut stack = vec![descendant];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(id) = stack.pop() {
            if id == ancestor {
                return true;
            }
            if seen[id.0] {
                continue;
            }
            seen[id.0] = true;
            for &inp in &self.nodes[id.0].inputs {
                stack.push(inp);
            }
        }
        false
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    pub fn node_grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|n| n.grad.as_deref())
    }

    pub fn batch(&self) -> Option<usize> {
        self.batch
    }

    // ---- parameters ------------------------------------------------------

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &ParamEntry {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.params[id.0]
    }

    /// All parameters in registration order.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_param_ids(&self) -> Vec<ParamId> {
        self.param_ids().filter(|&id| self.params[id.0].trainable).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- execution -------------------------------------------------------

    /// Runs the graph on a batch. `feeds` must cover every `Input` node,
    /// each fed `[batch, dims...]` with a common batch size.
    pub fn forward(&mut self, feeds: &[(NodeId, &Tensor)], mode: Mode) -> Result<(), GraphError> {
        let mut batch: Option<usize> = None;
        let mut fed = vec![false; self.nodes.len()];
        for &(id, tensor) in feeds {
            let node = self.nodes.get_mut(id.0).ok_or(GraphError::UnknownNode(id.0))?;
            if !matches!(node.op, Op::Input) {
                return Err(GraphError::FeedNotInput(id.0));
            }
            let dims = node.kind.dims();
            let shape = tensor.shape();
            if shape.len() != dims.len() + 1 || &shape[1..] != dims || shape[0] == 0 {
                return Err(GraphError::FeedShape {
                    node: id.0,
                    detail: format!("expected [n, {dims:?}], got {shape:?}"),
                });
            }
            match batch {
                None => batch = Some(shape[0]),
                Some(n) if n == shape[0] => {}
                Some(n) => return Err(GraphError::BatchMismatch { expected: n, got: shape[0] }),
            }
            node.value = Some(tensor.clone());
            fed[id.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Input) && !fed[i] {
                return Err(GraphError::FeedMissing(i));
            }
        }
        let n = batch.ok_or(GraphError::FeedMissing(0))?;
        self.batch = Some(n);

        let nodes = &mut self.nodes;
        let params = &mut self.params;
        // Running-stat EMA updates are deferred to the end of the pass:
        // train mode never reads them, so the result is unchanged, and it
        // keeps the node loop free of parameter writes.
        let mut pending: Vec<(ParamId, Vec<f64>, ParamId, Vec<f64>)> = Vec::new();
        for i in 0..nodes.len() {
            let (prev, rest) = nodes.split_at_mut(i);
            let node = &mut rest[0];
            let out_len = node.kind.value_len(n);
            match node.op {
                Op::Input | Op::Const | Op::Param { .. } => {}
                Op::Conv2d { stride, pad } => {
                    let x = operand(prev, params, node.inputs[0]);
                    let w = operand(prev, params, node.inputs[1]);
                    let xd = prev[node.inputs[0].0].kind.dims().to_vec();
                    let wd = prev[node.inputs[1].0].kind.dims().to_vec();
                    let od = node.kind.dims().to_vec();
                    let mut out = vec![0.0; out_len];
                    kernels::conv2d_forward(
                        x, n, xd[0], xd[1], xd[2], w, wd[0], wd[2], stride, pad, od[1], od[2],
                        &mut out,
                    );
                    node.value = Some(value_tensor(&node.kind, n, out));
                }
                Op::BatchNorm { epsilon, momentum, running_mean, running_var } => {
                    let x = operand(prev, params, node.inputs[0]);
                    let gamma = operand(prev, params, node.inputs[1]);
                    let beta = operand(prev, params, node.inputs[2]);
                    let xd = prev[node.inputs[0].0].kind.dims().to_vec();
                    let (c, hw) = (xd[0], xd[1] * xd[2]);
                    let rm = params[running_mean.0].value.data();
                    let rv = params[running_var.0].value.data();
                    let mut out = vec![0.0; out_len];
                    let stats = kernels::batch_norm_forward(
                        x,
                        n,
                        c,
                        hw,
                        gamma,
                        beta,
                        rm,
                        rv,
                        epsilon,
                        mode == Mode::Train,
                        &mut out,
                    );
                    if mode == Mode::Train {
                        let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
                            old.iter()
                                .zip(new)
                                .map(|(&o, &b)| momentum * o + (1.0 - momentum) * b)
                                .collect()
                        };
                        pending.push((
                            running_mean,
                            blend(rm, &stats.batch_mean),
                            running_var,
                            blend(rv, &stats.batch_var),
                        ));
                    }
                    node.cache = Cache::Bn(stats);
                    node.value = Some(value_tensor(&node.kind, n, out));
                }
                Op::Relu => {
                    let x = operand(prev, params, node.inputs[0]);
                    let out = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    node.value = Some(value_tensor(&node.kind, n, out));
                }
                Op::Add | Op::SumN => {
                    let mut out = vec![0.0; out_len];
                    let out_batched = matches!(node.kind, ShapeKind::PerSample(_));
                    let per = node.kind.per_sample_numel();
                    for &inp in &node.inputs {
                        let v = operand(prev, params, inp);
                        let in_batched = matches!(prev[inp.0].kind, ShapeKind::PerSample(_));
                        if in_batched == out_batched {
                            for (o, &a) in out.iter_mut().zip(v) {
                                *o += a;
                            }
                        } else {
                            // Static operand broadcast over the batch.
                            for b in 0..n {
                                let dst = &mut out[b * per..][..per];
                                for (o, &a) in dst.iter_mut().zip(v) {
                                    *o += a;
                                }
                            }
                        }
                    }
                    node.value = Some(value_tensor(&node.kind, n, out));
                }
                Op::MaxPool2d { kernel, stride, pad } => {
                    let x = operand(prev, params, node.inputs[0]);
                    let xd = prev[node.inputs[0].0].kind.dims().to_vec();
                    let od = node.kind.dims().to_vec();
                    let mut out = vec![0.0; out_len];
                    let mut argmax = Vec::new();
                    kernels::max_pool_forward(
                        x, n, xd[0], xd[1], xd[2], kernel, stride, pad, od[1], od[2], &mut out,
                        &mut argmax,
                    );
                    node.cache = Cache::Pool(argmax);
                    node.value = Some(value_tensor(&node.kind, n, out));
                }
                Op::GlobalAvgPool => {
                    let x = operand(prev, params, node.inputs[0]);
                    let xd = prev[node.inputs[0].0].kind.dims().to_vec();
                    let (c, hw) = (xd[0], xd[1] * xd[2]);
                    let mut out = vec![0.0; out_len];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let mut acc = 0.0;
                            for i in 0..hw {
                                acc += x[base + i];
                            }
                            out[b * c + ch] = acc / hw as f64;
                        }
                    }
                    node.value = Some(value_tensor(&node.kind, n, out));
                }
                Op::Dense => {
                    let x = operand(prev, params, node.inputs[0]);
                    let w = operand(prev, params, node.inputs[1]);
                    let b = operand(prev, params, node.inputs[2]);
                    let f = prev[node.inputs[0].0].kind.dims()[0];
                    let g = node.kind.dims()[0];
                    let mut out = vec![0.0; out_len];
                    kernels::dense_forward(x, n, f, g, w, b, &mut out);
                    node.value = Some(value_tensor(&node.kind, n, out));
                }
                Op::SigmoidBce => {
                    let logits = operand(prev, params, node.inputs[0]);
                    let labels = operand(prev, params, node.inputs[1]);
                    let loss = kernels::bce_forward(logits, labels);
                    node.value = Some(Tensor::scalar(loss));
                }
            }
        }
        for (rm, new_mean, rv, new_var) in pending {
            params[rm.0].value.data_mut().copy_from_slice(&new_mean);
            params[rv.0].value.data_mut().copy_from_slice(&new_var);
        }
        Ok(())
    }

    /// Scalar value of a loss node after forward.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64, GraphError> {
        let node = self.node(id)?;
        if node.kind != ShapeKind::Scalar {
            return Err(GraphError::LossNotScalar(id.0));
        }
        node.value
            .as_ref()
            .map(|t| t.data()[0])
            .ok_or(GraphError::ValueMissing(id.0))
    }

    /// Accumulates d(loss)/d(param) into every parameter's grad buffer.
    /// Node gradients from a previous backward are discarded first;
    /// parameter gradients accumulate across calls until `zero_grad`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        {
            let node = self.node(loss)?;
            if node.kind != ShapeKind::Scalar {
                return Err(GraphError::LossNotScalar(loss.0));
            }
            if node.value.is_none() {
                return Err(GraphError::ValueMissing(loss.0));
            }
        }
        let n = self.batch.ok_or(GraphError::ValueMissing(loss.0))?;
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        let nodes = &mut self.nodes;
        let params = &mut self.params;
        for i in (0..=loss.0).rev() {
            let (prev, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(grad) = node.grad.as_deref() else { continue };
            // Contributions are computed read-only, then applied, so a node
            // that is both a value source and a gradient sink (e.g. conv
            // input) never needs simultaneous borrows.
            let mut contributions: Vec<(NodeId, Vec<f64>)> = Vec::new();
            match node.op {
                Op::Input | Op::Const => {}
                Op::Param { param } => {
                    let sink = params[param.0].value.grad_mut();
                    for (s, &g) in sink.iter_mut().zip(grad) {
                        *s += g;
                    }
                }
                Op::Conv2d { stride, pad } => {
                    let x = operand(prev, params, node.inputs[0]);
                    let w = operand(prev, params, node.inputs[1]);
                    let xd = prev[node.inputs[0].0].kind.dims().to_vec();
                    let wd = prev[node.inputs[1].0].kind.dims().to_vec();
                    let od = node.kind.dims().to_vec();
                    let want_dx = wants_grad(&prev[node.inputs[0].0]);
                    let want_dw = wants_grad(&prev[node.inputs[1].0]);
                    let mut dx = if want_dx { Some(vec![0.0; x.len()]) } else { None };
                    let mut dw = if want_dw { Some(vec![0.0; w.len()]) } else { None };
                    kernels::conv2d_backward(
                        x,
                        n,
                        xd[0],
                        xd[1],
                        xd[2],
                        w,
                        wd[0],
                        wd[2],
                        stride,
                        pad,
                        od[1],
                        od[2],
                        grad,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                    );
                    if let Some(dx) = dx {
                        contributions.push((node.inputs[0], dx));
                    }
                    if let Some(dw) = dw {
                        contributions.push((node.inputs[1], dw));
                    }
                }
                Op::BatchNorm { .. } => {
                    let Cache::Bn(stats) = &node.cache else {
                        return Err(GraphError::ValueMissing(i));
                    };
                    let gamma = operand(prev, params, node.inputs[1]);
                    let xd = prev[node.inputs[0].0].kind.dims().to_vec();
                    let (c, hw) = (xd[0], xd[1] * xd[2]);
                    let want_dx = wants_grad(&prev[node.inputs[0].0]);
                    let mut dx = if want_dx { Some(vec![0.0; n * c * hw]) } else { None };
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    kernels::batch_norm_backward(
                        stats,
                        n,
                        c,
                        hw,
                        gamma,
                        grad,
                        dx.as_deref_mut(),
                        Some(&mut dgamma),
                        Some(&mut dbeta),
                    );
                    if let Some(dx) = dx {
                        contributions.push((node.inputs[0], dx));
                    }
                    contributions.push((node.inputs[1], dgamma));
                    contributions.push((node.inputs[2], dbeta));
                }
                Op::Relu => {
                    let x = operand(prev, params, node.inputs[0]);
                    let dx = x
                        .iter()
                        .zip(grad)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    contributions.push((node.inputs[0], dx));
                }
                Op::Add | Op::SumN => {
                    let out_batched = matches!(node.kind, ShapeKind::PerSample(_));
                    let per = node.kind.per_sample_numel();
                    for &inp in &node.inputs {
                        if !wants_grad(&prev[inp.0]) {
                            continue;
                        }
                        let in_batched = matches!(prev[inp.0].kind, ShapeKind::PerSample(_));
                        if in_batched == out_batched {
                            contributions.push((inp, grad.to_vec()));
                        } else {
                            // Broadcast static operand: fold the batch.
                            let mut dv = vec![0.0; per];
                            for b in 0..n {
                                let src = &grad[b * per..][..per];
                                for (d, &g) in dv.iter_mut().zip(src) {
                                    *d += g;
                                }
                            }
                            contributions.push((inp, dv));
                        }
                    }
                }
                Op::MaxPool2d { .. } => {
                    let Cache::Pool(argmax) = &node.cache else {
                        return Err(GraphError::ValueMissing(i));
                    };
                    let x_len = operand(prev, params, node.inputs[0]).len();
                    let mut dx = vec![0.0; x_len];
                    for (oi, &src) in argmax.iter().enumerate() {
                        if src != usize::MAX {
                            dx[src] += grad[oi];
                        }
                    }
                    contributions.push((node.inputs[0], dx));
                }
                Op::GlobalAvgPool => {
                    let xd = prev[node.inputs[0].0].kind.dims().to_vec();
                    let (c, hw) = (xd[0], xd[1] * xd[2]);
                    let mut dx = vec![0.0; n * c * hw];
                    for b in 0..n {
                        for ch in 0..c {
                            let g = grad[b * c + ch] / hw as f64;
                            let base = (b * c + ch) * hw;
                            for i in 0..hw {
                                dx[base + i] = g;
                            }
                        }
                    }
                    contributions.push((node.inputs[0], dx));
                }
                Op::Dense => {
                    let x = operand(prev, params, node.inputs[0]);
                    let w = operand(prev, params, node.inputs[1]);
                    let f = prev[node.inputs[0].0].kind.dims()[0];
                    let g = node.kind.dims()[0];
                    let want_dx = wants_grad(&prev[node.inputs[0].0]);
                    let mut dx = if want_dx { Some(vec![0.0; n * f]) } else { None };
                    let mut dw = vec![0.0; f * g];
                    let mut db = vec![0.0; g];
                    kernels::dense_backward(
                        x,
                        n,
                        f,
                        g,
                        w,
                        grad,
                        dx.as_deref_mut(),
                        Some(&mut dw),
                        Some(&mut db),
                    );
                    if let Some(dx) = dx {
                        contributions.push((node.inputs[0], dx));
                    }
                    contributions.push((node.inputs[1], dw));
                    contributions.push((node.inputs[2], db));
                }
                Op::SigmoidBce => {
                    let logits = operand(prev, params, node.inputs[0]);
                    let labels = operand(prev, params, node.inputs[1]);
                    let mut dl = vec![0.0; logits.len()];
                    kernels::bce_backward(logits, labels, grad[0], &mut dl);
                    contributions.push((node.inputs[0], dl));
                }
            }
            for (target, c) in contributions {
                let t = &mut prev[target.0];
                if !wants_grad(t) {
                    continue;
                }
                let len = t.kind.value_len(n);
                let sink = t.grad.get_or_insert_with(|| vec![0.0; len]);
                for (s, g) in sink.iter_mut().zip(c) {
                    *s += g;
                }
            }
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::Shape { op, detail }
}

fn wants_grad(node: &Node) -> bool {
    !matches!(node.op, Op::Input | Op::Const)
}

fn value_tensor(kind: &ShapeKind, batch: usize, data: Vec<f64>) -> Tensor {
    let shape: Vec<usize> = match kind {
        ShapeKind::PerSample(d) => {
            let mut s = vec![batch];
            s.extend_from_slice(d);
            s
        }
        ShapeKind::Static(d) => d.clone(),
        ShapeKind::Scalar => vec![1],
    };
    Tensor::from_vec(&shape, data).expect("kernel output length matches kind")
}

/// Value slice of an operand node; parameters resolve to their entry.
fn operand<'a>(prev: &'a [Node], params: &'a [ParamEntry], id: NodeId) -> &'a [f64] {
    let node = &prev[id.0];
    match node.op {
        Op::Param { param } => params[param.0].value.data(),
        _ => node.value.as_ref().expect("topological order").data(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_feed(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn dense_bce_forward_matches_hand_values() {
        let mut g = Graph::new();
        let x = g.input(&[2]);
        let label = g.input(&[1]);
        let w = g.add_param("w", Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap(), true).unwrap();
        let b = g.add_param("b", Tensor::from_vec(&[1], vec![0.5]).unwrap(), true).unwrap();
        let wn = g.param_node(w);
        let bn = g.param_node(b);
        let logit = g.dense(x, wn, bn).unwrap();
        let loss = g.sigmoid_bce_loss(logit, label).unwrap();

        let xv = simple_feed(&[1, 2], &[1.0, 1.0]);
        let yv = simple_feed(&[1, 1], &[1.0]);
        g.forward(&[(x, &xv), (label, &yv)], Mode::Eval).unwrap();
        let logit_v = g.value(logit).unwrap().data()[0];
        assert!((logit_v - 3.5).abs() < 1e-15);
        let expect = crate::math::ln_1p(crate::math::exp(-3.5));
        assert!((g.scalar_value(loss).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_logit_loss_is_ln_two_and_gradient_is_half() {
        let mut g = Graph::new();
        let x = g.input(&[1]);
        let label = g.input(&[1]);
        let w = g.add_param("w", Tensor::from_vec(&[1, 1], vec![0.0]).unwrap(), true).unwrap();
        let b = g.add_param("b", Tensor::zeros(&[1]), true).unwrap();
        let wn = g.param_node(w);
        let bn = g.param_node(b);
        let logit = g.dense(x, wn, bn).unwrap();
        let loss = g.sigmoid_bce_loss(logit, label).unwrap();

        let xv = simple_feed(&[1, 1], &[2.0]);
        let yv = simple_feed(&[1, 1], &[1.0]);
        g.forward(&[(x, &xv), (label, &yv)], Mode::Train).unwrap();
        assert!((g.scalar_value(loss).unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
        g.backward(loss).unwrap();
        // dL/dlogit = sigmoid(0) - 1 = -0.5; db = -0.5, dw = x * -0.5.
        assert!((g.param(b).value().grad().unwrap()[0] + 0.5).abs() < 1e-15);
        assert!((g.param(w).value().grad().unwrap()[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn static_constant_broadcasts_over_batch_in_sums() {
        let mut g = Graph::new();
        let x = g.input(&[3]);
        let c = g.constant(Tensor::from_vec(&[3], vec![10.0, 20.0, 30.0]).unwrap());
        let s = g.sum_n(&[x, c, x]).unwrap();
        let xv = simple_feed(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        g.forward(&[(x, &xv)], Mode::Eval).unwrap();
        assert_eq!(
            g.value(s).unwrap().data(),
            &[12.0, 24.0, 36.0, 18.0, 30.0, 42.0]
        );
        assert_eq!(g.value(s).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn zero_const_add_is_identity() {
        let mut g = Graph::new();
        let x = g.input(&[2]);
        let z = g.zero_const(&[2]);
        let s = g.add(x, z).unwrap();
        let xv = simple_feed(&[2, 2], &[0.5, -1.25, 3.0, 0.0]);
        g.forward(&[(x, &xv)], Mode::Eval).unwrap();
        assert_eq!(g.value(s).unwrap().data(), xv.data());
    }

    #[test]
    fn batch_norm_updates_running_stats_with_ema() {
        let mut g = Graph::new();
        let x = g.input(&[1, 1, 2]);
        let gamma = g.add_param("g", Tensor::filled(&[1], 1.0), true).unwrap();
        let beta = g.add_param("be", Tensor::zeros(&[1]), true).unwrap();
        let rm = g.add_param("rm", Tensor::zeros(&[1]), false).unwrap();
        let rv = g.add_param("rv", Tensor::filled(&[1], 1.0), false).unwrap();
        let gn = g.param_node(gamma);
        let bn = g.param_node(beta);
        let y = g.batch_norm(x, gn, bn, rm, rv, 1e-5, 0.9).unwrap();

        // One batch element, values [2, 4]: mean 3, biased var 1.
        let xv = simple_feed(&[1, 1, 1, 2], &[2.0, 4.0]);
        g.forward(&[(x, &xv)], Mode::Train).unwrap();
        assert!((g.param(rm).value().data()[0] - 0.3).abs() < 1e-12);
        assert!((g.param(rv).value().data()[0] - (0.9 + 0.1)).abs() < 1e-12);
        let out = g.value(y).unwrap().data().to_vec();
        assert!((out[0] + out[1]).abs() < 1e-12);

        // Eval mode uses the running stats, not the batch stats.
        g.forward(&[(x, &xv)], Mode::Eval).unwrap();
        let out = g.value(y).unwrap().data().to_vec();
        let inv = 1.0 / crate::math::sqrt(1.0 + 1e-5);
        assert!((out[0] - (2.0 - 0.3) * inv).abs() < 1e-12);
        // Eval mode must not touch the running stats.
        assert!((g.param(rm).value().data()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn running_stats_must_be_frozen() {
        let mut g = Graph::new();
        let x = g.input(&[1, 2, 2]);
        let gamma = g.add_param("g", Tensor::filled(&[1], 1.0), true).unwrap();
        let beta = g.add_param("be", Tensor::zeros(&[1]), true).unwrap();
        let rm = g.add_param("rm", Tensor::zeros(&[1]), true).unwrap();
        let rv = g.add_param("rv", Tensor::filled(&[1], 1.0), false).unwrap();
        let gn = g.param_node(gamma);
        let bn = g.param_node(beta);
        assert!(matches!(
            g.batch_norm(x, gn, bn, rm, rv, 1e-5, 0.9),
            Err(GraphError::RunningStatNotFrozen(_))
        ));
    }

    #[test]
    fn residual_add_routes_gradient_to_both_operands() {
        let mut g = Graph::new();
        let x = g.input(&[1]);
        let label = g.input(&[1]);
        let w1 = g.add_param("w1", Tensor::from_vec(&[1, 1], vec![2.0]).unwrap(), true).unwrap();
        let b1 = g.add_param("b1", Tensor::zeros(&[1]), true).unwrap();
        let w1n = g.param_node(w1);
        let b1n = g.param_node(b1);
        let h = g.dense(x, w1n, b1n).unwrap();
        let s = g.residual_add(h, x).unwrap();
        let loss = g.sigmoid_bce_loss(s, label).unwrap();
        let xv = simple_feed(&[1, 1], &[1.0]);
        let yv = simple_feed(&[1, 1], &[0.0]);
        g.forward(&[(x, &xv), (label, &yv)], Mode::Train).unwrap();
        // logit = 2 * 1 + 0 + 1 = 3.
        assert!((g.value(s).unwrap().data()[0] - 3.0).abs() < 1e-15);
        g.backward(loss).unwrap();
        let sig3 = crate::math::sigmoid(3.0);
        assert!((g.param(w1).value().grad().unwrap()[0] - sig3).abs() < 1e-12);
        assert!((g.param(b1).value().grad().unwrap()[0] - sig3).abs() < 1e-12);
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let mut g = Graph::new();
        let x = g.input(&[1]);
        let label = g.input(&[1]);
        let w = g.add_param("w", Tensor::from_vec(&[1, 1], vec![0.0]).unwrap(), true).unwrap();
        let b = g.add_param("b", Tensor::zeros(&[1]), true).unwrap();
        let wn = g.param_node(w);
        let bn = g.param_node(b);
        let logit = g.dense(x, wn, bn).unwrap();
        let loss = g.sigmoid_bce_loss(logit, label).unwrap();
        let xv = simple_feed(&[1, 1], &[1.0]);
        let yv = simple_feed(&[1, 1], &[1.0]);
        g.forward(&[(x, &xv), (label, &yv)], Mode::Train).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert!((g.param(b).value().grad().unwrap()[0] + 1.0).abs() < 1e-12);
        g.zero_grad();
        assert!(g.param(b).value().grad().is_none());
    }

    #[test]
    fn forward_rejects_bad_feeds() {
        let mut g = Graph::new();
        let x = g.input(&[2]);
        let y = g.input(&[1]);
        let s = g.relu(x).unwrap();
        let _ = s;
        let xv = simple_feed(&[1, 2], &[1.0, 2.0]);
        let bad = simple_feed(&[1, 3], &[1.0, 2.0, 3.0]);
        let yv = simple_feed(&[2, 1], &[0.0, 1.0]);
        assert!(matches!(
            g.forward(&[(x, &xv)], Mode::Eval),
            Err(GraphError::FeedMissing(_))
        ));
        let y1 = simple_feed(&[1, 1], &[0.0]);
        assert!(matches!(
            g.forward(&[(x, &bad), (y, &y1)], Mode::Eval),
            Err(GraphError::FeedShape { .. })
        ));
        assert!(matches!(
            g.forward(&[(x, &xv), (y, &yv)], Mode::Eval),
            Err(GraphError::BatchMismatch { .. })
        ));
    }

    #[test]
    fn reaches_follows_edges_only() {
        let mut g = Graph::new();
        let a = g.input(&[1]);
        let b = g.input(&[1]);
        let ra = g.relu(a).unwrap();
        let rb = g.relu(b).unwrap();
        let s = g.add(ra, rb).unwrap();
        assert!(g.reaches(a, s));
        assert!(g.reaches(b, s));
        assert!(g.reaches(a, ra));
        assert!(!g.reaches(a, rb));
        assert!(!g.reaches(s, a));
    }

    #[test]
    fn tags_are_searchable() {
        let mut g = Graph::new();
        let a = g.input(&[1]);
        let r = g.relu(a).unwrap();
        g.set_tag(r, "net.level1.out");
        assert_eq!(g.find_tag("net.level1.out"), Some(r));
        assert_eq!(g.tagged_prefix("net.level1"), alloc::vec![r]);
        assert_eq!(g.find_tag("missing"), None);
    }

    #[test]
    fn sum_n_requires_two_terms_and_equal_dims() {
        let mut g = Graph::new();
        let a = g.input(&[2]);
        let b = g.input(&[3]);
        assert!(g.sum_n(&[a]).is_err());
        assert!(g.sum_n(&[a, b]).is_err());
    }
}
