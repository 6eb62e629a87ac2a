use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kernels::{self, Plane};
use super::GraphError;
use crate::tensor::{digest_u64, hash_into, Tensor};

pub type NodeId = usize;

/// Which optimizer owns a parameter slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotTag {
    Weight,
    Arch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub tag: SlotTag,
    pub value: Tensor,
}

/// Primitive operations. Spatial ops expect `[channels, height, width]`
/// per-example feature maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Input,
    Param(usize),
    /// `[x, weight, bias]` with `weight: [out, in]`.
    Affine,
    /// `[x, weight]` with `weight: [out, in, k, k]`, stride 1, zero padding `k/2`.
    Conv2d,
    MaxPool3,
    AvgPool3,
    Relu,
    /// Elementwise `scale * x + shift` with fixed constants.
    ScaleShift {
        scale: f64,
        shift: f64,
    },
    /// Softmax over the last axis.
    Softmax,
    /// `[weights, term_0, .., term_{K-1}]`: sum of `weights[row, k] * term_k`.
    WeightedSum {
        row: usize,
    },
    Add,
    Zero,
    /// Concatenation along the channel axis.
    Concat,
    GlobalAvgPool,
    Flatten,
    SumAll,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Affine => "affine",
            Op::Conv2d => "conv2d",
            Op::MaxPool3 => "maxpool3",
            Op::AvgPool3 => "avgpool3",
            Op::Relu => "relu",
            Op::ScaleShift { .. } => "scale_shift",
            Op::Softmax => "softmax",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Add => "add",
            Op::Zero => "zero",
            Op::Concat => "concat",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Flatten => "flatten",
            Op::SumAll => "sum_all",
        }
    }
}

/// Shape of a node's value. Batched values carry a leading batch axis that
/// is not part of `dims`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeShape {
    pub batched: bool,
    pub dims: Vec<usize>,
}

impl NodeShape {
    fn unbatched(dims: &[usize]) -> Self {
        Self {
            batched: false,
            dims: dims.to_vec(),
        }
    }

    fn batched(dims: Vec<usize>) -> Self {
        Self { batched: true, dims }
    }

    fn full(&self, batch: usize) -> Vec<usize> {
        if self.batched {
            std::iter::once(batch).chain(self.dims.iter().copied()).collect()
        } else {
            self.dims.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: NodeShape,
}

/// Which slot tags to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub weights: bool,
    pub arch: bool,
}

impl GradRequest {
    pub const ALL: Self = Self { weights: true, arch: true };
    pub const WEIGHTS: Self = Self {
        weights: true,
        arch: false,
    };
    pub const ARCH: Self = Self {
        weights: false,
        arch: true,
    };

    fn wants(&self, tag: SlotTag) -> bool {
        match tag {
            SlotTag::Weight => self.weights,
            SlotTag::Arch => self.arch,
        }
    }
}

/// A static acyclic graph of primitive ops plus its parameter slots.
///
/// Nodes are appended in topological order; every builder method validates
/// input shapes and returns the new node's id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeGraph {
    input_dims: Vec<usize>,
    nodes: Vec<Node>,
    slots: Vec<ParamSlot>,
    slot_nodes: Vec<NodeId>,
    names: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
}

/// Values of every node from one forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    batch: usize,
    values: Vec<Option<Tensor>>,
}

impl Activations {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Value of a non-parameter node.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node).and_then(|v| v.as_ref())
    }
}

/// Gradients for every parameter slot, indexed like the graph's slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.slots.get(slot).and_then(|g| g.as_ref())
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(Tensor::is_finite)
    }

    pub(crate) fn accumulate(&mut self, other: Gradients) {
        for (mine, theirs) in self.slots.iter_mut().zip(other.slots) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_scaled(&t, 1.0),
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }
}

impl ComputeGraph {
    /// Empty graph taking per-example inputs of shape `input_dims`.
    pub fn new(input_dims: &[usize]) -> Self {
        Self {
            input_dims: input_dims.to_vec(),
            nodes: vec![Node {
                op: Op::Input,
                inputs: vec![],
                shape: NodeShape::batched(input_dims.to_vec()),
            }],
            slots: vec![],
            slot_nodes: vec![],
            names: BTreeMap::new(),
            output: None,
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node].op
    }

    pub fn inputs_of(&self, node: NodeId) -> &[NodeId] {
        &self.nodes[node].inputs
    }

    pub fn shape(&self, node: NodeId) -> &NodeShape {
        &self.nodes[node].shape
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn set_name(&mut self, node: NodeId, name: &str) {
        self.names.insert(name.to_string(), node);
    }

    pub fn named(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slot(&self, index: usize) -> &ParamSlot {
        &self.slots[index]
    }

    pub fn slot_value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.slots[index].value
    }

    pub fn slot_node(&self, index: usize) -> NodeId {
        self.slot_nodes[index]
    }

    pub fn slots_tagged(&self, tag: SlotTag) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().enumerate().filter(move |(_, s)| s.tag == tag).map(|(i, _)| i)
    }

    pub fn param_count(&self, tag: SlotTag) -> usize {
        self.slots_tagged(tag).map(|i| self.slots[i].value.len()).sum()
    }

    /// Digest of every slot carrying `tag`.
    pub fn tag_hash(&self, tag: SlotTag) -> u64 {
        let mut h = Sha256::new();
        for i in self.slots_tagged(tag) {
            h.update(self.slots[i].name.as_bytes());
            hash_into(&mut h, &self.slots[i].value);
        }
        digest_u64(h)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: NodeShape) -> NodeId {
        self.nodes.push(Node { op, inputs, shape });
        self.nodes.len() - 1
    }

    fn check_node(&self, node: NodeId) -> Result<&NodeShape, GraphError> {
        self.nodes.get(node).map(|n| &n.shape).ok_or(GraphError::UnknownNode(node))
    }

    fn mismatch(&self, op: &Op, detail: String) -> GraphError {
        GraphError::ShapeMismatch {
            node: self.nodes.len(),
            op: op.name(),
            detail,
        }
    }

    /// Registers a parameter slot and its (unique) graph node.
    pub fn param(&mut self, name: &str, tag: SlotTag, value: Tensor) -> NodeId {
        let slot = self.slots.len();
        let shape = NodeShape::unbatched(value.shape());
        self.slots.push(ParamSlot {
            name: name.to_string(),
            tag,
            value,
        });
        let node = self.push(Op::Param(slot), vec![], shape);
        self.slot_nodes.push(node);
        node
    }

    pub fn affine(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        let (xs, ws, bs) = (
            self.check_node(x)?.clone(),
            self.check_node(weight)?.clone(),
            self.check_node(bias)?.clone(),
        );
        let ok = xs.batched
            && xs.dims.len() == 1
            && !ws.batched
            && ws.dims.len() == 2
            && ws.dims[1] == xs.dims[0]
            && !bs.batched
            && bs.dims == [ws.dims[0]];
        if !ok {
            return Err(self.mismatch(&Op::Affine, format!("x {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        Ok(self.push(Op::Affine, vec![x, weight, bias], NodeShape::batched(vec![ws.dims[0]])))
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId) -> Result<NodeId, GraphError> {
        let (xs, ws) = (self.check_node(x)?.clone(), self.check_node(weight)?.clone());
        let ok = xs.batched
            && xs.dims.len() == 3
            && !ws.batched
            && ws.dims.len() == 4
            && ws.dims[1] == xs.dims[0]
            && ws.dims[2] == ws.dims[3]
            && ws.dims[2] % 2 == 1;
        if !ok {
            return Err(self.mismatch(&Op::Conv2d, format!("x {xs:?}, weight {ws:?}")));
        }
        let dims = vec![ws.dims[0], xs.dims[1], xs.dims[2]];
        Ok(self.push(Op::Conv2d, vec![x, weight], NodeShape::batched(dims)))
    }

    fn spatial_unary(&mut self, op: Op, x: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.check_node(x)?.clone();
        if !(xs.batched && xs.dims.len() == 3) {
            return Err(self.mismatch(&op, format!("expected batched [c, h, w], got {xs:?}")));
        }
        Ok(self.push(op, vec![x], xs))
    }

    pub fn maxpool3(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.spatial_unary(Op::MaxPool3, x)
    }

    pub fn avgpool3(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.spatial_unary(Op::AvgPool3, x)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.check_node(x)?.clone();
        if !(xs.batched && xs.dims.len() == 3) {
            return Err(self.mismatch(&Op::GlobalAvgPool, format!("expected batched [c, h, w], got {xs:?}")));
        }
        Ok(self.push(Op::GlobalAvgPool, vec![x], NodeShape::batched(vec![xs.dims[0]])))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.check_node(x)?.clone();
        Ok(self.push(Op::Relu, vec![x], xs))
    }

    pub fn scale_shift(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId, GraphError> {
        let xs = self.check_node(x)?.clone();
        Ok(self.push(Op::ScaleShift { scale, shift }, vec![x], xs))
    }

    pub fn zero(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.check_node(x)?.clone();
        Ok(self.push(Op::Zero, vec![x], xs))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.check_node(x)?.clone();
        if xs.dims.is_empty() {
            return Err(self.mismatch(&Op::Softmax, "softmax needs at least one axis".into()));
        }
        Ok(self.push(Op::Softmax, vec![x], xs))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.check_node(x)?.clone();
        if !xs.batched {
            return Err(self.mismatch(&Op::Flatten, "flatten expects a batched value".into()));
        }
        Ok(self.push(Op::Flatten, vec![x], NodeShape::batched(vec![xs.dims.iter().product()])))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check_node(x)?;
        Ok(self.push(Op::SumAll, vec![x], NodeShape::unbatched(&[1])))
    }

    /// Plain sum of equally shaped terms.
    pub fn add(&mut self, terms: &[NodeId]) -> Result<NodeId, GraphError> {
        let first = self.same_shape(&Op::Add, terms)?;
        Ok(self.push(Op::Add, terms.to_vec(), first))
    }

    /// `sum_k weights[row, k] * terms[k]`; `weights` is `[rows, K]` or `[K]`.
    pub fn weighted_sum(&mut self, weights: NodeId, row: usize, terms: &[NodeId]) -> Result<NodeId, GraphError> {
        let op = Op::WeightedSum { row };
        let ws = self.check_node(weights)?.clone();
        let shape = self.same_shape(&op, terms)?;
        let (rows, k) = match ws.dims.as_slice() {
            [k] => (1, *k),
            [r, k] => (*r, *k),
            _ => return Err(self.mismatch(&op, format!("weights must be [rows, K], got {ws:?}"))),
        };
        if ws.batched || row >= rows || k != terms.len() {
            return Err(self.mismatch(&op, format!("weights {ws:?} incompatible with row {row} and {} terms", terms.len())));
        }
        let inputs = std::iter::once(weights).chain(terms.iter().copied()).collect();
        Ok(self.push(op, inputs, shape))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(self.mismatch(&Op::Concat, "nothing to concatenate".into()));
        }
        let mut channels = 0;
        let mut spatial: Option<Vec<usize>> = None;
        for &p in parts {
            let s = self.check_node(p)?.clone();
            if !(s.batched && s.dims.len() == 3) {
                return Err(self.mismatch(&Op::Concat, format!("part {p} has shape {s:?}")));
            }
            match &spatial {
                Some(sp) if sp[..] != s.dims[1..] => {
                    return Err(self.mismatch(&Op::Concat, format!("part {p} spatial dims differ")));
                }
                _ => spatial = Some(s.dims[1..].to_vec()),
            }
            channels += s.dims[0];
        }
        let sp = spatial.unwrap_or_default();
        Ok(self.push(Op::Concat, parts.to_vec(), NodeShape::batched(vec![channels, sp[0], sp[1]])))
    }

    fn same_shape(&self, op: &Op, terms: &[NodeId]) -> Result<NodeShape, GraphError> {
        let Some((&first, rest)) = terms.split_first() else {
            return Err(self.mismatch(op, "no terms".into()));
        };
        let shape = self.check_node(first)?.clone();
        for &t in rest {
            let s = self.check_node(t)?;
            if *s != shape {
                return Err(self.mismatch(op, format!("term {t} has {s:?}, expected {shape:?}")));
            }
        }
        Ok(shape)
    }

    // ── evaluation ─────────────────────────────────────────────────────

    fn value<'a>(&'a self, acts: &'a [Option<Tensor>], node: NodeId) -> &'a Tensor {
        match self.nodes[node].op {
            Op::Param(slot) => &self.slots[slot].value,
            _ => acts[node].as_ref().expect("node evaluated before use"),
        }
    }

    fn plane(&self, node: NodeId, batch: usize) -> Plane {
        let d = &self.nodes[node].shape.dims;
        Plane {
            batch,
            channels: d[0],
            height: d[1],
            width: d[2],
        }
    }

    /// Evaluates every node up to the output on `input: [batch, ..input_dims]`.
    pub fn forward(&self, input: &Tensor) -> Result<Activations, GraphError> {
        let shape = input.shape();
        if shape.len() != self.input_dims.len() + 1 || shape[1..] != self.input_dims[..] {
            return Err(GraphError::InputShape {
                node: self.input(),
                expected: self.input_dims.clone(),
                found: shape.to_vec(),
            });
        }
        let batch = shape[0];
        let last = self.output.unwrap_or(self.nodes.len() - 1);
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        values[0] = Some(input.clone());
        for id in 1..=last {
            let node = &self.nodes[id];
            let full = node.shape.full(batch);
            let out = match &node.op {
                Op::Input | Op::Param(_) => continue,
                Op::Affine => {
                    let x = self.value(&values, node.inputs[0]);
                    let w = self.value(&values, node.inputs[1]);
                    let b = self.value(&values, node.inputs[2]);
                    let (m, n) = (w.shape()[0], w.shape()[1]);
                    let mut out = Vec::with_capacity(batch * m);
                    for r in 0..batch {
                        let xr = x.row(r);
                        for o in 0..m {
                            let wr = &w.data()[o * n..(o + 1) * n];
                            out.push(b.data()[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>());
                        }
                    }
                    out
                }
                Op::Conv2d => {
                    let x = self.value(&values, node.inputs[0]);
                    let w = self.value(&values, node.inputs[1]);
                    let p = self.plane(node.inputs[0], batch);
                    kernels::conv2d_forward(x.data(), w.data(), p, w.shape()[0], w.shape()[2])
                }
                Op::MaxPool3 => {
                    let p = self.plane(node.inputs[0], batch);
                    kernels::maxpool3_forward(self.value(&values, node.inputs[0]).data(), p)
                }
                Op::AvgPool3 => {
                    let p = self.plane(node.inputs[0], batch);
                    kernels::avgpool3_forward(self.value(&values, node.inputs[0]).data(), p)
                }
                Op::Relu => self.value(&values, node.inputs[0]).data().iter().map(|v| v.max(0.0)).collect(),
                Op::ScaleShift { scale, shift } => self
                    .value(&values, node.inputs[0])
                    .data()
                    .iter()
                    .map(|v| scale * v + shift)
                    .collect(),
                Op::Softmax => crate::tensor::softmax_rows(self.value(&values, node.inputs[0])).into_data(),
                Op::WeightedSum { row } => {
                    let w = self.value(&values, node.inputs[0]);
                    let k = node.inputs.len() - 1;
                    let coeffs = &w.data()[row * k..(row + 1) * k];
                    let mut out = vec![0.0; full.iter().product()];
                    for (c, &t) in coeffs.iter().zip(&node.inputs[1..]) {
                        if matches!(self.nodes[t].op, Op::Zero) {
                            continue;
                        }
                        for (o, v) in out.iter_mut().zip(self.value(&values, t).data()) {
                            *o += c * v;
                        }
                    }
                    out
                }
                Op::Add => {
                    let mut out = self.value(&values, node.inputs[0]).data().to_vec();
                    for &t in &node.inputs[1..] {
                        for (o, v) in out.iter_mut().zip(self.value(&values, t).data()) {
                            *o += v;
                        }
                    }
                    out
                }
                Op::Zero => vec![0.0; full.iter().product()],
                Op::Concat => {
                    let mut out = Vec::with_capacity(full.iter().product());
                    for b in 0..batch {
                        for &part in &node.inputs {
                            out.extend_from_slice(self.value(&values, part).row(b));
                        }
                    }
                    out
                }
                Op::GlobalAvgPool => {
                    let x = self.value(&values, node.inputs[0]);
                    let p = self.plane(node.inputs[0], batch);
                    let area = (p.height * p.width) as f64;
                    x.data().chunks(p.height * p.width).map(|c| c.iter().sum::<f64>() / area).collect()
                }
                Op::Flatten => self.value(&values, node.inputs[0]).data().to_vec(),
                Op::SumAll => vec![self.value(&values, node.inputs[0]).sum()],
            };
            values[id] = Some(Tensor::new(full, out));
        }
        Ok(Activations { batch, values })
    }

    /// Logits (or whatever the output node holds) of a forward pass.
    pub fn output_value<'a>(&'a self, acts: &'a Activations) -> Result<&'a Tensor, GraphError> {
        let out = self.output.ok_or(GraphError::NoOutput)?;
        Ok(self.value(&acts.values, out))
    }

    /// Value of any node, including parameters.
    pub fn node_value<'a>(&'a self, acts: &'a Activations, node: NodeId) -> &'a Tensor {
        self.value(&acts.values, node)
    }

    /// Backpropagates `seed` (the gradient at the output node) and returns
    /// gradients for every slot whose tag is requested.
    pub fn backward(&self, acts: &Activations, seed: Tensor, request: GradRequest) -> Result<Gradients, GraphError> {
        let out = self.output.ok_or(GraphError::NoOutput)?;
        let batch = acts.batch;
        let mut needs = vec![false; self.nodes.len()];
        for id in 0..=out {
            needs[id] = match self.nodes[id].op {
                Op::Param(slot) => request.wants(self.slots[slot].tag),
                Op::Input | Op::Zero => false,
                _ => self.nodes[id].inputs.iter().any(|&i| needs[i]),
            };
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut result = Gradients {
            slots: vec![None; self.slots.len()],
        };
        if !needs[out] {
            return Ok(result);
        }
        grads[out] = Some(seed);
        for id in (0..=out).rev() {
            if !needs[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let ins = &node.inputs;
            let send = |grads: &mut Vec<Option<Tensor>>, target: NodeId, data: Vec<f64>| {
                let shape = self.nodes[target].shape.full(batch);
                match grads[target].as_mut() {
                    Some(existing) => {
                        for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                            *e += d;
                        }
                    }
                    None => grads[target] = Some(Tensor::new(shape, data)),
                }
            };
            match &node.op {
                Op::Input | Op::Zero => {}
                Op::Param(slot) => result.slots[*slot] = Some(g),
                Op::Affine => {
                    let x = self.value(&acts.values, ins[0]);
                    let w = self.value(&acts.values, ins[1]);
                    let (m, n) = (w.shape()[0], w.shape()[1]);
                    if needs[ins[0]] {
                        let mut dx = vec![0.0; batch * n];
                        for r in 0..batch {
                            for o in 0..m {
                                let go = g.data()[r * m + o];
                                for (d, wv) in dx[r * n..(r + 1) * n].iter_mut().zip(&w.data()[o * n..(o + 1) * n]) {
                                    *d += go * wv;
                                }
                            }
                        }
                        send(&mut grads, ins[0], dx);
                    }
                    if needs[ins[1]] {
                        let mut dw = vec![0.0; m * n];
                        for r in 0..batch {
                            let xr = x.row(r);
                            for o in 0..m {
                                let go = g.data()[r * m + o];
                                for (d, xv) in dw[o * n..(o + 1) * n].iter_mut().zip(xr) {
                                    *d += go * xv;
                                }
                            }
                        }
                        send(&mut grads, ins[1], dw);
                    }
                    if needs[ins[2]] {
                        let mut db = vec![0.0; m];
                        for r in 0..batch {
                            for (d, gv) in db.iter_mut().zip(g.row(r)) {
                                *d += gv;
                            }
                        }
                        send(&mut grads, ins[2], db);
                    }
                }
                Op::Conv2d => {
                    let x = self.value(&acts.values, ins[0]);
                    let w = self.value(&acts.values, ins[1]);
                    let p = self.plane(ins[0], batch);
                    let (dx, dw) = kernels::conv2d_backward(
                        x.data(),
                        w.data(),
                        g.data(),
                        p,
                        w.shape()[0],
                        w.shape()[2],
                        needs[ins[0]],
                        needs[ins[1]],
                    );
                    if let Some(dx) = dx {
                        send(&mut grads, ins[0], dx);
                    }
                    if let Some(dw) = dw {
                        send(&mut grads, ins[1], dw);
                    }
                }
                Op::MaxPool3 => {
                    let p = self.plane(ins[0], batch);
                    let dx = kernels::maxpool3_backward(self.value(&acts.values, ins[0]).data(), g.data(), p);
                    send(&mut grads, ins[0], dx);
                }
                Op::AvgPool3 => {
                    let p = self.plane(ins[0], batch);
                    send(&mut grads, ins[0], kernels::avgpool3_backward(g.data(), p));
                }
                Op::Relu => {
                    let x = self.value(&acts.values, ins[0]);
                    let dx = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    send(&mut grads, ins[0], dx);
                }
                Op::ScaleShift { scale, .. } => {
                    let dx = g.data().iter().map(|gv| scale * gv).collect();
                    send(&mut grads, ins[0], dx);
                }
                Op::Softmax => {
                    let s = acts.values[id].as_ref().expect("softmax evaluated");
                    let k = *s.shape().last().expect("softmax axis");
                    let mut dx = vec![0.0; s.len()];
                    for ((srow, grow), drow) in s.data().chunks(k).zip(g.data().chunks(k)).zip(dx.chunks_mut(k)) {
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((d, sv), gv) in drow.iter_mut().zip(srow).zip(grow) {
                            *d = sv * (gv - dot);
                        }
                    }
                    send(&mut grads, ins[0], dx);
                }
                Op::WeightedSum { row } => {
                    let w = self.value(&acts.values, ins[0]);
                    let k = ins.len() - 1;
                    let coeffs = &w.data()[row * k..(row + 1) * k];
                    if needs[ins[0]] {
                        let mut dw = vec![0.0; w.len()];
                        for (j, &t) in ins[1..].iter().enumerate() {
                            if matches!(self.nodes[t].op, Op::Zero) {
                                continue;
                            }
                            let tv = self.value(&acts.values, t);
                            dw[row * k + j] = g.data().iter().zip(tv.data()).map(|(a, b)| a * b).sum();
                        }
                        send(&mut grads, ins[0], dw);
                    }
                    for (c, &t) in coeffs.iter().zip(&ins[1..]) {
                        if needs[t] {
                            send(&mut grads, t, g.data().iter().map(|v| c * v).collect());
                        }
                    }
                }
                Op::Add => {
                    for &t in ins {
                        if needs[t] {
                            send(&mut grads, t, g.data().to_vec());
                        }
                    }
                }
                Op::Concat => {
                    let total = g.row_len();
                    let mut offset = 0;
                    for &part in ins {
                        let width: usize = self.nodes[part].shape.dims.iter().product();
                        if needs[part] {
                            let mut d = Vec::with_capacity(batch * width);
                            for b in 0..batch {
                                d.extend_from_slice(&g.data()[b * total + offset..b * total + offset + width]);
                            }
                            send(&mut grads, part, d);
                        }
                        offset += width;
                    }
                }
                Op::GlobalAvgPool => {
                    let p = self.plane(ins[0], batch);
                    let area = p.height * p.width;
                    let mut d = Vec::with_capacity(g.len() * area);
                    for gv in g.data() {
                        d.extend(std::iter::repeat_n(gv / area as f64, area));
                    }
                    send(&mut grads, ins[0], d);
                }
                Op::Flatten => send(&mut grads, ins[0], g.data().to_vec()),
                Op::SumAll => {
                    let n: usize = self.nodes[ins[0]].shape.full(batch).iter().product();
                    send(&mut grads, ins[0], vec![g.data()[0]; n]);
                }
            }
        }
        Ok(result)
    }
}
