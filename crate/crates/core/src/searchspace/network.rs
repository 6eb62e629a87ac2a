use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArchitectureParams, CellSpec, DiscreteArch, OpKind, OperationSet, SearchSpaceError};
use crate::autodiff::{ComputeGraph, NodeId, SlotTag};
use crate::tensor::Tensor;

/// Name of the pooled feature node feeding the classifier.
pub const PENULTIMATE: &str = "penultimate";

/// Shape of the stacked-cell network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub cell: CellSpec,
    pub ops: OperationSet,
    pub num_cells: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Per-example input `[channels, height, width]`.
    pub input_dims: [usize; 3],
    /// One alpha row set for all cells (true) or one per cell.
    pub share_alpha: bool,
    /// Inputs are standardized as `(x - mean) / std` before the stem.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            cell: CellSpec::default(),
            ops: OperationSet::default(),
            num_cells: 2,
            channels: 8,
            num_classes: 4,
            input_dims: [1, 16, 16],
            share_alpha: true,
            input_mean: 0.5,
            input_std: 0.1,
        }
    }
}

impl NetConfig {
    pub fn alpha_groups(&self) -> usize {
        if self.share_alpha {
            1
        } else {
            self.num_cells
        }
    }

    fn validate(&self) -> Result<(), SearchSpaceError> {
        if self.num_cells == 0 {
            return Err(SearchSpaceError::InvalidNet("num_cells must be at least 1".into()));
        }
        if self.channels == 0 || self.num_classes < 2 {
            return Err(SearchSpaceError::InvalidNet("need channels >= 1 and num_classes >= 2".into()));
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite() && self.input_mean.is_finite()) {
            return Err(SearchSpaceError::InvalidNet("input_std must be positive and finite".into()));
        }
        if self.input_dims.contains(&0) {
            return Err(SearchSpaceError::InvalidNet("input dims must be positive".into()));
        }
        if self.cell.intermediates == 0 || self.cell.inputs != 2 {
            return Err(SearchSpaceError::InvalidNet(
                "cells take two inputs and need intermediate nodes".into(),
            ));
        }
        Ok(())
    }
}

/// A supernet: every cell edge is a softmax-weighted mixture of all candidate ops.
#[derive(Clone, Debug, PartialEq)]
pub struct Supernet {
    pub graph: ComputeGraph,
    pub net: NetConfig,
    alpha_slot: usize,
}

impl Supernet {
    pub fn alpha_slot(&self) -> usize {
        self.alpha_slot
    }

    pub fn alpha(&self) -> ArchitectureParams {
        ArchitectureParams {
            values: self.graph.slot(self.alpha_slot).value.clone(),
            cell: self.net.cell,
            ops: self.net.ops.clone(),
        }
    }

    pub fn set_alpha(&mut self, alpha: &ArchitectureParams) -> Result<(), SearchSpaceError> {
        let slot = self.graph.slot_value_mut(self.alpha_slot);
        if slot.shape() != alpha.values.shape() {
            return Err(SearchSpaceError::AlphaShape {
                found: alpha.values.shape().to_vec(),
                edges: self.net.cell.num_edges(),
                ops: self.net.ops.len(),
            });
        }
        *slot = alpha.values.clone();
        Ok(())
    }
}

enum Plan<'a> {
    Mixed { weights: NodeId, ops: &'a OperationSet },
    Discrete(&'a DiscreteArch),
}

struct Builder {
    graph: ComputeGraph,
    rng: ChaCha8Rng,
}

impl Builder {
    /// Uniform init in `[-b, b]`; `b = sqrt(6 / fan_in)` for convolutions
    /// feeding rectifiers, `1 / sqrt(fan_in)` for the classifier.
    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> NodeId {
        let bound = gain / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.graph.param(name, SlotTag::Weight, Tensor::new(shape.to_vec(), data))
    }

    fn conv(&mut self, name: &str, x: NodeId, out_ch: usize, k: usize) -> Result<NodeId, SearchSpaceError> {
        let in_ch = self.graph.shape(x).dims[0];
        let w = self.uniform(name, &[out_ch, in_ch, k, k], in_ch * k * k, 6f64.sqrt());
        Ok(self.graph.conv2d(x, w)?)
    }

    fn op(
        &mut self,
        kind: OpKind,
        x: NodeId,
        relu_x: &mut Option<NodeId>,
        name: &str,
        channels: usize,
    ) -> Result<NodeId, SearchSpaceError> {
        Ok(match kind {
            OpKind::Zero => self.graph.zero(x)?,
            OpKind::Identity => x,
            OpKind::Conv3x3 => {
                let r = match *relu_x {
                    Some(r) => r,
                    None => {
                        let r = self.graph.relu(x)?;
                        *relu_x = Some(r);
                        r
                    }
                };
                self.conv(name, r, channels, 3)?
            }
            OpKind::MaxPool3x3 => self.graph.maxpool3(x)?,
            OpKind::AvgPool3x3 => self.graph.avgpool3(x)?,
        })
    }

    fn preprocess(&mut self, name: &str, x: NodeId, channels: usize) -> Result<NodeId, SearchSpaceError> {
        let r = self.graph.relu(x)?;
        self.conv(name, r, channels, 1)
    }
}

fn build(
    net: &NetConfig,
    seed: u64,
    with_alpha: bool,
    arch: Option<&DiscreteArch>,
) -> Result<(ComputeGraph, Option<usize>), SearchSpaceError> {
    net.validate()?;
    let mut b = Builder {
        graph: ComputeGraph::new(&net.input_dims),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let c = net.channels;
    let cell = net.cell;
    let edges_per_cell = cell.num_edges();

    let mut alpha_slot = None;
    let weights = if with_alpha {
        let alpha = ArchitectureParams::zeros(cell, net.ops.clone(), net.alpha_groups());
        let node = b.graph.param("alpha", SlotTag::Arch, alpha.values);
        alpha_slot = Some(b.graph.slots().len() - 1);
        Some(b.graph.softmax(node)?)
    } else {
        None
    };

    let raw = b.graph.input();
    let input = b.graph.scale_shift(raw, 1.0 / net.input_std, -net.input_mean / net.input_std)?;
    let stem = b.conv("stem", input, c, 3)?;
    let (mut prev_prev, mut prev) = (stem, stem);

    for ci in 0..net.num_cells {
        let plan = match (weights, arch) {
            (Some(w), _) => Plan::Mixed { weights: w, ops: &net.ops },
            (None, Some(a)) => Plan::Discrete(a),
            (None, None) => unreachable!("network needs alpha or a discrete architecture"),
        };
        let s0 = b.preprocess(&format!("cell{ci}.pre0"), prev_prev, c)?;
        let s1 = b.preprocess(&format!("cell{ci}.pre1"), prev, c)?;
        let mut states = vec![s0, s1];
        let mut relu_cache: Vec<Option<NodeId>> = vec![None, None];
        for to in cell.inputs..cell.node_count() {
            let mut terms = Vec::new();
            for from in 0..to {
                let edge = cell.first_edge_into(to) + from;
                let name = format!("cell{ci}.edge{from}->{to}");
                match &plan {
                    Plan::Mixed { weights, ops } => {
                        let row = if net.share_alpha { edge } else { ci * edges_per_cell + edge };
                        let mut outs = Vec::with_capacity(ops.len());
                        for &kind in ops.ops() {
                            outs.push(b.op(kind, states[from], &mut relu_cache[from], &format!("{name}.{kind}"), c)?);
                        }
                        terms.push(b.graph.weighted_sum(*weights, row, &outs)?);
                    }
                    Plan::Discrete(a) => {
                        let genotype = if a.cells.len() == 1 { &a.cells[0] } else { &a.cells[ci] };
                        for r in genotype.node(to).iter().filter(|r| r.from == from) {
                            terms.push(b.op(r.op, states[from], &mut relu_cache[from], &format!("{name}.{}", r.op), c)?);
                        }
                    }
                }
            }
            let node = match terms.as_slice() {
                [single] => *single,
                _ => b.graph.add(&terms)?,
            };
            states.push(node);
            relu_cache.push(None);
        }
        let out = b.graph.concat(&states[cell.inputs..])?;
        prev_prev = prev;
        prev = out;
    }

    let pooled = b.graph.global_avg_pool(prev)?;
    b.graph.set_name(pooled, PENULTIMATE);
    let width = b.graph.shape(pooled).dims[0];
    let w = b.uniform("head.weight", &[net.num_classes, width], width, 1.0);
    let bias = b.graph.param("head.bias", SlotTag::Weight, Tensor::zeros(&[net.num_classes]));
    let logits = b.graph.affine(pooled, w, bias)?;
    b.graph.set_output(logits);
    Ok((b.graph, alpha_slot))
}

/// Builds the supernet with seeded weights and all-zero alpha.
pub fn build_supernet(net: &NetConfig, seed: u64) -> Result<Supernet, SearchSpaceError> {
    let (graph, alpha_slot) = build(net, seed, true, None)?;
    Ok(Supernet {
        graph,
        net: net.clone(),
        alpha_slot: alpha_slot.expect("supernet has an alpha slot"),
    })
}

/// Builds the fixed network described by `arch` with fresh seeded weights.
pub fn materialize(arch: &DiscreteArch, net: &NetConfig, seed: u64) -> Result<ComputeGraph, SearchSpaceError> {
    if arch.cell != net.cell {
        return Err(SearchSpaceError::InvalidNet(format!(
            "architecture cell {:?} does not match network cell {:?}",
            arch.cell, net.cell
        )));
    }
    if arch.cells.len() != 1 && arch.cells.len() != net.num_cells {
        return Err(SearchSpaceError::CellCount {
            found: arch.cells.len(),
            expected: net.num_cells,
        });
    }
    Ok(build(net, seed, false, Some(arch))?.0)
}

/// Applies one relaxed edge: `sum_k softmax(alpha_row)_k * op_k(input)`.
/// `conv_weight` (`[c, c, 3, 3]`) backs the convolution candidate, which is
/// applied to the rectified input as in the supernet.
pub fn mixed_edge_forward(
    alpha_row: &[f64],
    ops: &OperationSet,
    input: &Tensor,
    conv_weight: Option<&Tensor>,
) -> Result<Tensor, SearchSpaceError> {
    if alpha_row.len() != ops.len() || input.shape().len() != 4 {
        return Err(SearchSpaceError::InvalidNet(
            "alpha row or input shape does not fit the op set".into(),
        ));
    }
    let dims = &input.shape()[1..];
    let mut g = ComputeGraph::new(dims);
    let alpha = g.param("alpha", SlotTag::Arch, Tensor::new(vec![1, ops.len()], alpha_row.to_vec()));
    let weights = g.softmax(alpha)?;
    let x = g.input();
    let mut outs = Vec::new();
    let mut relu = None;
    for &kind in ops.ops() {
        let node = match kind {
            OpKind::Conv3x3 => {
                let wt = conv_weight.cloned().unwrap_or_else(|| Tensor::zeros(&[dims[0], dims[0], 3, 3]));
                let w = g.param("conv", SlotTag::Weight, wt);
                let r = *relu.get_or_insert(g.relu(x)?);
                g.conv2d(r, w)?
            }
            OpKind::Zero => g.zero(x)?,
            OpKind::Identity => x,
            OpKind::MaxPool3x3 => g.maxpool3(x)?,
            OpKind::AvgPool3x3 => g.avgpool3(x)?,
        };
        outs.push(node);
    }
    let out = g.weighted_sum(weights, 0, &outs)?;
    g.set_output(out);
    let acts = g.forward(input)?;
    Ok(g.output_value(&acts)?.clone())
}
