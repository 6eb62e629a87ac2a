//! Cell search space: candidate operations, the continuously relaxed
//! supernet, and discrete architectures derived from it.

mod genotype;
mod network;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use genotype::{derive_architecture, random_architecture, CellGenotype, DiscreteArch, RetainedEdge};
pub use network::{build_supernet, materialize, mixed_edge_forward, NetConfig, Supernet, PENULTIMATE};

use crate::autodiff::GraphError;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchSpaceError {
    #[error("operation set must contain the zero operation")]
    MissingZero,
    #[error("operation set needs at least two operations, got {0}")]
    TooFewOps(usize),
    #[error("operation {0} listed twice")]
    DuplicateOp(OpKind),
    #[error("unknown operation name {0:?}")]
    UnknownOp(String),
    #[error("invalid cell: {0}")]
    InvalidCell(String),
    #[error("invalid network config: {0}")]
    InvalidNet(String),
    #[error("retain_k = {retain_k} exceeds the {available} candidate in-edges of node {node}")]
    RetainTooLarge { retain_k: usize, node: usize, available: usize },
    #[error("architecture params have shape {found:?}, expected rows multiple of {edges} and {ops} columns")]
    AlphaShape { found: Vec<usize>, edges: usize, ops: usize },
    #[error("genotype line {line}: {reason}")]
    Genotype { line: usize, reason: String },
    #[error("discrete architecture has {found} cell genotypes, network needs 1 or {expected}")]
    CellCount { found: usize, expected: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Candidate operation kinds. All are shape preserving.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Zero,
    Identity,
    Conv3x3,
    MaxPool3x3,
    AvgPool3x3,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Zero,
        OpKind::Identity,
        OpKind::Conv3x3,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Identity => "identity",
            OpKind::Conv3x3 => "conv_3x3",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = SearchSpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SearchSpaceError::UnknownOp(s.to_string()))
    }
}

/// Ordered candidate set; indices are stable for the lifetime of a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<OpKind>", into = "Vec<OpKind>")]
pub struct OperationSet {
    ops: Vec<OpKind>,
}

impl OperationSet {
    pub fn new(ops: Vec<OpKind>) -> Result<Self, SearchSpaceError> {
        if ops.len() < 2 {
            return Err(SearchSpaceError::TooFewOps(ops.len()));
        }
        for (i, op) in ops.iter().enumerate() {
            if ops[..i].contains(op) {
                return Err(SearchSpaceError::DuplicateOp(*op));
            }
        }
        if !ops.contains(&OpKind::Zero) {
            return Err(SearchSpaceError::MissingZero);
        }
        Ok(Self { ops })
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn index_of(&self, op: OpKind) -> Option<usize> {
        self.ops.iter().position(|o| *o == op)
    }
}

impl Default for OperationSet {
    fn default() -> Self {
        Self { ops: OpKind::ALL.to_vec() }
    }
}

impl TryFrom<Vec<OpKind>> for OperationSet {
    type Error = SearchSpaceError;

    fn try_from(ops: Vec<OpKind>) -> Result<Self, Self::Error> {
        Self::new(ops)
    }
}

impl From<OperationSet> for Vec<OpKind> {
    fn from(set: OperationSet) -> Self {
        set.ops
    }
}

/// A cell DAG: `inputs` input nodes followed by `intermediates` nodes, with
/// a candidate edge from every earlier node into each intermediate node.
/// The cell output concatenates the intermediate nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub inputs: usize,
    pub intermediates: usize,
}

/// Candidate edge `from -> to` inside a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl CellSpec {
    pub fn new(intermediates: usize) -> Result<Self, SearchSpaceError> {
        if intermediates == 0 {
            return Err(SearchSpaceError::InvalidCell("need at least one intermediate node".into()));
        }
        Ok(Self { inputs: 2, intermediates })
    }

    pub fn node_count(&self) -> usize {
        self.inputs + self.intermediates
    }

    /// Edges ordered by target node, then by source.
    pub fn edges(&self) -> Vec<Edge> {
        (self.inputs..self.node_count())
            .flat_map(|to| (0..to).map(move |from| Edge { from, to }))
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        (self.inputs..self.node_count()).sum()
    }

    /// Index of the first edge entering `to`.
    pub fn first_edge_into(&self, to: usize) -> usize {
        (self.inputs..to).sum()
    }
}

impl Default for CellSpec {
    fn default() -> Self {
        Self {
            inputs: 2,
            intermediates: 4,
        }
    }
}

/// The continuous architecture: one row of `K` logits per edge and per
/// alpha group (one group when stacked cells share alpha).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureParams {
    pub values: Tensor,
    pub cell: CellSpec,
    pub ops: OperationSet,
}

impl ArchitectureParams {
    pub fn new(values: Tensor, cell: CellSpec, ops: OperationSet) -> Result<Self, SearchSpaceError> {
        let e = cell.num_edges();
        let shape = values.shape();
        if shape.len() != 2 || shape[1] != ops.len() || shape[0] == 0 || !shape[0].is_multiple_of(e) {
            return Err(SearchSpaceError::AlphaShape {
                found: shape.to_vec(),
                edges: e,
                ops: ops.len(),
            });
        }
        Ok(Self { values, cell, ops })
    }

    pub fn zeros(cell: CellSpec, ops: OperationSet, groups: usize) -> Self {
        let values = Tensor::zeros(&[groups * cell.num_edges(), ops.len()]);
        Self { values, cell, ops }
    }

    pub fn groups(&self) -> usize {
        self.values.rows() / self.cell.num_edges()
    }

    pub fn row(&self, group: usize, edge: usize) -> &[f64] {
        self.values.row(group * self.cell.num_edges() + edge)
    }

    /// Softmax mixture weights, same layout as `values`.
    pub fn mixture_weights(&self) -> Tensor {
        crate::tensor::softmax_rows(&self.values)
    }

    pub fn content_hash(&self) -> u64 {
        self.values.content_hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_set_requires_zero() {
        assert_eq!(
            OperationSet::new(vec![OpKind::Identity, OpKind::Conv3x3]),
            Err(SearchSpaceError::MissingZero)
        );
        assert_eq!(OperationSet::new(vec![OpKind::Zero]), Err(SearchSpaceError::TooFewOps(1)));
        assert!(OperationSet::new(vec![OpKind::Zero, OpKind::Zero]).is_err());
        assert_eq!(OperationSet::default().len(), 5);
    }

    #[test]
    fn op_names_round_trip() {
        for op in OpKind::ALL {
            assert_eq!(op.name().parse::<OpKind>().unwrap(), op);
        }
        assert!("sep_conv_5x5".parse::<OpKind>().is_err());
    }

    #[test]
    fn default_cell_has_fourteen_edges() {
        let cell = CellSpec::default();
        assert_eq!(cell.num_edges(), 2 + 3 + 4 + 5);
        assert_eq!(cell.edges().len(), 14);
        assert_eq!(cell.first_edge_into(4), 5);
        assert!(cell.edges().iter().all(|e| e.from < e.to));
    }

    #[test]
    fn alpha_shape_is_checked() {
        let cell = CellSpec::default();
        let bad = ArchitectureParams::new(Tensor::zeros(&[13, 5]), cell, OperationSet::default());
        assert!(matches!(bad, Err(SearchSpaceError::AlphaShape { .. })));
        let ok = ArchitectureParams::new(Tensor::zeros(&[28, 5]), cell, OperationSet::default()).unwrap();
        assert_eq!(ok.groups(), 2);
    }
}
