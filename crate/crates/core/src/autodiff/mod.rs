//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`ComputeGraph`] is a static DAG of primitive ops whose parameter
//! slots are tagged [`SlotTag::Weight`] or [`SlotTag::Arch`]. A forward pass
//! caches every activation; [`ComputeGraph::backward`] replays the graph in
//! reverse. The classification loss is a fused softmax cross-entropy on the
//! output logits.
//!
//! Batches are split into fixed-size chunks that may be evaluated on
//! separate threads. Chunk results are reduced in chunk order, so losses and
//! gradients are bit-identical regardless of the worker count.

mod gradcheck;
mod graph;
mod kernels;

use rayon::prelude::*;
use thiserror::Error;

pub use gradcheck::{finite_difference_check, FdReport};
pub use graph::{Activations, ComputeGraph, GradRequest, Gradients, NodeId, NodeShape, Op, ParamSlot, SlotTag};

use crate::tensor::Tensor;

/// Examples per evaluation chunk. Fixed so reductions do not depend on threads.
pub const CHUNK: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch { node: NodeId, op: &'static str, detail: String },
    #[error("input node {node} expects per-example shape {expected:?}, got batch shape {found:?}")]
    InputShape {
        node: NodeId,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("graph has no output node")]
    NoOutput,
    #[error("non-finite logit at batch index {batch_index}")]
    NonFiniteLoss { batch_index: usize },
    #[error("label {label} at batch index {index} is outside 0..{classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("batch has {images} images but {labels} labels")]
    BatchMismatch { images: usize, labels: usize },
}

/// Images `[n, ..]` with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Self {
        Self { images, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `start..end` as their own batch.
    pub fn slice(&self, start: usize, end: usize) -> LabeledBatch {
        LabeledBatch {
            images: self.images.slice_rows(start, end),
            labels: self.labels[start..end].to_vec(),
        }
    }
}

/// Mean loss and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Gradients,
}

/// Summed cross-entropy over rows of `logits` and `softmax(logits) - onehot`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize], offset: usize) -> Result<(f64, Tensor), GraphError> {
    let classes = logits.row_len();
    let mut total = 0.0;
    let mut grad = logits.clone();
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFiniteLoss { batch_index: offset + r });
        }
        if label >= classes {
            return Err(GraphError::LabelOutOfRange {
                index: offset + r,
                label,
                classes,
            });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
        let g = grad.row_mut(r);
        for v in g.iter_mut() {
            *v = (*v - lse).exp();
        }
        g[label] -= 1.0;
    }
    if !total.is_finite() {
        return Err(GraphError::NonFiniteLoss { batch_index: offset });
    }
    Ok((total, grad))
}

fn check_batch(batch: &LabeledBatch) -> Result<(), GraphError> {
    if batch.images.rows() != batch.labels.len() {
        return Err(GraphError::BatchMismatch {
            images: batch.images.rows(),
            labels: batch.labels.len(),
        });
    }
    Ok(())
}

/// Mean cross-entropy over the batch together with the requested gradients.
pub fn loss_and_backward(graph: &ComputeGraph, batch: &LabeledBatch, request: GradRequest) -> Result<LossAndGrads, GraphError> {
    check_batch(batch)?;
    let n = batch.len();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<Result<(f64, Gradients), GraphError>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let chunk = batch.slice(start, end);
            let acts = graph.forward(&chunk.images)?;
            let (loss, mut dlogits) = softmax_cross_entropy(graph.output_value(&acts)?, &chunk.labels, start)?;
            dlogits.scale(1.0 / n as f64);
            Ok((loss, graph.backward(&acts, dlogits, request)?))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = Gradients {
        slots: vec![None; graph.slots().len()],
    };
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.accumulate(g);
    }
    Ok(LossAndGrads {
        loss: loss / n.max(1) as f64,
        grads,
    })
}

/// Mean cross-entropy without gradients.
pub fn mean_loss(graph: &ComputeGraph, batch: &LabeledBatch) -> Result<f64, GraphError> {
    Ok(per_example_losses(graph, batch)?.iter().sum::<f64>() / batch.len().max(1) as f64)
}

pub fn per_example_losses(graph: &ComputeGraph, batch: &LabeledBatch) -> Result<Vec<f64>, GraphError> {
    check_batch(batch)?;
    let logits = predict_logits(graph, &batch.images)?;
    (0..batch.len())
        .map(|r| softmax_cross_entropy(&logits.slice_rows(r, r + 1), &batch.labels[r..r + 1], r).map(|(l, _)| l))
        .collect()
}

/// Output logits for every row of `images`.
pub fn predict_logits(graph: &ComputeGraph, images: &Tensor) -> Result<Tensor, GraphError> {
    node_rows(graph, images, graph.output().ok_or(GraphError::NoOutput)?)
}

/// Values of `node` for every row of `images`, stacked as `[n, width]`.
pub fn node_rows(graph: &ComputeGraph, images: &Tensor, node: NodeId) -> Result<Tensor, GraphError> {
    let width: usize = graph.shape(node).dims.iter().product();
    let n = images.rows();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let chunks: Vec<Result<Vec<f64>, GraphError>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let acts = graph.forward(&images.slice_rows(start, end))?;
            Ok(graph.node_value(&acts, node).data().to_vec())
        })
        .collect();
    let mut data = Vec::with_capacity(n * width);
    for c in chunks {
        data.extend(c?);
    }
    Ok(Tensor::new(vec![n, width], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine_graph(n: usize, m: usize, w: Vec<f64>, b: Vec<f64>) -> ComputeGraph {
        let mut g = ComputeGraph::new(&[n]);
        let x = g.input();
        let wn = g.param("w", SlotTag::Weight, Tensor::new(vec![m, n], w));
        let bn = g.param("b", SlotTag::Weight, Tensor::new(vec![m], b));
        let y = g.affine(x, wn, bn).unwrap();
        g.set_output(y);
        g
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = ComputeGraph::new(&[3]);
        g.set_output(g.input());
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let acts = g.forward(&x).unwrap();
        assert_eq!(g.output_value(&acts).unwrap(), &x);
    }

    #[test]
    fn identity_affine_is_identity_map() {
        let g = affine_graph(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], vec![0.0; 3]);
        let x = Tensor::new(vec![1, 3], vec![0.25, -4.0, 7.5]);
        let acts = g.forward(&x).unwrap();
        assert_eq!(g.output_value(&acts).unwrap().data(), x.data());
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let mut g = ComputeGraph::new(&[3]);
        let s = g.softmax(g.input()).unwrap();
        g.set_output(s);
        let acts = g.forward(&Tensor::zeros(&[1, 3])).unwrap();
        for v in g.output_value(&acts).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn input_shape_mismatch_names_the_input_node() {
        let g = affine_graph(3, 2, vec![0.0; 6], vec![0.0; 2]);
        let err = g.forward(&Tensor::zeros(&[1, 4])).unwrap_err();
        assert!(matches!(err, GraphError::InputShape { node: 0, .. }));
    }

    #[test]
    fn builder_rejects_bad_affine() {
        let mut g = ComputeGraph::new(&[3]);
        let w = g.param("w", SlotTag::Weight, Tensor::zeros(&[2, 4]));
        let b = g.param("b", SlotTag::Weight, Tensor::zeros(&[2]));
        let err = g.affine(g.input(), w, b).unwrap_err();
        assert!(matches!(err, GraphError::ShapeMismatch { op: "affine", .. }));
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_y_over_batch() {
        // logits pass straight through: the gradient w.r.t. the bias is the logit gradient.
        let g = affine_graph(2, 3, vec![0.0; 6], vec![0.5, -1.0, 2.0]);
        let batch = LabeledBatch::new(Tensor::zeros(&[2, 2]), vec![0, 2]);
        let out = loss_and_backward(&g, &batch, GradRequest::ALL).unwrap();
        let p = crate::tensor::softmax_rows(&Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]));
        let gb = out.grads.get(1).unwrap();
        for k in 0..3 {
            let y0 = if k == 0 { 1.0 } else { 0.0 };
            let y1 = if k == 2 { 1.0 } else { 0.0 };
            let expected = ((p.data()[k] - y0) + (p.data()[k] - y1)) / 2.0;
            assert!((gb.data()[k] - expected).abs() < 1e-14);
        }
        let lse = p.data().iter().map(|v| v.ln()).collect::<Vec<_>>();
        assert!((out.loss - (-(lse[0] + lse[2]) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut g = ComputeGraph::new(&[1]);
        let w = g.param("w", SlotTag::Weight, Tensor::from_vec(vec![0.3, -2.0, 5.0, 1.0]));
        let s = g.sum_all(w).unwrap();
        g.set_output(s);
        let acts = g.forward(&Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(g.output_value(&acts).unwrap().data(), &[4.3]);
        let grads = g.backward(&acts, Tensor::from_vec(vec![1.0]), GradRequest::ALL).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn weighted_sum_backward_distributes_by_weights() {
        let mut g = ComputeGraph::new(&[2]);
        let x = g.input();
        let r = g.relu(x).unwrap();
        let w = g.param("mix", SlotTag::Arch, Tensor::new(vec![1, 2], vec![0.25, -3.0]));
        let s = g.weighted_sum(w, 0, &[x, r]).unwrap();
        g.set_output(s);
        let acts = g.forward(&Tensor::new(vec![1, 2], vec![1.0, 2.0])).unwrap();
        assert_eq!(g.output_value(&acts).unwrap().data(), &[-2.75, -5.5]);
        let upstream = Tensor::new(vec![1, 2], vec![1.0, 10.0]);
        let grads = g.backward(&acts, upstream, GradRequest::ALL).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[21.0, 21.0]);
    }

    #[test]
    fn nonfinite_logit_reports_batch_index() {
        let g = affine_graph(1, 2, vec![1.0, 1.0], vec![0.0, 0.0]);
        let images = Tensor::new(vec![3, 1], vec![0.0, 1.0, f64::INFINITY]);
        let err = loss_and_backward(&g, &LabeledBatch::new(images, vec![0, 1, 0]), GradRequest::ALL).unwrap_err();
        assert_eq!(err, GraphError::NonFiniteLoss { batch_index: 2 });
    }

    #[test]
    fn chunked_loss_matches_single_pass() {
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let g = affine_graph(4, 3, w, vec![0.1, 0.2, -0.3]);
        let n = 21;
        let images = Tensor::new(vec![n, 4], (0..n * 4).map(|i| (i as f64 * 0.31).cos()).collect());
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let batch = LabeledBatch::new(images.clone(), labels.clone());
        let chunked = loss_and_backward(&g, &batch, GradRequest::ALL).unwrap();
        let acts = g.forward(&images).unwrap();
        let (total, _) = softmax_cross_entropy(g.output_value(&acts).unwrap(), &labels, 0).unwrap();
        assert!((chunked.loss - total / n as f64).abs() < 1e-12);
        let per = per_example_losses(&g, &batch).unwrap();
        assert!((per.iter().sum::<f64>() - total).abs() < 1e-10);
    }
}
