//! Alternating first-order bilevel search: SGD with momentum on weight
//! slots over training batches, plain gradient descent on architecture
//! slots over validation batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{self, ComputeGraph, GradRequest, Gradients, GraphError, LabeledBatch, SlotTag};
use crate::data::LabeledDataset;
use crate::searchspace::{ArchitectureParams, Supernet};
use crate::tensor::{argmax, derive_seed, digest_u64, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BilevelError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("{split} split has images {found:?}, network expects {expected:?}")]
    InputShape {
        split: &'static str,
        found: [usize; 3],
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Architecture gradients taken with the weights held constant.
    #[default]
    FirstOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_w: f64,
    pub lr_alpha: f64,
    pub momentum_w: f64,
    pub weight_decay_w: f64,
    pub gradient_mode: GradientMode,
    /// Global L2 clip on weight gradients; 0 disables clipping.
    pub grad_clip: f64,
    /// Leading epochs that update weights only.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 40,
            batch_size: 32,
            lr_w: 0.05,
            lr_alpha: 0.5,
            momentum_w: 0.9,
            weight_decay_w: 3e-4,
            gradient_mode: GradientMode::FirstOrder,
            grad_clip: 5.0,
            warmup_epochs: 0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), BilevelError> {
        let bad = |m: &str| Err(BilevelError::InvalidConfig(m.to_string()));
        for (name, v) in [
            ("lr_w", self.lr_w),
            ("lr_alpha", self.lr_alpha),
            ("weight_decay_w", self.weight_decay_w),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(&format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum_w) {
            return bad("momentum_w must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip must be finite and non-negative");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Momentum buffers for the weight slots of one graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Option<Tensor>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean batch loss before the update; NaN when the step was skipped.
    pub loss: f64,
    pub skipped: bool,
}

fn skipped() -> StepOutcome {
    StepOutcome {
        loss: f64::NAN,
        skipped: true,
    }
}

fn finite_grads(graph: &ComputeGraph, batch: &LabeledBatch, request: GradRequest) -> Result<Option<(f64, Gradients)>, GraphError> {
    match autodiff::loss_and_backward(graph, batch, request) {
        Ok(lg) if lg.grads.is_finite() => Ok(Some((lg.loss, lg.grads))),
        Ok(_) | Err(GraphError::NonFiniteLoss { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One SGD-with-momentum update of the weight slots. Architecture slots are
/// never written.
pub fn weight_step(
    graph: &mut ComputeGraph,
    state: &mut SgdState,
    batch: &LabeledBatch,
    config: &SearchConfig,
) -> Result<StepOutcome, GraphError> {
    let Some((loss, mut grads)) = finite_grads(graph, batch, GradRequest::WEIGHTS)? else {
        return Ok(skipped());
    };
    let slots: Vec<usize> = graph.slots_tagged(SlotTag::Weight).collect();
    if config.grad_clip > 0.0 {
        let max_norm = config.grad_clip;
        let norm = slots
            .iter()
            .filter_map(|&s| grads.get(s))
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let f = max_norm / (norm + 1e-6);
            for &s in &slots {
                if let Some(g) = grads.slots[s].as_mut() {
                    g.scale(f);
                }
            }
        }
    }
    state.velocity.resize(graph.slots().len(), None);
    for &s in &slots {
        let Some(mut g) = grads.slots[s].take() else {
            continue;
        };
        g.add_scaled(&graph.slot(s).value, config.weight_decay_w);
        let v = match state.velocity[s].take() {
            Some(mut v) => {
                v.scale(config.momentum_w);
                v.add_scaled(&g, 1.0);
                v
            }
            None => g,
        };
        graph.slot_value_mut(s).add_scaled(&v, -config.lr_w);
        state.velocity[s] = Some(v);
    }
    Ok(StepOutcome { loss, skipped: false })
}

/// One plain gradient step on the architecture slots with weights fixed.
pub fn alpha_step(graph: &mut ComputeGraph, batch: &LabeledBatch, config: &SearchConfig) -> Result<StepOutcome, GraphError> {
    let Some((loss, grads)) = finite_grads(graph, batch, GradRequest::ARCH)? else {
        return Ok(skipped());
    };
    let slots: Vec<usize> = graph.slots_tagged(SlotTag::Arch).collect();
    for s in slots {
        if let Some(g) = grads.get(s) {
            graph.slot_value_mut(s).add_scaled(g, -config.lr_alpha);
        }
    }
    Ok(StepOutcome { loss, skipped: false })
}

/// Walks seeded permutations of `0..n`, reshuffling when fewer than a
/// batch remain.
#[derive(Clone, Debug)]
pub struct Shuffler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Shuffler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let take = batch_size.min(self.order.len());
        if self.pos + take > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + take].to_vec();
        self.pos += take;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub alpha_hash: u64,
    pub weight_skipped: bool,
    pub alpha_skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchTrace {
    pub records: Vec<StepRecord>,
    pub final_alpha: ArchitectureParams,
}

impl SearchTrace {
    pub fn skipped_steps(&self) -> usize {
        self.records.iter().filter(|r| r.weight_skipped || r.alpha_skipped).count()
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(r.step.to_le_bytes());
            h.update(r.train_loss.to_bits().to_le_bytes());
            h.update(r.val_loss.to_bits().to_le_bytes());
            h.update(r.alpha_hash.to_le_bytes());
            h.update([r.weight_skipped as u8, r.alpha_skipped as u8]);
        }
        h.update(self.final_alpha.content_hash().to_le_bytes());
        digest_u64(h)
    }

    /// `step,train_loss,val_loss` rows; skipped or frozen steps print `nan`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,val_loss\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.step, fmt_loss(r.train_loss), fmt_loss(r.val_loss)));
        }
        out
    }
}

fn fmt_loss(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".to_string()
    }
}

fn check_split(split: &LabeledDataset, name: &'static str, graph: &ComputeGraph) -> Result<(), BilevelError> {
    if split.is_empty() {
        return Err(BilevelError::EmptySplit(name));
    }
    if graph.input_dims() != split.dims() {
        return Err(BilevelError::InputShape {
            split: name,
            found: split.dims(),
            expected: graph.input_dims().to_vec(),
        });
    }
    Ok(())
}

/// Runs `epochs * steps_per_epoch` iterations of one weight step on a
/// training batch followed by one architecture step on a validation batch.
pub fn search(
    supernet: &mut Supernet,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &SearchConfig,
) -> Result<SearchTrace, BilevelError> {
    config.validate()?;
    check_split(train, "train", &supernet.graph)?;
    check_split(val, "val", &supernet.graph)?;
    let mut train_order = Shuffler::new(train.len(), derive_seed(config.seed, "search/train"));
    let mut val_order = Shuffler::new(val.len(), derive_seed(config.seed, "search/val"));
    let mut sgd = SgdState::new();
    let mut records = Vec::with_capacity(config.total_steps());
    let slot = supernet.alpha_slot();
    for epoch in 0..config.epochs {
        for i in 0..config.steps_per_epoch {
            let tb = train.batch(&train_order.next_batch(config.batch_size));
            let w = weight_step(&mut supernet.graph, &mut sgd, &tb, config)?;
            let vb = val.batch(&val_order.next_batch(config.batch_size));
            let a = if epoch < config.warmup_epochs {
                StepOutcome {
                    loss: f64::NAN,
                    skipped: false,
                }
            } else {
                alpha_step(&mut supernet.graph, &vb, config)?
            };
            records.push(StepRecord {
                step: epoch * config.steps_per_epoch + i,
                train_loss: w.loss,
                val_loss: a.loss,
                alpha_hash: supernet.graph.slot(slot).value.content_hash(),
                weight_skipped: w.skipped,
                alpha_skipped: a.skipped,
            });
        }
    }
    Ok(SearchTrace {
        records,
        final_alpha: supernet.alpha(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub train_accuracy: f64,
    pub steps: usize,
    pub skipped_steps: usize,
}

/// Standard minibatch training of the weight slots for `epochs` passes over
/// `train`, one shuffled pass per epoch.
pub fn train_weights(
    graph: &mut ComputeGraph,
    train: &LabeledDataset,
    epochs: usize,
    config: &SearchConfig,
) -> Result<TrainOutcome, BilevelError> {
    config.validate()?;
    check_split(train, "train", graph)?;
    let per_epoch = train.len().div_ceil(config.batch_size);
    let mut order = Shuffler::new(train.len(), derive_seed(config.seed, "train_weights"));
    let mut sgd = SgdState::new();
    let mut skipped_steps = 0;
    for _ in 0..epochs {
        for _ in 0..per_epoch {
            let b = train.batch(&order.next_batch(config.batch_size));
            if weight_step(graph, &mut sgd, &b, config)?.skipped {
                skipped_steps += 1;
            }
        }
    }
    Ok(TrainOutcome {
        train_accuracy: accuracy(graph, train)?,
        steps: epochs * per_epoch,
        skipped_steps,
    })
}

/// Top-1 predictions; the lowest class index wins ties.
pub fn predict(graph: &ComputeGraph, data: &LabeledDataset) -> Result<Vec<usize>, GraphError> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let logits = autodiff::predict_logits(graph, &data.to_batch().images)?;
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

/// Top-1 accuracy; 0 on an empty split.
pub fn accuracy(graph: &ComputeGraph, data: &LabeledDataset) -> Result<f64, GraphError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(graph, data)?;
    let correct = pred.iter().zip(data.labels()).filter(|(p, l)| **p == **l as usize).count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::searchspace::{build_supernet, CellSpec, NetConfig};

    fn tiny_net() -> NetConfig {
        NetConfig {
            cell: CellSpec::new(2).unwrap(),
            num_cells: 1,
            channels: 2,
            input_dims: [1, 6, 6],
            ..NetConfig::default()
        }
    }

    fn tiny_data() -> crate::data::Splits {
        generate_synthetic(4, 10, 6, 6, 1).unwrap()
    }

    /// Two well separated Gaussian blobs in the plane.
    fn blobs(n: usize, seed: u64) -> LabeledDataset {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = (i % 2) as u32;
            let centre = if c == 0 { -1.0 } else { 1.0 };
            images.push((centre + noise.sample(&mut rng)) as f32);
            images.push((centre * 0.5 + noise.sample(&mut rng)) as f32);
            labels.push(c);
        }
        LabeledDataset::new("blobs", [2, 1, 1], 2, images, labels, (0..n as u64).collect()).unwrap()
    }

    fn linear_model(seed: u64) -> ComputeGraph {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = ComputeGraph::new(&[2, 1, 1]);
        let x = g.flatten(g.input()).unwrap();
        let w = g.param(
            "w",
            SlotTag::Weight,
            Tensor::new(vec![2, 2], (0..4).map(|_| rng.gen_range(-0.1..0.1)).collect()),
        );
        let b = g.param("b", SlotTag::Weight, Tensor::zeros(&[2]));
        let y = g.affine(x, w, b).unwrap();
        g.set_output(y);
        g
    }

    #[test]
    fn weight_step_leaves_alpha_and_alpha_step_leaves_weights() {
        let data = tiny_data();
        let mut sn = build_supernet(&tiny_net(), 5).unwrap();
        let batch = data.train.batch(&[0, 1, 2, 3, 4, 5]);
        let cfg = SearchConfig::default();
        let mut sgd = SgdState::new();
        let (a0, w0) = (sn.graph.tag_hash(SlotTag::Arch), sn.graph.tag_hash(SlotTag::Weight));
        weight_step(&mut sn.graph, &mut sgd, &batch, &cfg).unwrap();
        assert_eq!(sn.graph.tag_hash(SlotTag::Arch), a0);
        let w1 = sn.graph.tag_hash(SlotTag::Weight);
        assert_ne!(w1, w0);
        alpha_step(&mut sn.graph, &batch, &cfg).unwrap();
        assert_eq!(sn.graph.tag_hash(SlotTag::Weight), w1);
        assert_ne!(sn.graph.tag_hash(SlotTag::Arch), a0);
    }

    #[test]
    fn zero_rates_leave_params_bitwise() {
        let data = tiny_data();
        let mut sn = build_supernet(&tiny_net(), 6).unwrap();
        let batch = data.val.to_batch();
        let cfg = SearchConfig {
            lr_w: 0.0,
            lr_alpha: 0.0,
            ..SearchConfig::default()
        };
        let before = sn.graph.clone();
        let mut sgd = SgdState::new();
        for _ in 0..3 {
            weight_step(&mut sn.graph, &mut sgd, &batch, &cfg).unwrap();
            alpha_step(&mut sn.graph, &batch, &cfg).unwrap();
        }
        for (a, b) in sn.graph.slots().iter().zip(before.slots()) {
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn convex_full_batch_loss_decreases() {
        let data = blobs(40, 1);
        let batch = data.to_batch();
        let mut g = linear_model(2);
        let cfg = SearchConfig {
            lr_w: 0.01,
            grad_clip: 0.0,
            ..SearchConfig::default()
        };
        let mut sgd = SgdState::new();
        let mut last = autodiff::mean_loss(&g, &batch).unwrap();
        for _ in 0..30 {
            weight_step(&mut g, &mut sgd, &batch, &cfg).unwrap();
            let now = autodiff::mean_loss(&g, &batch).unwrap();
            assert!(now < last, "{now} >= {last}");
            last = now;
        }
    }

    #[test]
    fn non_finite_step_is_skipped() {
        let data = blobs(8, 3);
        let mut g = linear_model(4);
        g.slot_value_mut(0).data_mut()[0] = f64::INFINITY;
        let before = g.clone();
        let out = weight_step(&mut g, &mut SgdState::new(), &data.to_batch(), &SearchConfig::default()).unwrap();
        assert!(out.skipped);
        assert_eq!(g.slots()[1], before.slots()[1]);
    }

    /// One relaxed edge choosing between identity (informative) and zero;
    /// the fixed head classifies correctly only through identity.
    #[test]
    fn alpha_prefers_the_better_op() {
        let data = blobs(32, 7);
        let batch = data.to_batch();
        let mut g = ComputeGraph::new(&[2, 1, 1]);
        let x = g.flatten(g.input()).unwrap();
        let alpha = g.param("alpha", SlotTag::Arch, Tensor::zeros(&[1, 2]));
        let mix = g.softmax(alpha).unwrap();
        let z = g.zero(x).unwrap();
        let e = g.weighted_sum(mix, 0, &[x, z]).unwrap();
        let w = g.param("w", SlotTag::Weight, Tensor::new(vec![2, 2], vec![-2.0, -1.0, 2.0, 1.0]));
        let b = g.param("b", SlotTag::Weight, Tensor::zeros(&[2]));
        let y = g.affine(e, w, b).unwrap();
        g.set_output(y);
        let cfg = SearchConfig {
            lr_alpha: 0.5,
            ..SearchConfig::default()
        };
        let mut reached = None;
        for step in 0..200 {
            alpha_step(&mut g, &batch, &cfg).unwrap();
            let p = crate::tensor::softmax_rows(&g.slot(0).value);
            if p.data()[0] > 0.9 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "identity weight stayed below 0.9");
    }

    #[test]
    fn zero_epochs_keep_initial_alpha() {
        let data = tiny_data();
        let mut sn = build_supernet(&tiny_net(), 8).unwrap();
        let initial = sn.alpha();
        let cfg = SearchConfig {
            epochs: 0,
            ..SearchConfig::default()
        };
        let trace = search(&mut sn, &data.train, &data.val, &cfg).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(trace.final_alpha, initial);
    }

    #[test]
    fn search_is_deterministic_and_sized() {
        let data = tiny_data();
        let cfg = SearchConfig {
            epochs: 2,
            steps_per_epoch: 3,
            batch_size: 8,
            ..SearchConfig::default()
        };
        let run = || {
            let mut sn = build_supernet(&tiny_net(), 9).unwrap();
            search(&mut sn, &data.train, &data.val, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.records.len(), 6);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.final_alpha, build_supernet(&tiny_net(), 9).unwrap().alpha());
        let csv = a.to_csv();
        assert!(csv.starts_with("step,train_loss,val_loss\n0,"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn warmup_freezes_alpha() {
        let data = tiny_data();
        let cfg = SearchConfig {
            epochs: 1,
            steps_per_epoch: 2,
            batch_size: 4,
            warmup_epochs: 1,
            ..SearchConfig::default()
        };
        let mut sn = build_supernet(&tiny_net(), 10).unwrap();
        let a0 = sn.alpha();
        search(&mut sn, &data.train, &data.val, &cfg).unwrap();
        assert_eq!(sn.alpha(), a0);
    }

    #[test]
    fn empty_and_mismatched_splits_rejected() {
        let data = tiny_data();
        let mut sn = build_supernet(&tiny_net(), 11).unwrap();
        let empty = LabeledDataset::empty("val", [1, 6, 6], 4);
        let cfg = SearchConfig::default();
        assert_eq!(search(&mut sn, &data.train, &empty, &cfg), Err(BilevelError::EmptySplit("val")));
        let other = generate_synthetic(4, 3, 5, 5, 0).unwrap();
        assert!(matches!(
            search(&mut sn, &other.train, &data.val, &cfg),
            Err(BilevelError::InputShape { .. })
        ));
    }

    #[test]
    fn training_separates_blobs() {
        let data = blobs(60, 12);
        let mut g = linear_model(13);
        let cfg = SearchConfig {
            batch_size: 8,
            ..SearchConfig::default()
        };
        let init = g.clone();
        assert_eq!(train_weights(&mut g, &data, 0, &cfg).unwrap().steps, 0);
        assert_eq!(g, init);
        let out = train_weights(&mut g, &data, 30, &cfg).unwrap();
        assert!(out.train_accuracy >= 0.95, "{}", out.train_accuracy);
        let mut again = init.clone();
        train_weights(&mut again, &data, 30, &cfg).unwrap();
        assert_eq!(again, g);
    }

    #[test]
    fn shuffler_covers_each_example_once_per_pass() {
        let mut s = Shuffler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(Shuffler::new(3, 0).next_batch(8).len(), 3);
    }
}
