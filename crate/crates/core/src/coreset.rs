//! Core failure set selection: K-center greedy over penultimate features,
//! with exact oracles for small instances.

use std::collections::HashSet;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{self, ComputeGraph, GraphError};
use crate::data::{DataError, LabeledDataset};
use crate::searchspace::PENULTIMATE;
use crate::tensor::Tensor;

pub const BRUTE_FORCE_MAX_POINTS: usize = 18;
pub const BRUTE_FORCE_MAX_BUDGET: usize = 5;

/// Candidates per parallel work unit when updating nearest-center distances.
const BLOCK: usize = 256;

#[derive(Debug, Error)]
pub enum CoresetError {
    #[error("vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("covering radius needs at least one center")]
    NoCenters,
    #[error("embedding table: {0}")]
    Table(String),
    #[error("model has no node named {PENULTIMATE:?}")]
    NoPenultimate,
    #[error("brute force limited to {BRUTE_FORCE_MAX_POINTS} points and budget {BRUTE_FORCE_MAX_BUDGET}, got {points} and {budget}")]
    TooLarge { points: usize, budget: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Feature rows keyed by example id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<u64>,
    vectors: Tensor,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<u64>, vectors: Tensor) -> Result<Self, CoresetError> {
        if vectors.shape().len() != 2 || vectors.rows() != ids.len() {
            return Err(CoresetError::Table(format!(
                "{} ids for vectors of shape {:?}",
                ids.len(),
                vectors.shape()
            )));
        }
        if !vectors.is_finite() {
            return Err(CoresetError::Table("non-finite feature value".into()));
        }
        let mut seen = HashSet::new();
        if let Some(id) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(CoresetError::Table(format!("duplicate id {id}")));
        }
        Ok(Self { ids, vectors })
    }

    /// Table from plain rows, mainly for tests and small tools.
    pub fn from_rows(ids: Vec<u64>, rows: &[Vec<f64>]) -> Result<Self, CoresetError> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(CoresetError::Table("ragged rows".into()));
        }
        Self::new(ids, Tensor::new(vec![rows.len(), d], rows.concat()))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    fn check_dim(&self, other: &Self) -> Result<(), CoresetError> {
        if !self.is_empty() && !other.is_empty() && self.dim() != other.dim() {
            return Err(CoresetError::LengthMismatch(self.dim(), other.dim()));
        }
        Ok(())
    }
}

/// Penultimate-layer features of every example in `data`.
pub fn embed_dataset(model: &ComputeGraph, data: &LabeledDataset) -> Result<EmbeddingTable, CoresetError> {
    let node = model.named(PENULTIMATE).ok_or(CoresetError::NoPenultimate)?;
    let width: usize = model.shape(node).dims.iter().product();
    let vectors = if data.is_empty() {
        Tensor::zeros(&[0, width])
    } else {
        autodiff::node_rows(model, &data.to_batch().images, node)?
    };
    EmbeddingTable::new(data.ids().to_vec(), vectors)
}

/// Euclidean distance.
pub fn pair_distance(u: &[f64], v: &[f64]) -> Result<f64, CoresetError> {
    if u.len() != v.len() {
        return Err(CoresetError::LengthMismatch(u.len(), v.len()));
    }
    Ok(dist(u, v))
}

fn dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Largest distance from a point to its nearest center.
pub fn covering_radius(centers: &EmbeddingTable, points: &EmbeddingTable) -> Result<f64, CoresetError> {
    if centers.is_empty() {
        return Err(CoresetError::NoCenters);
    }
    centers.check_dim(points)?;
    Ok((0..points.len())
        .map(|p| {
            (0..centers.len())
                .map(|c| dist(points.vector(p), centers.vector(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max))
}

/// Ordered core selection with the covering radius of the failure points
/// after each round.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreSelection {
    pub ids: Vec<u64>,
    pub radii: Vec<f64>,
    pub budget: usize,
}

impl CoreSelection {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `round,example_id,radius`, rounds counted from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,example_id,radius\n");
        for (r, (id, radius)) in self.ids.iter().zip(&self.radii).enumerate() {
            out.push_str(&format!("{},{id},{radius}\n", r + 1));
        }
        out
    }

    pub fn parse_csv(text: &str, budget: usize) -> Result<Self, CoresetError> {
        let mut ids = Vec::new();
        let mut radii = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || CoresetError::Table(format!("selection line {}: {line:?}", i + 1));
            let fields: Vec<&str> = line.split(',').collect();
            let [_, id, radius] = fields.as_slice() else {
                return Err(bad());
            };
            ids.push(id.parse().map_err(|_| bad())?);
            radii.push(radius.parse().map_err(|_| bad())?);
        }
        Ok(Self { ids, radii, budget })
    }
}

/// Farthest-first selection of up to `budget` failure examples. The center
/// set starts as all training features and grows with each pick; ties go to
/// the lowest id.
pub fn kcenter_greedy(train: &EmbeddingTable, fail: &EmbeddingTable, budget: usize) -> Result<CoreSelection, CoresetError> {
    train.check_dim(fail)?;
    let m = fail.len();
    let rounds = budget.min(m);
    let mut nearest = vec![f64::INFINITY; m];
    let mut taken = vec![false; m];
    let update = |nearest: &mut [f64], center: &(dyn Fn(usize) -> f64 + Sync)| {
        nearest.par_chunks_mut(BLOCK).enumerate().for_each(|(b, chunk)| {
            for (j, d) in chunk.iter_mut().enumerate() {
                let c = center(b * BLOCK + j);
                if c < *d {
                    *d = c;
                }
            }
        });
    };
    for t in 0..train.len() {
        update(&mut nearest, &|j| dist(fail.vector(j), train.vector(t)));
    }
    let mut ids = Vec::with_capacity(rounds);
    let mut radii = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let pick = (0..m)
            .filter(|j| !taken[*j])
            .max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then_with(|| fail.ids[b].cmp(&fail.ids[a])))
            .expect("rounds never exceed candidates");
        taken[pick] = true;
        ids.push(fail.ids[pick]);
        update(&mut nearest, &|j| dist(fail.vector(j), fail.vector(pick)));
        radii.push(nearest.iter().copied().fold(0.0, f64::max));
    }
    Ok(CoreSelection { ids, radii, budget })
}

fn centers_with(train: &EmbeddingTable, fail: &EmbeddingTable, chosen: &[usize]) -> EmbeddingTable {
    let d = if train.is_empty() { fail.dim() } else { train.dim() };
    let mut data = train.vectors.data().to_vec();
    let mut ids = train.ids.clone();
    for &j in chosen {
        data.extend_from_slice(fail.vector(j));
        ids.push(fail.ids[j]);
    }
    EmbeddingTable {
        vectors: Tensor::new(vec![ids.len(), d], data),
        ids,
    }
}

/// Covering radius of the failure points by `train` plus the failure
/// examples `selected`.
pub fn selection_radius(train: &EmbeddingTable, fail: &EmbeddingTable, selected: &[u64]) -> Result<f64, CoresetError> {
    let index: Vec<usize> = selected
        .iter()
        .map(|id| {
            fail.ids
                .iter()
                .position(|f| f == id)
                .ok_or_else(|| CoresetError::Table(format!("id {id} not in failure table")))
        })
        .collect::<Result<_, _>>()?;
    covering_radius(&centers_with(train, fail, &index), fail)
}

/// Exact K-center optimum by enumerating all subsets of size
/// `min(budget, |fail|)`; returns the radius and the first optimal subset in
/// lexicographic index order.
pub fn brute_force_kcenter(train: &EmbeddingTable, fail: &EmbeddingTable, budget: usize) -> Result<(f64, Vec<u64>), CoresetError> {
    if fail.len() > BRUTE_FORCE_MAX_POINTS || budget > BRUTE_FORCE_MAX_BUDGET {
        return Err(CoresetError::TooLarge {
            points: fail.len(),
            budget,
        });
    }
    train.check_dim(fail)?;
    let k = budget.min(fail.len());
    let mut best: Option<(f64, Vec<usize>)> = None;
    for subset in (0..fail.len()).combinations(k) {
        let centers = centers_with(train, fail, &subset);
        if centers.is_empty() {
            continue;
        }
        let r = covering_radius(&centers, fail)?;
        if best.as_ref().is_none_or(|(b, _)| r < *b) {
            best = Some((r, subset));
        }
    }
    let (radius, subset) = best.unwrap_or((f64::INFINITY, Vec::new()));
    Ok((radius, subset.into_iter().map(|j| fail.ids[j]).collect()))
}

/// The objective exactly as printed: max over selected points of the
/// distance to their nearest center in `train` plus the selection. Each
/// selected point is its own center, so this is 0 for any selection.
pub fn printed_objective(train: &EmbeddingTable, fail: &EmbeddingTable, selected: &[u64]) -> Result<f64, CoresetError> {
    if selected.is_empty() {
        return Ok(0.0);
    }
    let chosen: Vec<usize> = selected.iter().filter_map(|id| fail.ids.iter().position(|f| f == id)).collect();
    let centers = centers_with(train, fail, &chosen);
    let points = EmbeddingTable {
        ids: chosen.iter().map(|&j| fail.ids[j]).collect(),
        vectors: Tensor::new(
            vec![chosen.len(), fail.dim()],
            chosen.iter().flat_map(|&j| fail.vector(j).to_vec()).collect(),
        ),
    };
    covering_radius(&centers, &points)
}

/// Uniformly random selection of `min(budget, |fail|)` ids, with radii
/// computed like the greedy ones for comparison.
pub fn random_selection(train: &EmbeddingTable, fail: &EmbeddingTable, budget: usize, seed: u64) -> Result<CoreSelection, CoresetError> {
    train.check_dim(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..fail.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(budget.min(fail.len()));
    let mut radii = Vec::with_capacity(order.len());
    for r in 1..=order.len() {
        radii.push(covering_radius(&centers_with(train, fail, &order[..r]), fail)?);
    }
    Ok(CoreSelection {
        ids: order.iter().map(|&j| fail.ids[j]).collect(),
        radii,
        budget,
    })
}

/// Seeded shuffle then halve; the training half takes the odd one out.
pub fn split_coreset(selection: &CoreSelection, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = selection.ids.clone();
    ids.shuffle(&mut rng);
    let val = ids.split_off(ids.len().div_ceil(2));
    (ids, val)
}

/// `|L(train + all failures) - L(train + selected failures)|` with mean
/// cross-entropy over each union.
pub fn coreset_loss_gap(
    model: &ComputeGraph,
    train: &LabeledDataset,
    fail_full: &LabeledDataset,
    selection: &[u64],
) -> Result<f64, CoresetError> {
    let sum = |d: &LabeledDataset| -> Result<f64, CoresetError> {
        if d.is_empty() {
            return Ok(0.0);
        }
        Ok(autodiff::per_example_losses(model, &d.to_batch())?.iter().sum())
    };
    let base = sum(train)?;
    let chosen = fail_full.select_ids(selection)?;
    let full = (base + sum(fail_full)?) / (train.len() + fail_full.len()).max(1) as f64;
    let core = (base + sum(&chosen)?) / (train.len() + chosen.len()).max(1) as f64;
    Ok((full - core).abs())
}
