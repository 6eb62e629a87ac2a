use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{loss_and_backward, mean_loss, ComputeGraph, GradRequest, GraphError, LabeledBatch};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// max of `|analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(slot, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Checks the mean cross-entropy gradient at `samples` coordinates drawn
/// uniformly (without replacement) over every parameter slot; all
/// coordinates are checked when `samples` exceeds their number.
///
/// Parameters are restored bit-exactly after each probe.
pub fn finite_difference_check(
    graph: &mut ComputeGraph,
    batch: &LabeledBatch,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<FdReport, GraphError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = loss_and_backward(graph, batch, GradRequest::ALL)?.grads;
    let coords: Vec<(usize, usize)> = graph
        .slots()
        .iter()
        .enumerate()
        .flat_map(|(s, slot)| (0..slot.value.len()).map(move |i| (s, i)))
        .collect();
    let chosen: Vec<usize> = if samples >= coords.len() {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, coords.len(), samples).into_vec();
        picked.sort_unstable();
        picked
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for idx in chosen {
        let (slot, i) = coords[idx];
        let original = graph.slot(slot).value.data()[i];
        graph.slot_value_mut(slot).data_mut()[i] = original + step;
        let plus = mean_loss(graph, batch);
        graph.slot_value_mut(slot).data_mut()[i] = original - step;
        let minus = mean_loss(graph, batch);
        graph.slot_value_mut(slot).data_mut()[i] = original;
        let numeric = (plus? - minus?) / (2.0 * step);
        let a = analytic.get(slot).map_or(0.0, |g| g.data()[i]);
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((slot, i));
        }
        report.checked += 1;
    }
    Ok(report)
}
