use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArchitectureParams, CellSpec, OpKind, OperationSet, SearchSpaceError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedEdge {
    pub from: usize,
    pub op: OpKind,
}

/// Retained in-edges of each intermediate node, sorted by source node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGenotype {
    pub nodes: Vec<Vec<RetainedEdge>>,
}

impl CellGenotype {
    /// In-edges of cell node `to` (an intermediate node id).
    pub fn node(&self, to: usize) -> &[RetainedEdge] {
        &self.nodes[to - 2]
    }
}

/// A discrete architecture: one genotype shared by all cells, or one per cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteArch {
    pub cell: CellSpec,
    pub cells: Vec<CellGenotype>,
}

impl DiscreteArch {
    pub fn contains(&self, op: OpKind) -> bool {
        self.edges().any(|(_, _, e)| e.op == op)
    }

    /// `(cell, target node, edge)` for every retained edge.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, RetainedEdge)> + '_ {
        self.cells.iter().enumerate().flat_map(move |(c, g)| {
            g.nodes
                .iter()
                .enumerate()
                .flat_map(move |(j, edges)| edges.iter().map(move |e| (c, j + self.cell.inputs, *e)))
        })
    }

    /// Text genotype, one `node <j> <- node <i> : <op>` line per retained
    /// edge; per-cell genotypes are introduced by `cell <c>` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (c, g) in self.cells.iter().enumerate() {
            if self.cells.len() > 1 {
                let _ = writeln!(out, "cell {c}");
            }
            for (j, edges) in g.nodes.iter().enumerate() {
                for e in edges {
                    let _ = writeln!(out, "node {} <- node {} : {}", j + self.cell.inputs, e.from, e.op);
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SearchSpaceError> {
        let err = |line: usize, reason: &str| SearchSpaceError::Genotype {
            line,
            reason: reason.to_string(),
        };
        let mut groups: Vec<Vec<(usize, RetainedEdge)>> = Vec::new();
        let mut saw_cell_header = false;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("cell ") {
                let idx: usize = rest.trim().parse().map_err(|_| err(line_no, "bad cell index"))?;
                if idx != groups.len() {
                    return Err(err(line_no, "cell headers must count up from 0"));
                }
                if !saw_cell_header && !groups.is_empty() {
                    return Err(err(line_no, "edges before the first cell header"));
                }
                saw_cell_header = true;
                groups.push(Vec::new());
                continue;
            }
            let (lhs, op) = line.split_once(':').ok_or_else(|| err(line_no, "missing ':'"))?;
            let (to, from) = lhs.split_once("<-").ok_or_else(|| err(line_no, "missing '<-'"))?;
            let node_id = |s: &str| -> Result<usize, SearchSpaceError> {
                s.trim()
                    .strip_prefix("node")
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| err(line_no, "expected 'node <index>'"))
            };
            let (to, from) = (node_id(to)?, node_id(from)?);
            let op: OpKind = op.trim().parse().map_err(|_| err(line_no, "unknown operation"))?;
            if op == OpKind::Zero {
                return Err(err(line_no, "zero operation cannot be retained"));
            }
            if to < 2 || from >= to {
                return Err(err(line_no, "edge must go from an earlier node into an intermediate node"));
            }
            if groups.is_empty() {
                groups.push(Vec::new());
            }
            groups.last_mut().expect("group").push((to, RetainedEdge { from, op }));
        }
        let intermediates = groups
            .iter()
            .flatten()
            .map(|(to, _)| to - 1)
            .max()
            .ok_or_else(|| err(0, "empty genotype"))?;
        let cell = CellSpec::new(intermediates)?;
        let mut cells = Vec::new();
        let mut retain: Option<usize> = None;
        for group in groups {
            let mut nodes = vec![Vec::new(); intermediates];
            for (to, e) in group {
                let slot: &mut Vec<RetainedEdge> = &mut nodes[to - 2];
                if slot.iter().any(|x| x.from == e.from) {
                    return Err(err(0, &format!("duplicate edge into node {to}")));
                }
                slot.push(e);
            }
            for (j, edges) in nodes.iter_mut().enumerate() {
                edges.sort_by_key(|e| e.from);
                match retain {
                    None => retain = Some(edges.len()),
                    Some(k) if k != edges.len() => {
                        return Err(err(0, &format!("node {} retains {} edges, expected {k}", j + 2, edges.len())));
                    }
                    _ => {}
                }
                if edges.is_empty() {
                    return Err(err(0, &format!("node {} has no retained edges", j + 2)));
                }
            }
            cells.push(CellGenotype { nodes });
        }
        Ok(DiscreteArch { cell, cells })
    }
}

/// Per edge, the strongest non-zero op by alpha; per node, the `retain_k`
/// in-edges whose chosen-op softmax weight is largest. Ties go to the
/// lower op index and the lower edge index.
pub fn derive_architecture(alpha: &ArchitectureParams, retain_k: usize) -> Result<DiscreteArch, SearchSpaceError> {
    let cell = alpha.cell;
    let zero = alpha.ops.index_of(OpKind::Zero);
    for to in cell.inputs..cell.node_count() {
        if retain_k == 0 || retain_k > to {
            return Err(SearchSpaceError::RetainTooLarge {
                retain_k,
                node: to,
                available: to,
            });
        }
    }
    let mut cells = Vec::with_capacity(alpha.groups());
    for group in 0..alpha.groups() {
        let mut nodes = Vec::with_capacity(cell.intermediates);
        for to in cell.inputs..cell.node_count() {
            let mut scored: Vec<(f64, usize, OpKind)> = (0..to)
                .map(|from| {
                    let row = alpha.row(group, cell.first_edge_into(to) + from);
                    let mut weights = row.to_vec();
                    crate::tensor::softmax_in_place(&mut weights);
                    let mut best: Option<usize> = None;
                    for k in 0..row.len() {
                        if Some(k) == zero {
                            continue;
                        }
                        if best.is_none_or(|b| row[k] > row[b]) {
                            best = Some(k);
                        }
                    }
                    let k = best.expect("op set has a non-zero op");
                    (weights[k], from, alpha.ops.ops()[k])
                })
                .collect();
            // stable sort keeps the lower edge first on equal scores
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
            let mut kept: Vec<RetainedEdge> = scored[..retain_k].iter().map(|&(_, from, op)| RetainedEdge { from, op }).collect();
            kept.sort_by_key(|e| e.from);
            nodes.push(kept);
        }
        cells.push(CellGenotype { nodes });
    }
    Ok(DiscreteArch { cell, cells })
}

/// Uniformly random architecture: random distinct in-edges and random non-zero ops.
pub fn random_architecture(cell: CellSpec, ops: &OperationSet, retain_k: usize, groups: usize, seed: u64) -> DiscreteArch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let choices: Vec<OpKind> = ops.ops().iter().copied().filter(|o| *o != OpKind::Zero).collect();
    let cells = (0..groups)
        .map(|_| CellGenotype {
            nodes: (cell.inputs..cell.node_count())
                .map(|to| {
                    let mut sources: Vec<usize> = (0..to).collect();
                    sources.shuffle(&mut rng);
                    let mut kept: Vec<RetainedEdge> = sources[..retain_k.min(to)]
                        .iter()
                        .map(|&from| RetainedEdge {
                            from,
                            op: *choices.choose(&mut rng).expect("non-zero op"),
                        })
                        .collect();
                    kept.sort_by_key(|e| e.from);
                    kept
                })
                .collect(),
        })
        .collect();
    DiscreteArch { cell, cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn params(rows: Vec<[f64; 5]>) -> ArchitectureParams {
        let cell = CellSpec::new(rows.len().min(1)).unwrap();
        let data = rows.iter().flatten().copied().collect();
        ArchitectureParams::new(Tensor::new(vec![rows.len(), 5], data), cell, OperationSet::default()).unwrap()
    }

    #[test]
    fn clear_argmax_wins() {
        // one intermediate node with two in-edges
        let a = params(vec![[0.1, 0.9, 0.0, 0.0, 0.0], [5.0, 0.0, 0.0, 0.0, 0.0]]);
        let d = derive_architecture(&a, 1).unwrap();
        // edge 1 has zero dominant, so its best non-zero op has tiny weight
        assert_eq!(
            d.cells[0].nodes[0],
            vec![RetainedEdge {
                from: 0,
                op: OpKind::Identity
            }]
        );
    }

    #[test]
    fn equal_scores_keep_lower_edge() {
        let a = params(vec![[0.0, 0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0, 0.0]]);
        let d = derive_architecture(&a, 1).unwrap();
        assert_eq!(d.cells[0].nodes[0][0].from, 0);
        assert_eq!(d.cells[0].nodes[0][0].op, OpKind::Conv3x3);
    }

    #[test]
    fn all_zero_alpha_picks_first_nonzero_op() {
        let a = ArchitectureParams::zeros(CellSpec::default(), OperationSet::default(), 1);
        let d = derive_architecture(&a, 2).unwrap();
        assert!(d.edges().all(|(_, _, e)| e.op == OpKind::Identity));
        assert!(d.cells[0].nodes.iter().all(|n| n.len() == 2 && n[0].from == 0 && n[1].from == 1));
    }

    #[test]
    fn retain_k_is_bounded() {
        let a = ArchitectureParams::zeros(CellSpec::default(), OperationSet::default(), 1);
        assert!(matches!(
            derive_architecture(&a, 3),
            Err(SearchSpaceError::RetainTooLarge { node: 2, .. })
        ));
        assert!(derive_architecture(&a, 0).is_err());
    }

    #[test]
    fn parse_rejects_malformed_lines() {
        assert!(DiscreteArch::parse("node 2 <- node 0 identity").is_err());
        assert!(DiscreteArch::parse("node 2 <- node 0 : zero").is_err());
        assert!(DiscreteArch::parse("node 2 <- node 3 : identity").is_err());
        assert!(DiscreteArch::parse("").is_err());
        let uneven = "node 2 <- node 0 : identity\nnode 2 <- node 1 : identity\nnode 3 <- node 0 : conv_3x3\n";
        assert!(DiscreteArch::parse(uneven).is_err());
    }

    #[test]
    fn text_format_is_line_per_edge() {
        let arch = random_architecture(CellSpec::default(), &OperationSet::default(), 2, 1, 3);
        let text = arch.to_text();
        assert_eq!(text.lines().count(), 8);
        assert!(text
            .lines()
            .all(|l| l.starts_with("node ") && l.contains(" <- node ") && l.contains(" : ")));
    }

    proptest! {
        #[test]
        fn genotype_text_round_trips(seed in any::<u64>(), groups in 1usize..3, n in 1usize..5, k in 1usize..3) {
            let cell = CellSpec::new(n).unwrap();
            let arch = random_architecture(cell, &OperationSet::default(), k, groups, seed);
            prop_assert_eq!(DiscreteArch::parse(&arch.to_text()).unwrap(), arch);
        }

        #[test]
        fn derivation_ignores_constant_shift(
            vals in proptest::collection::vec(-3.0f64..3.0, 14 * 5),
            c in -50.0f64..50.0,
        ) {
            let cell = CellSpec::default();
            let a = ArchitectureParams::new(Tensor::new(vec![14, 5], vals.clone()), cell, OperationSet::default()).unwrap();
            let shifted = ArchitectureParams::new(
                Tensor::new(vec![14, 5], vals.iter().map(|v| v + c).collect()), cell, OperationSet::default()).unwrap();
            let d = derive_architecture(&a, 2).unwrap();
            prop_assert_eq!(&d, &derive_architecture(&shifted, 2).unwrap());
            prop_assert!(!d.contains(OpKind::Zero));
        }
    }
}
