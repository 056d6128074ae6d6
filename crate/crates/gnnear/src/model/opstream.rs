//! Compilation of one training epoch into an ordered stream of
//! aggregation (Reduce), combination (Update), and elementwise (Others)
//! steps over destination intervals.
//!
//! The stream is the contract between the model and the machine: every
//! edge (u, v) with u in the closed neighborhood of v appears in exactly
//! one ReduceStep per (layer, direction), and interval indices partition
//! the vertex range in order.

use std::ops::Range;

use crate::cae::{interval_range, num_intervals, ShardConfig};
use crate::graph::CsrGraph;
use crate::model::{effective_ieo, ModelConfig, Variant};
use crate::partition::{validate_coverage, Placement};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    /// Vector-matrix product through the layer weights.
    VecMat,
    /// Outer-product accumulation into the weight gradients.
    OuterProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OthersKind {
    Loss,
    /// Forward activation, or its gradient mask in the backward pass.
    Activation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReduceStep {
    pub layer: u8,
    pub direction: Direction,
    pub dest_interval: u64,
    /// Edge terms aggregated by this interval, self terms included.
    pub edges: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateStep {
    pub layer: u8,
    pub direction: Direction,
    pub kind: UpdateKind,
    pub vertex_range: Range<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OthersStep {
    pub kind: OthersKind,
    pub layer: u8,
    pub vertex_range: Range<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Reduce(ReduceStep),
    Update(UpdateStep),
    Others(OthersStep),
}

#[derive(Debug, Clone)]
pub struct OpStream {
    pub steps: Vec<Step>,
    /// Destinations per interval.
    pub c: u32,
    /// Per-layer combination-first flags the stream was built with.
    pub ieo: Vec<bool>,
}

fn edge_terms_in(graph: &CsrGraph, dsts: &Range<u32>) -> u64 {
    let lo = graph.row_ptr[dsts.start as usize];
    let hi = graph.row_ptr[dsts.end as usize];
    (hi - lo) + (dsts.end - dsts.start) as u64
}

fn push_reduce(steps: &mut Vec<Step>, graph: &CsrGraph, c: u32, layer: u8, direction: Direction) {
    for i in 0..num_intervals(graph.num_vertices, c) {
        let dsts = interval_range(i, graph.num_vertices, c);
        steps.push(Step::Reduce(ReduceStep {
            layer,
            direction,
            dest_interval: i,
            edges: edge_terms_in(graph, &dsts),
        }));
    }
}

/// Compile one epoch. With `ieo`, layers whose aggregator is linear and
/// whose input width exceeds the output width run their combination
/// first: the forward Update precedes the layer's Reduces, and the
/// backward pass mirrors by reducing gradients before both Updates.
pub fn build_op_stream(
    graph: &CsrGraph,
    config: &ModelConfig,
    placement: &Placement,
    shard: ShardConfig,
    ieo: bool,
) -> Result<OpStream> {
    config.validate()?;
    validate_coverage(placement, graph.num_vertices)?;
    if shard.c == 0 {
        return Err(Error::Config("interval width must be nonzero".into()));
    }
    if ieo && config.variant == Variant::Gat {
        return Err(Error::Config(
            "combination-first order needs a linear aggregator; attention \
             weights make the backward aggregation nonlinear"
                .into(),
        ));
    }
    let eff = effective_ieo(config, ieo);
    let n = graph.num_vertices;
    let all = 0..n;
    let last = (config.num_layers() - 1) as u8;
    let mut steps = Vec::new();

    for l in 0..config.num_layers() as u8 {
        let first_combine = eff[l as usize];
        if first_combine {
            steps.push(Step::Update(UpdateStep {
                layer: l,
                direction: Direction::Forward,
                kind: UpdateKind::VecMat,
                vertex_range: all.clone(),
            }));
            push_reduce(&mut steps, graph, shard.c, l, Direction::Forward);
        } else {
            push_reduce(&mut steps, graph, shard.c, l, Direction::Forward);
            steps.push(Step::Update(UpdateStep {
                layer: l,
                direction: Direction::Forward,
                kind: UpdateKind::VecMat,
                vertex_range: all.clone(),
            }));
        }
        steps.push(Step::Others(OthersStep {
            kind: OthersKind::Activation,
            layer: l,
            vertex_range: all.clone(),
        }));
    }

    steps.push(Step::Others(OthersStep {
        kind: OthersKind::Loss,
        layer: last,
        vertex_range: all.clone(),
    }));

    for l in (0..config.num_layers() as u8).rev() {
        if eff[l as usize] {
            // Gradients are narrower than features here; aggregate them
            // first, then form weight gradients and propagate.
            push_reduce(&mut steps, graph, shard.c, l, Direction::Backward);
            steps.push(Step::Update(UpdateStep {
                layer: l,
                direction: Direction::Backward,
                kind: UpdateKind::OuterProduct,
                vertex_range: all.clone(),
            }));
            if l > 0 {
                steps.push(Step::Update(UpdateStep {
                    layer: l,
                    direction: Direction::Backward,
                    kind: UpdateKind::VecMat,
                    vertex_range: all.clone(),
                }));
                steps.push(Step::Others(OthersStep {
                    kind: OthersKind::Activation,
                    layer: l,
                    vertex_range: all.clone(),
                }));
            }
        } else {
            steps.push(Step::Update(UpdateStep {
                layer: l,
                direction: Direction::Backward,
                kind: UpdateKind::OuterProduct,
                vertex_range: all.clone(),
            }));
            if l > 0 {
                steps.push(Step::Update(UpdateStep {
                    layer: l,
                    direction: Direction::Backward,
                    kind: UpdateKind::VecMat,
                    vertex_range: all.clone(),
                }));
                push_reduce(&mut steps, graph, shard.c, l, Direction::Backward);
                steps.push(Step::Others(OthersStep {
                    kind: OthersKind::Activation,
                    layer: l,
                    vertex_range: all.clone(),
                }));
            }
        }
    }

    Ok(OpStream {
        steps,
        c: shard.c,
        ieo: eff,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCounts {
    /// Weighted vector additions per reduce pass: one per edge term.
    pub reduce_additions_per_layer: u64,
    pub vecmat_updates_per_layer: u64,
    pub outer_updates_per_layer: u64,
}

/// Nominal per-layer work: every vertex contributes one vector-matrix
/// product and one outer product per layer; every closed-neighborhood
/// edge term contributes one weighted addition.
pub fn op_counts(graph: &CsrGraph, _config: &ModelConfig) -> OpCounts {
    let n = graph.num_vertices as u64;
    OpCounts {
        reduce_additions_per_layer: graph.num_directed_edges() + n,
        vecmat_updates_per_layer: n,
        outer_updates_per_layer: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{even_partition, PartitionConfig};

    fn place(g: &CsrGraph) -> Placement {
        even_partition(g, &PartitionConfig::default()).unwrap()
    }

    fn model(variant: Variant, d_in: u32, hidden: u32, layers: usize) -> ModelConfig {
        ModelConfig::with_chain(variant, d_in, hidden, 3, layers, 4, 1)
    }

    fn reduce_total(s: &OpStream, layer: u8, dir: Direction) -> u64 {
        s.steps
            .iter()
            .filter_map(|st| match st {
                Step::Reduce(r) if r.layer == layer && r.direction == dir => Some(r.edges),
                _ => None,
            })
            .sum()
    }

    #[test]
    fn triangle_counts_nine_edge_terms() {
        let g = CsrGraph::from_edges(3, &[(0, 1), (0, 2), (1, 2)], true).unwrap();
        let cfg = model(Variant::Gcn, 4, 4, 1);
        assert_eq!(op_counts(&g, &cfg).reduce_additions_per_layer, 9);
        let s = build_op_stream(&g, &cfg, &place(&g), ShardConfig::default(), false).unwrap();
        assert_eq!(reduce_total(&s, 0, Direction::Forward), 9);
    }

    #[test]
    fn self_loops_only_for_edgeless_graphs() {
        let g = CsrGraph::from_edges(5, &[], true).unwrap();
        let cfg = model(Variant::SageConv, 4, 4, 1);
        assert_eq!(op_counts(&g, &cfg).reduce_additions_per_layer, 5);
    }

    #[test]
    fn additions_follow_the_degree_identity() {
        let g = crate::graph::generate_power_law(500, 9.0, 13).unwrap();
        let cfg = model(Variant::Gin, 8, 8, 2);
        let independent: u64 = (0..500).map(|v| g.degree_tilde(v) as u64).sum();
        let counts = op_counts(&g, &cfg);
        assert_eq!(counts.reduce_additions_per_layer, independent);
        assert_eq!(counts.vecmat_updates_per_layer, 500);
        assert_eq!(counts.outer_updates_per_layer, 500);
    }

    #[test]
    fn single_vertex_stream_shape() {
        let g = CsrGraph::from_edges(1, &[], true).unwrap();
        let cfg = model(Variant::Gcn, 2, 2, 1);
        let s = build_op_stream(&g, &cfg, &place(&g), ShardConfig::default(), false).unwrap();
        match &s.steps[..] {
            [Step::Reduce(r), Step::Update(u1), Step::Others(act), Step::Others(loss), Step::Update(u2)] =>
            {
                assert_eq!(r.edges, 1);
                assert_eq!(u1.kind, UpdateKind::VecMat);
                assert_eq!(act.kind, OthersKind::Activation);
                assert_eq!(loss.kind, OthersKind::Loss);
                assert_eq!(u2.kind, UpdateKind::OuterProduct);
                assert_eq!(u2.direction, Direction::Backward);
            }
            other => panic!("unexpected stream shape: {} steps", other.len()),
        }
    }

    #[test]
    fn combination_first_reorders_eligible_layers() {
        let g = crate::graph::generate_power_law(300, 8.0, 5).unwrap();
        // Layer 0 shrinks 602 -> 256 (eligible); layer 1 grows 256 -> 3.
        let cfg = ModelConfig::new(Variant::Gcn, vec![(602, 256), (256, 3)], 4, 1);
        let s = build_op_stream(&g, &cfg, &place(&g), ShardConfig::default(), true).unwrap();
        assert_eq!(s.ieo, vec![true, true]);

        let pos = |pred: &dyn Fn(&Step) -> bool| s.steps.iter().position(pred).unwrap();
        let fwd_update = pos(&|st| {
            matches!(st, Step::Update(u) if u.layer == 0 && u.direction == Direction::Forward)
        });
        let fwd_reduce = pos(&|st| {
            matches!(st, Step::Reduce(r) if r.layer == 0 && r.direction == Direction::Forward)
        });
        assert!(
            fwd_update < fwd_reduce,
            "combination must precede aggregation when interchanged"
        );

        let bwd_reduce = pos(&|st| {
            matches!(st, Step::Reduce(r) if r.layer == 1 && r.direction == Direction::Backward)
        });
        let bwd_update = pos(&|st| {
            matches!(st, Step::Update(u) if u.layer == 1 && u.direction == Direction::Backward)
        });
        assert!(bwd_reduce < bwd_update, "backward mirrors the interchange");

        // Without interchange the forward order is reduce then update.
        let base = build_op_stream(&g, &cfg, &place(&g), ShardConfig::default(), false).unwrap();
        assert_eq!(base.ieo, vec![false, false]);
        let b_upd = base
            .steps
            .iter()
            .position(|st| {
                matches!(st, Step::Update(u) if u.layer == 0 && u.direction == Direction::Forward)
            })
            .unwrap();
        let b_red = base
            .steps
            .iter()
            .position(|st| {
                matches!(st, Step::Reduce(r) if r.layer == 0 && r.direction == Direction::Forward)
            })
            .unwrap();
        assert!(b_red < b_upd);
    }

    #[test]
    fn attention_rejects_combination_first() {
        let g = CsrGraph::from_edges(4, &[(0, 1), (2, 3)], true).unwrap();
        let cfg = model(Variant::Gat, 8, 4, 2);
        let err =
            build_op_stream(&g, &cfg, &place(&g), ShardConfig::default(), true).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        build_op_stream(&g, &cfg, &place(&g), ShardConfig::default(), false).unwrap();
    }

    #[test]
    fn every_edge_appears_once_per_layer_direction() {
        let g = crate::graph::generate_power_law(700, 7.0, 17).unwrap();
        let cfg = model(Variant::Gcn, 16, 8, 2);
        let total: u64 = (0..700).map(|v| g.degree_tilde(v) as u64).sum();
        for ieo in [false, true] {
            let s =
                build_op_stream(&g, &cfg, &place(&g), ShardConfig { r: 1, c: 64 }, ieo).unwrap();
            let expected_intervals = num_intervals(700, 64);
            let mut seen_pairs = std::collections::BTreeMap::new();
            for st in &s.steps {
                if let Step::Reduce(r) = st {
                    let key = (r.layer, r.direction);
                    let intervals: &mut Vec<u64> = seen_pairs.entry(key).or_default();
                    intervals.push(r.dest_interval);
                }
            }
            for ((layer, dir), intervals) in &seen_pairs {
                let want: Vec<u64> = (0..expected_intervals).collect();
                assert_eq!(intervals, &want, "layer {layer} {dir:?}");
                assert_eq!(reduce_total(&s, *layer, *dir), total);
            }
            // Forward reduces exist for both layers; backward reduce for
            // layer 1 always, and for layer 0 only when its combination
            // runs first (the narrow gradient must be aggregated).
            assert!(seen_pairs.contains_key(&(0, Direction::Forward)));
            assert!(seen_pairs.contains_key(&(1, Direction::Forward)));
            assert!(seen_pairs.contains_key(&(1, Direction::Backward)));
            assert_eq!(
                seen_pairs.contains_key(&(0, Direction::Backward)),
                s.ieo[0],
                "layer-0 backward reduce only under interchange"
            );
        }
    }

}
