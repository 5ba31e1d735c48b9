//! Batch planning and fanout-capped neighborhood expansion.
//!
//! Each epoch, the target nodes are shuffled and cut into consecutive batches
//! for every batch size. A batch grows into a [`BatchView`]: an L-hop subgraph
//! under one relation group, sampled hop by hop from the batch outward.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hetgraph::{
    gen_relation_adjacency, normalize_adjacency, HeterogeneousGraph, NodeTypeId, NormalizedAdjacency,
    RelationAdjacency, RelationGroup,
};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewKey {
    pub group: usize,
    pub batch_size: usize,
    pub batch_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FanoutConfig {
    /// Per node, per relation, per hop.
    pub max_neighbors: usize,
    pub num_hops: usize,
}

impl FanoutConfig {
    pub fn new(max_neighbors: usize, num_hops: usize) -> Result<Self> {
        if max_neighbors == 0 || num_hops == 0 {
            return Err(Error::InvalidArgument(format!(
                "fanout needs max_neighbors >= 1 and num_hops >= 1, got {max_neighbors} and {num_hops}"
            )));
        }
        Ok(Self {
            max_neighbors,
            num_hops,
        })
    }
}

/// A partition of the target nodes into batches for one batch size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch_seed: u64,
    pub batch_size: usize,
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    /// For each target id, its `(batch index, row within batch)`.
    pub fn positions(&self, num_targets: usize) -> Vec<Option<(usize, usize)>> {
        let mut pos = vec![None; num_targets];
        for (k, batch) in self.batches.iter().enumerate() {
            for (row, &t) in batch.iter().enumerate() {
                if t < num_targets {
                    pos[t] = Some((k, row));
                }
            }
        }
        pos
    }
}

/// Seeded Fisher–Yates shuffle of the targets followed by consecutive chunks of
/// size `batch_size`; the last chunk may be smaller.
pub fn plan_batches(target_ids: &[usize], batch_size: usize, epoch_seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if target_ids.is_empty() {
        return Err(Error::InvalidArgument("cannot plan batches over an empty target set".into()));
    }
    let mut order = target_ids.to_vec();
    let mut r = rng::substream(epoch_seed, &[tag::BATCH_PLAN, batch_size as u64]);
    order.shuffle(&mut r);
    Ok(BatchPlan {
        epoch_seed,
        batch_size,
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    })
}

/// A relation group together with the full-graph adjacency of each relation.
#[derive(Debug, Clone)]
pub struct GroupAdjacency {
    pub group: RelationGroup,
    pub adjacency: Vec<RelationAdjacency>,
}

impl GroupAdjacency {
    pub fn build(graph: &HeterogeneousGraph, group: RelationGroup) -> Result<Self> {
        let adjacency = group
            .relations
            .iter()
            .map(|r| gen_relation_adjacency(graph, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { group, adjacency })
    }

    pub fn num_relations(&self) -> usize {
        self.adjacency.len()
    }
}

/// Where a row of a layer's input activations comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSlot {
    /// Output row of the previous layer.
    Receiver(usize),
    /// Row of the view's input-transform table.
    Base(usize),
}

#[derive(Debug, Clone)]
pub struct ViewLayer {
    /// Sending nodes of this layer, `(type, local id)`.
    pub input_nodes: Vec<(NodeTypeId, u32)>,
    pub inputs: Vec<InputSlot>,
    /// Per relation: receivers × inputs, restricted to sampled neighbors.
    pub sampled: Vec<RelationAdjacency>,
}

impl ViewLayer {
    pub fn num_receivers(&self) -> usize {
        self.sampled.first().map_or(0, RelationAdjacency::rows)
    }
}

/// Induced subgraph for one `(group, batch size, batch index)`.
///
/// `layers[l]` maps layer-l activations of its inputs to layer-(l+1)
/// activations of its receivers. The receivers of the last layer are the batch
/// targets, in batch order; the receivers of layer l < L-1 are the inputs of
/// layer l+1 marked [`InputSlot::Receiver`].
#[derive(Debug, Clone)]
pub struct BatchView {
    pub key: ViewKey,
    pub target_ids: Vec<u32>,
    /// Distinct nodes whose input transform the view needs.
    pub base_nodes: Vec<(NodeTypeId, u32)>,
    pub layers: Vec<ViewLayer>,
}

impl BatchView {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Expands `batch` hop by hop under `group`.
///
/// At every hop each frontier node draws, per relation, up to
/// `fanout.max_neighbors` distinct neighbors from its own substream keyed by
/// `(seed, hop, node, relation)`. Target-typed senders below the top hop
/// become the next frontier; all other senders are leaves.
pub fn expand_neighborhood(
    graph: &HeterogeneousGraph,
    group: &GroupAdjacency,
    key: ViewKey,
    batch: &[usize],
    fanout: FanoutConfig,
    seed: u64,
) -> Result<BatchView> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("cannot expand an empty batch".into()));
    }
    let target = graph.target_type;
    let src_types: Vec<NodeTypeId> = group.group.relations.iter().map(|r| r.src_type).collect();

    let mut receivers: Vec<u32> = batch.iter().map(|&t| t as u32).collect();
    let mut base_nodes = Vec::new();
    let mut base_index: HashMap<(NodeTypeId, u32), usize> = HashMap::new();
    let mut layers = Vec::with_capacity(fanout.num_hops);

    for l in (0..fanout.num_hops).rev() {
        let hop = (l + 1) as u64;
        let mut input_nodes: Vec<(NodeTypeId, u32)> = Vec::new();
        let mut input_index: HashMap<(NodeTypeId, u32), u32> = HashMap::new();
        let mut rows: Vec<Vec<Vec<u32>>> = vec![Vec::with_capacity(receivers.len()); group.num_relations()];

        for &v in &receivers {
            for (j, adj) in group.adjacency.iter().enumerate() {
                let neighbors = adj.row(v as usize);
                let picked: Vec<u32> = if neighbors.len() <= fanout.max_neighbors {
                    neighbors.to_vec()
                } else {
                    let mut r = rng::substream(seed, &[hop, v as u64, j as u64]);
                    let mut idx = rand::seq::index::sample(&mut r, neighbors.len(), fanout.max_neighbors).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| neighbors[i]).collect()
                };
                let cols = picked
                    .into_iter()
                    .map(|u| {
                        let node = (src_types[j], u);
                        *input_index.entry(node).or_insert_with(|| {
                            input_nodes.push(node);
                            (input_nodes.len() - 1) as u32
                        })
                    })
                    .collect();
                rows[j].push(cols);
            }
        }

        let sampled = rows
            .into_iter()
            .map(|r| RelationAdjacency::from_rows(input_nodes.len(), r))
            .collect::<Result<Vec<_>>>()?;

        let mut next_receivers = Vec::new();
        let inputs = input_nodes
            .iter()
            .map(|&(ty, id)| {
                if l > 0 && ty == target {
                    next_receivers.push(id);
                    InputSlot::Receiver(next_receivers.len() - 1)
                } else {
                    let idx = *base_index.entry((ty, id)).or_insert_with(|| {
                        base_nodes.push((ty, id));
                        base_nodes.len() - 1
                    });
                    InputSlot::Base(idx)
                }
            })
            .collect();

        layers.push(ViewLayer {
            input_nodes,
            inputs,
            sampled,
        });
        receivers = next_receivers;
    }
    layers.reverse();

    Ok(BatchView {
        key,
        target_ids: batch.iter().map(|&t| t as u32).collect(),
        base_nodes,
        layers,
    })
}

/// Row-normalized adjacencies of a view, `[layer][relation]`. Normalization
/// runs over the sampled neighbors only.
pub fn induce_view_adjacencies(view: &BatchView) -> Vec<Vec<NormalizedAdjacency>> {
    view.layers
        .iter()
        .map(|layer| layer.sampled.iter().map(normalize_adjacency).collect())
        .collect()
}

/// All views of one epoch: one batch plan per batch size and one view per
/// `(group, batch size, batch)`.
#[derive(Debug, Clone)]
pub struct EpochViews {
    pub batch_sizes: Vec<usize>,
    pub plans: Vec<BatchPlan>,
    /// `[group][batch size index][batch index]`.
    pub views: Vec<Vec<Vec<BatchView>>>,
}

impl EpochViews {
    pub fn num_views(&self) -> usize {
        self.views.iter().flatten().map(Vec::len).sum()
    }
}

/// Seed of one view's neighbor-sampling substream.
pub fn view_seed(epoch_seed: u64, key: ViewKey) -> u64 {
    rng::derive_seed(
        epoch_seed,
        &[
            tag::NEIGHBORS,
            key.group as u64,
            key.batch_size as u64,
            key.batch_index as u64,
        ],
    )
}

/// Plans batches and expands every view. Views are built in parallel; the
/// result does not depend on scheduling.
pub fn build_epoch_views(
    graph: &HeterogeneousGraph,
    groups: &[GroupAdjacency],
    batch_sizes: &[usize],
    fanout: FanoutConfig,
    epoch_seed: u64,
) -> Result<EpochViews> {
    let targets: Vec<usize> = (0..graph.num_targets()).collect();
    let plans = batch_sizes
        .iter()
        .map(|&b| plan_batches(&targets, b, epoch_seed))
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for g in 0..groups.len() {
        for (bi, plan) in plans.iter().enumerate() {
            for k in 0..plan.num_batches() {
                jobs.push((g, bi, k));
            }
        }
    }
    let built: Vec<BatchView> = jobs
        .par_iter()
        .map(|&(g, bi, k)| {
            let key = ViewKey {
                group: g,
                batch_size: plans[bi].batch_size,
                batch_index: k,
            };
            expand_neighborhood(graph, &groups[g], key, &plans[bi].batches[k], fanout, view_seed(epoch_seed, key))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut it = built.into_iter();
    let views = (0..groups.len())
        .map(|_| {
            plans
                .iter()
                .map(|plan| it.by_ref().take(plan.num_batches()).collect())
                .collect()
        })
        .collect();
    Ok(EpochViews {
        batch_sizes: batch_sizes.to_vec(),
        plans,
        views,
    })
}
