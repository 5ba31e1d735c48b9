//! Relational aggregation over batch views and per-batch-size assembly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hetgraph::{HeterogeneousGraph, NodeTypeId, NormalizedAdjacency};
use crate::numerics::{self, DenseMatrix, DropoutMask};
use crate::rng;
use crate::sampling::{induce_view_adjacencies, BatchView, InputSlot, ViewKey};

/// Hidden-layer nonlinearity. `Identity` exists for linearity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &DenseMatrix) -> DenseMatrix {
        match self {
            Activation::Relu => numerics::relu(x),
            Activation::Identity => x.clone(),
        }
    }

    /// Reverse rule read off the activation's output; for ReLU `out > 0`
    /// exactly when the pre-activation is.
    pub fn backward(self, out: &DenseMatrix, grad_out: &DenseMatrix) -> DenseMatrix {
        match self {
            Activation::Relu => numerics::relu_backward(out, grad_out),
            Activation::Identity => grad_out.clone(),
        }
    }
}

/// Encoder weights of one relation group.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Input projection per node type, `feature_dim(τ) × d`.
    pub input: BTreeMap<NodeTypeId, DenseMatrix>,
    /// `[relation][layer]`, each `d × d`.
    pub relation: Vec<Vec<DenseMatrix>>,
}

impl EncoderParams {
    pub fn hidden_dim(&self) -> usize {
        self.input.values().next().map_or(0, DenseMatrix::cols)
    }

    pub fn num_layers(&self) -> usize {
        self.relation.first().map_or(0, Vec::len)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input: self
                .input
                .iter()
                .map(|(&k, m)| (k, DenseMatrix::zeros(m.rows(), m.cols())))
                .collect(),
            relation: self
                .relation
                .iter()
                .map(|ls| ls.iter().map(|m| DenseMatrix::zeros(m.rows(), m.cols())).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeSettings {
    pub dropout: f64,
    pub dropout_seed: u64,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct InputActivation {
    pub mask: DropoutMask,
    pub dropped: DenseMatrix,
    pub out: DenseMatrix,
}

/// `σ(Dropout(X, p) · W)`.
pub fn input_transform(
    x: &DenseMatrix,
    w: &DenseMatrix,
    p: f64,
    seed: u64,
    activation: Activation,
) -> Result<InputActivation> {
    let (dropped, mask) = numerics::apply_dropout(x, p, seed)?;
    let out = activation.apply(&numerics::matmul(&dropped, w)?);
    Ok(InputActivation { mask, dropped, out })
}

#[derive(Debug, Clone)]
pub struct LayerActivation {
    /// `Ã_j · H` per relation.
    pub aggregated: Vec<DenseMatrix>,
    pub out: DenseMatrix,
}

/// `σ(Σ_j Ã_j · H · W_j)`, summed in relation order.
pub fn relational_layer(
    adjacency: &[NormalizedAdjacency],
    h: &DenseMatrix,
    weights: &[&DenseMatrix],
    activation: Activation,
) -> Result<LayerActivation> {
    if adjacency.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "relational layer has {} weights but {} adjacencies",
            weights.len(),
            adjacency.len()
        )));
    }
    let rows = adjacency.first().map_or(0, NormalizedAdjacency::rows);
    let cols = weights.first().map_or(h.cols(), |w| w.cols());
    let mut pre = DenseMatrix::zeros(rows, cols);
    let mut aggregated = Vec::with_capacity(adjacency.len());
    for (a, w) in adjacency.iter().zip(weights) {
        let m = numerics::sparse_dense_multiply(a, h)?;
        let contribution = numerics::matmul(&m, w)?;
        if contribution.shape() != pre.shape() {
            return Err(Error::shape("relational_layer", "relations disagree on receiver count"));
        }
        pre.add_assign(&contribution);
        aggregated.push(m);
    }
    let out = activation.apply(&pre);
    Ok(LayerActivation { aggregated, out })
}

/// Saved forward state of one view.
#[derive(Debug, Clone)]
pub struct ViewCache {
    /// Input transform per node type: `(type, base indices in row order, activation)`.
    pub base: Vec<(NodeTypeId, Vec<usize>, InputActivation)>,
    /// For each base index, `(slot in base, row)`.
    pub base_loc: Vec<(usize, usize)>,
    /// Input slots per layer, as in the view.
    pub inputs: Vec<Vec<InputSlot>>,
    pub adjacency: Vec<Vec<NormalizedAdjacency>>,
    pub layers: Vec<LayerActivation>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct ViewEmbedding {
    pub key: ViewKey,
    pub target_ids: Vec<u32>,
    /// `|batch| × d`, rows in batch order.
    pub h: DenseMatrix,
    pub cache: ViewCache,
}

/// Dropout seed of the input features of `node_type` inside one view.
pub fn view_dropout_seed(seed: u64, key: ViewKey, node_type: NodeTypeId) -> u64 {
    rng::derive_seed(
        seed,
        &[
            rng::tag::DROPOUT,
            key.group as u64,
            key.batch_size as u64,
            key.batch_index as u64,
            node_type.0 as u64,
        ],
    )
}

/// Input transform followed by every relational layer of the view.
pub fn encode_view(
    graph: &HeterogeneousGraph,
    view: &BatchView,
    params: &EncoderParams,
    settings: EncodeSettings,
) -> Result<ViewEmbedding> {
    if view.num_layers() != params.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "view has {} layers, encoder has {}",
            view.num_layers(),
            params.num_layers()
        )));
    }

    let mut by_type: BTreeMap<NodeTypeId, Vec<usize>> = BTreeMap::new();
    for (i, &(ty, _)) in view.base_nodes.iter().enumerate() {
        by_type.entry(ty).or_default().push(i);
    }
    let mut base = Vec::with_capacity(by_type.len());
    let mut base_loc = vec![(0, 0); view.base_nodes.len()];
    for (slot, (ty, indices)) in by_type.into_iter().enumerate() {
        let w = params.input.get(&ty).ok_or_else(|| {
            Error::InvalidArgument(format!("no input weight for node type `{}`", graph.node_type(ty).name))
        })?;
        let ids: Vec<usize> = indices.iter().map(|&i| view.base_nodes[i].1 as usize).collect();
        let x = graph.node_type(ty).features.gather_rows(&ids);
        let act = input_transform(
            &x,
            w,
            settings.dropout,
            view_dropout_seed(settings.dropout_seed, view.key, ty),
            settings.activation,
        )?;
        for (row, &i) in indices.iter().enumerate() {
            base_loc[i] = (slot, row);
        }
        base.push((ty, indices, act));
    }

    let adjacency = induce_view_adjacencies(view);
    let d = params.hidden_dim();
    let mut layers: Vec<LayerActivation> = Vec::with_capacity(view.num_layers());
    for (l, layer) in view.layers.iter().enumerate() {
        let mut h = DenseMatrix::zeros(layer.inputs.len(), d);
        for (r, slot) in layer.inputs.iter().enumerate() {
            let src = match *slot {
                InputSlot::Base(i) => {
                    let (s, row) = base_loc[i];
                    base[s].2.out.row(row)
                }
                InputSlot::Receiver(i) => layers[l - 1].out.row(i),
            };
            h.row_mut(r).copy_from_slice(src);
        }
        let weights: Vec<&DenseMatrix> = params.relation.iter().map(|ws| &ws[l]).collect();
        let act = relational_layer(&adjacency[l], &h, &weights, settings.activation)?;
        layers.push(act);
    }

    let out = layers.last().expect("at least one layer").out.clone();
    Ok(ViewEmbedding {
        key: view.key,
        target_ids: view.target_ids.clone(),
        h: out,
        cache: ViewCache {
            base,
            base_loc,
            inputs: view.layers.iter().map(|l| l.inputs.clone()).collect(),
            adjacency,
            layers,
            activation: settings.activation,
        },
    })
}

/// Embedding of every target node for one `(group, batch size)`, rows in
/// canonical target order.
#[derive(Debug, Clone)]
pub struct AlignedViewEmbedding {
    pub group: usize,
    pub batch_size: usize,
    pub h: DenseMatrix,
}

/// Stacks the per-batch embeddings along the node dimension and restores
/// canonical target order.
pub fn assemble_views(views: &[ViewEmbedding], num_targets: usize) -> Result<AlignedViewEmbedding> {
    let first = views
        .first()
        .ok_or_else(|| Error::InvalidArgument("no views to assemble".into()))?;
    let d = first.h.cols();
    let mut h = DenseMatrix::zeros(num_targets, d);
    let mut seen = vec![false; num_targets];
    for v in views {
        for (r, &t) in v.target_ids.iter().enumerate() {
            let t = t as usize;
            if t >= num_targets || seen[t] {
                return Err(Error::InvalidArgument(format!(
                    "target {t} appears twice or is out of range while assembling"
                )));
            }
            seen[t] = true;
            h.row_mut(t).copy_from_slice(v.h.row(r));
        }
    }
    if let Some(node) = seen.iter().position(|s| !s) {
        return Err(Error::CoverageGap {
            node,
            batch_size: first.key.batch_size,
        });
    }
    Ok(AlignedViewEmbedding {
        group: first.key.group,
        batch_size: first.key.batch_size,
        h,
    })
}
