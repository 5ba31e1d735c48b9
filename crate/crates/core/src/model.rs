//! Full parameter set and the end-to-end forward pass.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::encoder::{assemble_views, encode_view, Activation, EncodeSettings, EncoderParams, ViewEmbedding};
use crate::error::{Error, Result};
use crate::fusion::{fusion_stage, FusionMode, StageForward};
use crate::hetgraph::{HeterogeneousGraph, NodeTypeId, RelationGroup};
use crate::numerics::DenseMatrix;
use crate::objective::{diversity_matrix, mlp_predict, DiversityMatrix, MlpForward, MlpParams};
use crate::rng;
use crate::sampling::EpochViews;

/// Shapes of every parameter, derived from the graph, the groups and the
/// architecture sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub hidden: usize,
    pub attention_dim: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub num_batch_sizes: usize,
    /// Per group: input feature dimension per sending node type.
    pub input_types: Vec<BTreeMap<NodeTypeId, usize>>,
    pub num_relations: Vec<usize>,
}

impl ModelShape {
    pub fn new(
        graph: &HeterogeneousGraph,
        groups: &[RelationGroup],
        hidden: usize,
        attention_dim: usize,
        layers: usize,
        num_batch_sizes: usize,
    ) -> Result<Self> {
        if groups.is_empty() || num_batch_sizes == 0 || hidden == 0 || attention_dim == 0 || layers == 0 {
            return Err(Error::Config(
                "need at least one group, one batch size and positive hidden, attention and layer sizes".into(),
            ));
        }
        let input_types = groups
            .iter()
            .map(|g| {
                g.relations
                    .iter()
                    .map(|r| (r.src_type, graph.feature_dim(r.src_type)))
                    .collect()
            })
            .collect();
        Ok(Self {
            hidden,
            attention_dim,
            layers,
            num_classes: graph.num_classes,
            num_batch_sizes,
            input_types,
            num_relations: groups.iter().map(|g| g.relations.len()).collect(),
        })
    }

    pub fn num_groups(&self) -> usize {
        self.num_relations.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Per group.
    pub encoders: Vec<EncoderParams>,
    /// `[group][batch size]`, each `d × d′`.
    pub stage1_proj: Vec<Vec<DenseMatrix>>,
    /// Per group, `(m·d′) × m`.
    pub stage1_score: Vec<DenseMatrix>,
    /// Per group, `d × d′`.
    pub stage2_proj: Vec<DenseMatrix>,
    /// `(c·d′) × c`, shared by all groups.
    pub stage2_score: DenseMatrix,
    pub mlp: MlpParams,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases. Each matrix draws from its own
    /// substream, keyed by its position in [`ModelParams::named`].
    pub fn init(shape: &ModelShape, seed: u64) -> Self {
        let (d, a, m, c) = (shape.hidden, shape.attention_dim, shape.num_batch_sizes, shape.num_groups());
        let mut params = Self {
            encoders: shape
                .input_types
                .iter()
                .zip(&shape.num_relations)
                .map(|(types, &r)| EncoderParams {
                    input: types.iter().map(|(&t, &f)| (t, DenseMatrix::zeros(f, d))).collect(),
                    relation: vec![vec![DenseMatrix::zeros(d, d); shape.layers]; r],
                })
                .collect(),
            stage1_proj: vec![vec![DenseMatrix::zeros(d, a); m]; c],
            stage1_score: vec![DenseMatrix::zeros(m * a, m); c],
            stage2_proj: vec![DenseMatrix::zeros(d, a); c],
            stage2_score: DenseMatrix::zeros(c * a, c),
            mlp: MlpParams::zeros(d, shape.num_classes),
        };
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (i, (name, w)) in names.iter().zip(params.tensors_mut()).enumerate() {
            if name.starts_with("mlp.b") {
                continue;
            }
            let mut r = rng::substream(seed, &[rng::tag::INIT, i as u64]);
            *w = DenseMatrix::glorot(w.rows(), w.cols(), &mut r);
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Every parameter matrix with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out = Vec::new();
        for (g, enc) in self.encoders.iter().enumerate() {
            for (t, w) in &enc.input {
                out.push((format!("encoder.{g}.input.{}", t.0), w));
            }
            for (j, layers) in enc.relation.iter().enumerate() {
                for (l, w) in layers.iter().enumerate() {
                    out.push((format!("encoder.{g}.relation.{j}.layer.{l}"), w));
                }
            }
        }
        for (g, ps) in self.stage1_proj.iter().enumerate() {
            for (b, p) in ps.iter().enumerate() {
                out.push((format!("stage1.{g}.proj.{b}"), p));
            }
            out.push((format!("stage1.{g}.score"), &self.stage1_score[g]));
        }
        for (g, p) in self.stage2_proj.iter().enumerate() {
            out.push((format!("stage2.{g}.proj"), p));
        }
        out.push(("stage2.score".into(), &self.stage2_score));
        out.push(("mlp.w1".into(), &self.mlp.w1));
        out.push(("mlp.b1".into(), &self.mlp.b1));
        out.push(("mlp.w2".into(), &self.mlp.w2));
        out.push(("mlp.b2".into(), &self.mlp.b2));
        out
    }

    /// Mutable access in the order of [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = Vec::new();
        for enc in &mut self.encoders {
            out.extend(enc.input.values_mut());
            out.extend(enc.relation.iter_mut().flatten());
        }
        for (ps, s) in self.stage1_proj.iter_mut().zip(&mut self.stage1_score) {
            out.extend(ps.iter_mut());
            out.push(s);
        }
        out.extend(self.stage2_proj.iter_mut());
        out.push(&mut self.stage2_score);
        out.push(&mut self.mlp.w1);
        out.push(&mut self.mlp.b1);
        out.push(&mut self.mlp.w2);
        out.push(&mut self.mlp.b2);
        out
    }

    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardSettings {
    pub dropout: f64,
    pub dropout_seed: u64,
    pub fusion: FusionMode,
    pub activation: Activation,
}

impl ForwardSettings {
    /// Dropout off, ReLU.
    pub fn eval(fusion: FusionMode) -> Self {
        Self {
            dropout: 0.0,
            dropout_seed: 0,
            fusion,
            activation: Activation::Relu,
        }
    }
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub settings: ForwardSettings,
    /// `[group][batch size][batch]`.
    pub views: Vec<Vec<Vec<ViewEmbedding>>>,
    /// `[group][batch size]`, `n_t × d` in canonical target order.
    pub aligned: Vec<Vec<DenseMatrix>>,
    pub stage1: Vec<StageForward>,
    pub stage2: StageForward,
    /// Input of the prediction head.
    pub final_embedding: DenseMatrix,
    pub mlp: MlpForward,
    pub diversity: DiversityMatrix,
}

impl ForwardTape {
    pub fn logits(&self) -> &DenseMatrix {
        &self.mlp.logits
    }

    /// Aligned embeddings in group-major, batch-size-minor order.
    pub fn view_embeddings(&self) -> Vec<&DenseMatrix> {
        self.aligned.iter().flatten().collect()
    }
}

/// Encodes every view, assembles, fuses over batch sizes then groups, and
/// predicts.
pub fn forward(
    graph: &HeterogeneousGraph,
    views: &EpochViews,
    params: &ModelParams,
    settings: ForwardSettings,
) -> Result<ForwardTape> {
    let c = params.encoders.len();
    let m = views.batch_sizes.len();
    if views.views.len() != c || params.stage1_proj.iter().any(|p| p.len() != m) {
        return Err(Error::InvalidArgument(format!(
            "views cover {} groups and {m} batch sizes, parameters expect {c} groups and {} batch sizes",
            views.views.len(),
            params.stage1_proj.first().map_or(0, Vec::len)
        )));
    }

    let jobs: Vec<(usize, usize, usize)> = (0..c)
        .flat_map(|g| (0..m).flat_map(move |b| (0..views.plans[b].num_batches()).map(move |k| (g, b, k))))
        .collect();
    let enc = EncodeSettings {
        dropout: settings.dropout,
        dropout_seed: settings.dropout_seed,
        activation: settings.activation,
    };
    let encoded: Vec<ViewEmbedding> = jobs
        .par_iter()
        .map(|&(g, b, k)| encode_view(graph, &views.views[g][b][k], &params.encoders[g], enc))
        .collect::<Result<Vec<_>>>()?;

    let mut it = encoded.into_iter();
    let tape_views: Vec<Vec<Vec<ViewEmbedding>>> = (0..c)
        .map(|_| (0..m).map(|b| it.by_ref().take(views.plans[b].num_batches()).collect()).collect())
        .collect();

    let n = graph.num_targets();
    let aligned = tape_views
        .iter()
        .map(|per_b| {
            per_b
                .iter()
                .map(|vs| assemble_views(vs, n).map(|a| a.h))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let stage1 = (0..c)
        .map(|g| {
            fusion_stage(
                &aligned[g].iter().collect::<Vec<_>>(),
                &params.stage1_proj[g].iter().collect::<Vec<_>>(),
                &params.stage1_score[g],
                settings.fusion,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let stage2 = fusion_stage(
        &stage1.iter().map(|s| &s.fused).collect::<Vec<_>>(),
        &params.stage2_proj.iter().collect::<Vec<_>>(),
        &params.stage2_score,
        settings.fusion,
    )?;
    let final_embedding = stage2.fused.clone();
    let mlp = mlp_predict(&final_embedding, &params.mlp)?;
    let diversity = diversity_matrix(&aligned.iter().flatten().collect::<Vec<_>>())?;

    Ok(ForwardTape {
        settings,
        views: tape_views,
        aligned,
        stage1,
        stage2,
        final_embedding,
        mlp,
        diversity,
    })
}
