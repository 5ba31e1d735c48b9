//! Reverse pass over a recorded forward pass, a finite-difference check of it,
//! and the single-node gradient-flow analyzer.

mod check;
mod flow;

pub use check::{finite_diff_check, tiny_problem, FiniteDiffConfig, FiniteDiffReport, ParamCheck, TinyProblem};
pub use flow::{
    flow_report, intermediate_gradient, spectral_norm, vanishing_scenario, FlowInputs, GradFlowReport, SourceFlow,
};

use rayon::prelude::*;

use crate::encoder::{EncoderParams, ViewEmbedding};
use crate::sampling::InputSlot;
use crate::error::{Error, Result};
use crate::fusion::fusion_stage_backward;
use crate::hetgraph::HeterogeneousGraph;
use crate::model::{ForwardTape, ModelParams};
use crate::numerics::{self, DenseMatrix};
use crate::objective::{cross_entropy, diversity_backward, diversity_penalty, mlp_backward, LossBreakdown};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub exclude_diagonal: bool,
}

/// Loss of a recorded forward pass.
pub fn loss(graph: &HeterogeneousGraph, tape: &ForwardTape, train_mask: &[bool], ls: LossSettings) -> Result<LossBreakdown> {
    let (ce, _) = cross_entropy(tape.logits(), &graph.labels, train_mask)?;
    Ok(LossBreakdown::new(ce, diversity_penalty(&tape.diversity.s, ls.exclude_diagonal), ls.lambda))
}

/// Gradient of one view's encoder given the gradient of its output rows.
pub fn view_backward(view: &ViewEmbedding, params: &EncoderParams, grad_out: &DenseMatrix) -> Result<EncoderParams> {
    let cache = &view.cache;
    let act = cache.activation;
    let mut grads = params.zeros_like();
    let mut d_base: Vec<DenseMatrix> = cache
        .base
        .iter()
        .map(|(_, _, a)| DenseMatrix::zeros(a.out.rows(), a.out.cols()))
        .collect();

    let mut d_out = grad_out.clone();
    for l in (0..cache.layers.len()).rev() {
        let layer = &cache.layers[l];
        let d_pre = act.backward(&layer.out, &d_out);
        let mut d_in = DenseMatrix::zeros(cache.inputs[l].len(), params.hidden_dim());
        for (j, (adj, agg)) in cache.adjacency[l].iter().zip(&layer.aggregated).enumerate() {
            let w = &params.relation[j][l];
            grads.relation[j][l].add_assign(&numerics::matmul_tn(agg, &d_pre)?);
            let d_agg = numerics::matmul_nt(&d_pre, w)?;
            d_in.add_assign(&numerics::sparse_dense_backward(adj, &d_agg)?);
        }
        let mut d_prev = if l > 0 {
            let prev = &cache.layers[l - 1].out;
            DenseMatrix::zeros(prev.rows(), prev.cols())
        } else {
            DenseMatrix::zeros(0, 0)
        };
        for (r, slot) in cache.inputs[l].iter().enumerate() {
            let target = match *slot {
                InputSlot::Receiver(i) => d_prev.row_mut(i),
                InputSlot::Base(i) => {
                    let (s, row) = cache.base_loc[i];
                    d_base[s].row_mut(row)
                }
            };
            for (t, g) in target.iter_mut().zip(d_in.row(r)) {
                *t += g;
            }
        }
        d_out = d_prev;
    }

    for ((ty, _, a), d) in cache.base.iter().zip(&d_base) {
        let d_pre = act.backward(&a.out, d);
        let g = grads
            .input
            .get_mut(ty)
            .ok_or_else(|| Error::InvalidArgument("tape references a node type the encoder lacks".into()))?;
        g.add_assign(&numerics::matmul_tn(&a.dropped, &d_pre)?);
    }
    Ok(grads)
}

fn add_encoder(acc: &mut EncoderParams, g: &EncoderParams) {
    for (k, m) in acc.input.iter_mut() {
        m.add_assign(&g.input[k]);
    }
    for (a, b) in acc.relation.iter_mut().flatten().zip(g.relation.iter().flatten()) {
        a.add_assign(b);
    }
}

/// Loss and its gradient with respect to every parameter.
///
/// The fused-embedding gradient flows through both the fusion weights and
/// the fused sources of each stage. View gradients are computed in parallel
/// and summed in `(group, batch size, batch)` order.
pub fn backward(
    graph: &HeterogeneousGraph,
    params: &ModelParams,
    tape: &ForwardTape,
    train_mask: &[bool],
    ls: LossSettings,
) -> Result<(LossBreakdown, ModelParams)> {
    if tape.views.len() != params.encoders.len() || tape.stage1.len() != params.encoders.len() {
        return Err(Error::InvalidArgument(
            "forward tape and parameters disagree on the number of groups".into(),
        ));
    }
    let (ce, d_logits) = cross_entropy(tape.logits(), &graph.labels, train_mask)?;
    let breakdown = LossBreakdown::new(ce, diversity_penalty(&tape.diversity.s, ls.exclude_diagonal), ls.lambda);
    let mut grads = params.zeros_like();

    let (mlp_g, d_final) = mlp_backward(&tape.final_embedding, &params.mlp, &tape.mlp, &d_logits)?;
    grads.mlp = mlp_g;

    let group_out: Vec<&DenseMatrix> = tape.stage1.iter().map(|s| &s.fused).collect();
    let s2 = fusion_stage_backward(
        &tape.stage2,
        &group_out,
        &params.stage2_proj.iter().collect::<Vec<_>>(),
        &params.stage2_score,
        &d_final,
    )?;
    if let Some(s) = s2.score {
        grads.stage2_score = s;
        grads.stage2_proj = s2.projections;
    }

    let n = graph.num_targets();
    let mut d_div = if ls.lambda != 0.0 {
        diversity_backward(&tape.diversity, n, ls.lambda, ls.exclude_diagonal)?
    } else {
        Vec::new()
    }
    .into_iter();

    let mut d_aligned: Vec<Vec<DenseMatrix>> = Vec::with_capacity(tape.aligned.len());
    for (g, stage) in tape.stage1.iter().enumerate() {
        let s1 = fusion_stage_backward(
            stage,
            &tape.aligned[g].iter().collect::<Vec<_>>(),
            &params.stage1_proj[g].iter().collect::<Vec<_>>(),
            &params.stage1_score[g],
            &s2.sources[g],
        )?;
        if let Some(s) = s1.score {
            grads.stage1_score[g] = s;
            grads.stage1_proj[g] = s1.projections;
        }
        let mut per_b = s1.sources;
        for d in per_b.iter_mut() {
            if let Some(extra) = d_div.next() {
                d.add_assign(&extra);
            }
        }
        d_aligned.push(per_b);
    }

    let jobs: Vec<(usize, usize, usize)> = tape
        .views
        .iter()
        .enumerate()
        .flat_map(|(g, per_b)| {
            per_b
                .iter()
                .enumerate()
                .flat_map(move |(b, vs)| (0..vs.len()).map(move |k| (g, b, k)))
        })
        .collect();
    let view_grads: Vec<EncoderParams> = jobs
        .par_iter()
        .map(|&(g, b, k)| {
            let view = &tape.views[g][b][k];
            let rows: Vec<usize> = view.target_ids.iter().map(|&t| t as usize).collect();
            let d_out = d_aligned[g][b].gather_rows(&rows);
            view_backward(view, &params.encoders[g], &d_out)
        })
        .collect::<Result<Vec<_>>>()?;
    for (&(g, _, _), vg) in jobs.iter().zip(&view_grads) {
        add_encoder(&mut grads.encoders[g], vg);
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Activation;
    use crate::fusion::FusionMode;
    use crate::hetgraph::{gen_relation_adjacency, normalize_adjacency, NodeTypeId, RelationGroup};
    use crate::model::{forward, ForwardSettings, ModelShape};
    use crate::objective::mlp_predict;
    use crate::sampling::{build_epoch_views, FanoutConfig, GroupAdjacency};

    #[test]
    fn tiny_model_matches_finite_differences() {
        let p = tiny_problem(7).unwrap();
        let r = finite_diff_check(&p, FiniteDiffConfig::default()).unwrap();
        assert!(r.passed, "max relative error {:e}", r.max_rel_err);
        assert_eq!(r.params.iter().map(|c| c.count).sum::<usize>(), r.num_scalars);
    }

    #[test]
    fn coarse_step_is_less_accurate() {
        let p = tiny_problem(7).unwrap();
        let fine = finite_diff_check(&p, FiniteDiffConfig::default()).unwrap();
        let coarse = finite_diff_check(
            &p,
            FiniteDiffConfig {
                eps: 1e-2,
                ..FiniteDiffConfig::default()
            },
        )
        .unwrap();
        assert!(coarse.max_rel_err > fine.max_rel_err);
    }

    #[test]
    fn fresh_dropout_masks_break_the_check() {
        let p = tiny_problem(7).unwrap();
        let r = finite_diff_check(
            &p,
            FiniteDiffConfig {
                freeze_dropout: false,
                ..FiniteDiffConfig::default()
            },
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn constant_attention_column_is_reported() {
        let mut p = tiny_problem(7).unwrap();
        p.params.stage2_score.fill(0.0);
        assert!(matches!(
            finite_diff_check(&p, FiniteDiffConfig::default()),
            Err(Error::DegenerateAttention(_))
        ));
    }

    #[test]
    fn relation_without_edges_gets_zero_gradient() {
        let mut p = tiny_problem(3).unwrap();
        p.graph.edge_types[1].edges.clear();
        let groups: Vec<GroupAdjacency> = p
            .graph
            .relation_groups
            .iter()
            .map(|s| GroupAdjacency::build(&p.graph, RelationGroup::from_spec(&p.graph, s).unwrap()).unwrap())
            .collect();
        let views = build_epoch_views(&p.graph, &groups, &[12, 36], FanoutConfig::new(4, 2).unwrap(), 3).unwrap();
        let tape = forward(&p.graph, &views, &p.params, p.settings).unwrap();
        let (_, g) = backward(&p.graph, &p.params, &tape, &p.train_mask, p.loss).unwrap();
        for w in g.encoders[1].relation.iter().flatten() {
            assert!(w.as_slice().iter().all(|&x| x == 0.0));
        }
        assert!(g.encoders[0].relation[0][0].max_abs() > 0.0);
    }

    #[test]
    fn gradients_do_not_depend_on_thread_count() {
        let p = tiny_problem(5).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let tape = forward(&p.graph, &p.views, &p.params, p.settings).unwrap();
                    backward(&p.graph, &p.params, &tape, &p.train_mask, p.loss).unwrap().1
                })
        };
        assert_eq!(run(1), run(4));
    }

    /// Single group and batch size, whole target set in one batch, no
    /// dropout, zero score weights: the attention stages reduce to the
    /// identity and the model is a plain relational GNN with an MLP head.
    /// The oracle is a dense full-graph forward differentiated numerically.
    #[test]
    fn reduced_model_matches_dense_oracle() {
        let p = tiny_problem(11).unwrap();
        let g = &p.graph;
        let spec = &g.relation_groups[0];
        let group = RelationGroup::from_spec(g, spec).unwrap();
        let shape = ModelShape::new(g, std::slice::from_ref(&group), 6, 3, 2, 1).unwrap();
        let mut params = ModelParams::init(&shape, 4);
        params.stage1_score[0].fill(0.0);
        params.stage2_score.fill(0.0);
        let ga = GroupAdjacency::build(g, group.clone()).unwrap();
        let n = g.num_targets();
        let views = build_epoch_views(g, &[ga], &[n], FanoutConfig::new(1000, 2).unwrap(), 9).unwrap();
        let settings = ForwardSettings {
            dropout: 0.0,
            dropout_seed: 0,
            fusion: FusionMode::MinMax,
            activation: Activation::Relu,
        };
        let ls = LossSettings {
            lambda: 0.0,
            exclude_diagonal: false,
        };
        let tape = forward(g, &views, &params, settings).unwrap();
        let (lb, grads) = backward(g, &params, &tape, &p.train_mask, ls).unwrap();

        let adj: Vec<Vec<Vec<f64>>> = group
            .relations
            .iter()
            .map(|r| normalize_adjacency(&gen_relation_adjacency(g, r).unwrap()).to_dense())
            .collect();
        let oracle = |pp: &ModelParams| -> f64 {
            let enc = &pp.encoders[0];
            let h0 = |t: NodeTypeId| {
                crate::numerics::relu(&crate::numerics::matmul(&g.node_type(t).features, &enc.input[&t]).unwrap())
            };
            let base: Vec<DenseMatrix> = group.relations.iter().map(|r| h0(r.src_type)).collect();
            let mut h_target = h0(g.target_type);
            for l in 0..2 {
                let mut pre = DenseMatrix::zeros(n, 6);
                for (j, r) in group.relations.iter().enumerate() {
                    let src = if r.src_type == g.target_type { &h_target } else { &base[j] };
                    let agg = DenseMatrix::from_fn(n, 6, |i, c| {
                        (0..src.rows()).map(|k| adj[j][i][k] * src[(k, c)]).sum()
                    });
                    pre.add_assign(&crate::numerics::matmul(&agg, &enc.relation[j][l]).unwrap());
                }
                h_target = crate::numerics::relu(&pre);
            }
            let logits = mlp_predict(&h_target, &pp.mlp).unwrap().logits;
            cross_entropy(&logits, &g.labels, &p.train_mask).unwrap().0
        };
        assert!((oracle(&params) - lb.total).abs() < 1e-12);

        let eps = 1e-6;
        let mut work = params.clone();
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            if !name.starts_with("encoder") && !name.starts_with("mlp") {
                continue;
            }
            for i in 0..grads.tensors()[ti].as_slice().len() {
                let orig = work.tensors()[ti].as_slice()[i];
                work.tensors_mut()[ti].as_mut_slice()[i] = orig + eps;
                let up = oracle(&work);
                work.tensors_mut()[ti].as_mut_slice()[i] = orig - eps;
                let down = oracle(&work);
                work.tensors_mut()[ti].as_mut_slice()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.tensors()[ti].as_slice()[i];
                assert!((analytic - numeric).abs() < 1e-7, "{name}[{i}]: {analytic} vs {numeric}");
            }
        }
    }
}
