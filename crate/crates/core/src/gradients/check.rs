use std::time::Instant;

use serde::Serialize;

use super::{backward, loss, LossSettings};
use crate::encoder::Activation;
use crate::error::{Error, Result};
use crate::fusion::{AttentionTensors, FusionMode};
use crate::hetgraph::{HeterogeneousGraph, RelationGroup, Split};
use crate::model::{forward, ForwardSettings, ForwardTape, ModelParams, ModelShape};
use crate::sampling::{build_epoch_views, EpochViews, FanoutConfig, GroupAdjacency};
use crate::synth::{generate, SynthConfig};

/// A small model and dataset whose sampled views are fixed.
#[derive(Debug, Clone)]
pub struct TinyProblem {
    pub graph: HeterogeneousGraph,
    pub views: EpochViews,
    pub params: ModelParams,
    pub settings: ForwardSettings,
    pub loss: LossSettings,
    pub train_mask: Vec<bool>,
}

/// 36 targets, two relation groups, batch sizes 12 and 36, d = 8, d′ = 4,
/// two layers, fanout 4, dropout 0.2.
pub fn tiny_problem(seed: u64) -> Result<TinyProblem> {
    let graph = generate(&SynthConfig {
        num_targets: 36,
        num_b: 12,
        num_c: 12,
        feature_dim: 5,
        feature_noise: 1.0,
        seed,
        ..SynthConfig::default()
    })?;
    let groups = graph
        .relation_groups
        .iter()
        .map(|s| RelationGroup::from_spec(&graph, s))
        .collect::<Result<Vec<_>>>()?;
    let shape = ModelShape::new(&graph, &groups, 8, 4, 2, 2)?;
    let adjacency = groups
        .into_iter()
        .map(|g| GroupAdjacency::build(&graph, g))
        .collect::<Result<Vec<_>>>()?;
    let views = build_epoch_views(&graph, &adjacency, &[12, 36], FanoutConfig::new(4, 2)?, seed)?;
    let mut params = ModelParams::init(&shape, seed);
    // Nonzero biases so the bias gradients are exercised away from zero.
    params.mlp.b1.as_mut_slice().iter_mut().enumerate().for_each(|(i, b)| *b = 0.05 * (i as f64 - 3.5));
    Ok(TinyProblem {
        train_mask: graph.split_mask(Split::Train),
        graph,
        views,
        params,
        settings: ForwardSettings {
            dropout: 0.2,
            dropout_seed: seed ^ 0x5eed,
            fusion: FusionMode::MinMax,
            activation: Activation::Relu,
        },
        loss: LossSettings {
            lambda: 0.05,
            exclude_diagonal: false,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiniteDiffConfig {
    pub eps: f64,
    pub tol: f64,
    /// Reuse the same dropout masks for every loss evaluation. Turning this
    /// off draws fresh masks per evaluation, which breaks the check.
    pub freeze_dropout: bool,
}

impl Default for FiniteDiffConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            freeze_dropout: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub count: usize,
    pub max_rel_err: f64,
    /// Flat row-major index of the worst entry.
    pub argmax: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteDiffReport {
    pub eps: f64,
    pub tol: f64,
    pub freeze_dropout: bool,
    pub num_scalars: usize,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
    pub seconds: f64,
}

/// Smallest gap between any two distinct values of a column, relative to its
/// spread.
fn min_relative_gap(t: &AttentionTensors, c: usize) -> f64 {
    let mut col = t.raw.column(c);
    col.sort_by(f64::total_cmp);
    let gap = col.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    gap / t.spread[c]
}

/// Fails when a min-max column is constant or its extremes are nearly tied,
/// since finite differences are then not comparable with the subgradient.
fn check_generic(tape: &ForwardTape) -> Result<()> {
    let stages = tape.stage1.iter().chain(std::iter::once(&tape.stage2));
    for (s, stage) in stages.enumerate() {
        let Some(t) = &stage.minmax else { continue };
        for c in 0..t.degenerate.len() {
            if t.degenerate[c] {
                return Err(Error::DegenerateAttention(format!(
                    "attention column {c} of stage {s} is constant; reseed the check"
                )));
            }
            if min_relative_gap(t, c) < 1e-6 {
                return Err(Error::DegenerateAttention(format!(
                    "attention column {c} of stage {s} has near-tied scores; reseed the check"
                )));
            }
        }
    }
    Ok(())
}

/// Compares the analytic gradient of every parameter with central differences
/// `(L(w + eps) − L(w − eps)) / 2eps`, using relative error
/// `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn finite_diff_check(problem: &TinyProblem, cfg: FiniteDiffConfig) -> Result<FiniteDiffReport> {
    let start = Instant::now();
    let TinyProblem {
        graph,
        views,
        params,
        settings,
        loss: ls,
        train_mask,
    } = problem;
    let tape = forward(graph, views, params, *settings)?;
    check_generic(&tape)?;
    let (base, grads) = backward(graph, params, &tape, train_mask, *ls)?;

    let mut evals = 0u64;
    let mut eval = |p: &ModelParams| -> Result<f64> {
        let mut s = *settings;
        if !cfg.freeze_dropout {
            evals += 1;
            s.dropout_seed = settings.dropout_seed.wrapping_add(evals);
        }
        let t = forward(graph, views, p, s)?;
        Ok(loss(graph, &t, train_mask, *ls)?.total)
    };

    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.as_slice().to_vec()).collect();
    let mut work = params.clone();
    let mut checks = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let mut worst = ParamCheck {
            name: name.clone(),
            count: len,
            max_rel_err: 0.0,
            argmax: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..len {
            let orig = work.tensors()[ti].as_slice()[i];
            work.tensors_mut()[ti].as_mut_slice()[i] = orig + cfg.eps;
            let up = eval(&work)?;
            work.tensors_mut()[ti].as_mut_slice()[i] = orig - cfg.eps;
            let down = eval(&work)?;
            work.tensors_mut()[ti].as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = analytic[ti][i];
            let err = (a - numeric).abs() / numeric.abs().max(1e-8);
            if err > worst.max_rel_err || i == 0 {
                worst.max_rel_err = err;
                worst.argmax = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        checks.push(worst);
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(FiniteDiffReport {
        eps: cfg.eps,
        tol: cfg.tol,
        freeze_dropout: cfg.freeze_dropout,
        num_scalars: params.num_scalars(),
        loss: base.total,
        params: checks,
        max_rel_err,
        passed: max_rel_err < cfg.tol,
        seconds: start.elapsed().as_secs_f64(),
    })
}
