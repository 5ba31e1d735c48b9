//! Epoch time against graph size on synthetic data.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synth::{generate, SynthConfig};
use crate::training::{mean, train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub requested_edges: usize,
    pub nodes: usize,
    pub edges: usize,
    /// `|V| + |E|`.
    pub size: usize,
    pub epochs_timed: usize,
    pub mean_epoch_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    /// Least-squares slope of `ln(seconds)` on `ln(size)`.
    pub slope: f64,
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn least_squares_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("a slope needs at least two paired points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("all x values are equal".into()));
    }
    Ok(sxy / sxx)
}

/// Trains `epochs + 1` epochs per size and averages all but the first.
pub fn scaling(edge_counts: &[usize], epochs: usize, config: &TrainConfig, seed: u64) -> Result<ScalingReport> {
    if edge_counts.len() < 3 {
        return Err(Error::InvalidArgument("scaling needs at least three sizes".into()));
    }
    if epochs < 3 {
        return Err(Error::InvalidArgument("scaling needs at least three timed epochs".into()));
    }
    let mut points = Vec::new();
    for &e in edge_counts {
        let graph = generate(&SynthConfig::with_edges(e, seed))?;
        let cfg = TrainConfig {
            max_epochs: epochs + 1,
            patience: epochs + 1,
            seed,
            ..config.clone()
        };
        let run = train(&cfg, &graph)?;
        let timed = &run.epoch_seconds[1..];
        let (nodes, edges) = (graph.num_nodes(), graph.num_edges());
        points.push(ScalingPoint {
            requested_edges: e,
            nodes,
            edges,
            size: nodes + edges,
            epochs_timed: timed.len(),
            mean_epoch_seconds: mean(timed),
        });
    }
    let x: Vec<f64> = points.iter().map(|p| (p.size as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean_epoch_seconds.ln()).collect();
    Ok(ScalingReport {
        slope: least_squares_slope(&x, &y)?,
        points,
    })
}
