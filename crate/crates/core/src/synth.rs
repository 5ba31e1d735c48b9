//! Planted-partition heterogeneous graphs for testing and benchmarking.
//!
//! Three node types: targets `A` and two auxiliary types `B` and `C`. Every
//! auxiliary node has a hidden class. Each target links to `degree_b` B nodes
//! and `degree_c` C nodes; an edge picks a node of the target's own class with
//! the per-class signal probability of its edge type and a uniform node
//! otherwise. Giving the two edge types different per-class signals makes the
//! relation groups informative about different classes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hetgraph::{export_dataset, EdgeType, GroupSpec, HeterogeneousGraph, NodeType, NodeTypeId, Split};
use crate::numerics::DenseMatrix;
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_targets: usize,
    pub num_b: usize,
    pub num_c: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub degree_b: usize,
    pub degree_c: usize,
    /// Homophily probability of A–B edges, one per class or a single value
    /// for all classes.
    pub signal_b: Vec<f64>,
    pub signal_c: Vec<f64>,
    /// Standard deviation of the Gaussian feature noise.
    pub feature_noise: f64,
    /// Fraction of targets whose A–B edges ignore the class, and the same
    /// fraction (disjoint) whose A–C edges do.
    pub corrupt_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_targets: 1200,
            num_b: 300,
            num_c: 300,
            classes: 3,
            feature_dim: 16,
            degree_b: 3,
            degree_c: 3,
            signal_b: vec![0.9, 0.9, 0.0],
            signal_c: vec![0.0, 0.9, 0.9],
            feature_noise: 2.0,
            corrupt_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Default proportions scaled so the graph has about `edges` edges.
    pub fn with_edges(edges: usize, seed: u64) -> Self {
        let base = Self::default();
        let per_target = base.degree_b + base.degree_c;
        let n = (edges / per_target).max(base.classes);
        Self {
            num_targets: n,
            num_b: (n / 4).max(base.classes),
            num_c: (n / 4).max(base.classes),
            seed,
            ..base
        }
    }

    fn signal(values: &[f64], class: usize) -> f64 {
        if values.len() == 1 {
            values[0]
        } else {
            values[class]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("synthetic data needs at least 2 classes, got {}", self.classes));
        }
        if self.num_targets < self.classes || self.num_b < self.classes || self.num_c < self.classes {
            return bad("every node type needs at least one node per class".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        for (name, s) in [("signal_b", &self.signal_b), ("signal_c", &self.signal_c)] {
            if s.len() != 1 && s.len() != self.classes {
                return bad(format!("{name} needs 1 or {} values, got {}", self.classes, s.len()));
            }
            if s.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("{name} values must lie in [0, 1]"));
            }
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and non-negative".into());
        }
        if !(0.0..=0.5).contains(&self.corrupt_fraction) {
            return bad("corrupt_fraction must lie in [0, 0.5]".into());
        }
        Ok(())
    }
}

fn gaussian_features<R: Rng>(classes: &[usize], centroids: &DenseMatrix, noise: f64, rng: &mut R) -> DenseMatrix {
    DenseMatrix::from_fn(classes.len(), centroids.cols(), |r, c| {
        let z: f64 = rng.sample(StandardNormal);
        centroids[(classes[r], c)] + noise * z
    })
}

fn wire<R: Rng>(
    target_classes: &[usize],
    corrupted: &[bool],
    aux_count: usize,
    classes: usize,
    degree: usize,
    signal: &[f64],
    rng: &mut R,
) -> Vec<(u32, u32)> {
    let by_class: Vec<Vec<u32>> = (0..classes)
        .map(|c| (0..aux_count as u32).filter(|&v| v as usize % classes == c).collect())
        .collect();
    let mut edges = Vec::with_capacity(target_classes.len() * degree);
    for (a, &y) in target_classes.iter().enumerate() {
        let mut picked: Vec<u32> = Vec::with_capacity(degree);
        for _ in 0..degree {
            let p = if corrupted[a] { 0.0 } else { SynthConfig::signal(signal, y) };
            let v = if rng.random::<f64>() < p {
                by_class[y][rng.random_range(0..by_class[y].len())]
            } else {
                rng.random_range(0..aux_count as u32)
            };
            if !picked.contains(&v) {
                picked.push(v);
            }
        }
        picked.sort_unstable();
        edges.extend(picked.into_iter().map(|v| (a as u32, v)));
    }
    edges
}

/// Builds the graph. Auxiliary node `v` has class `v mod classes`; target
/// classes are balanced and shuffled.
pub fn generate(cfg: &SynthConfig) -> Result<HeterogeneousGraph> {
    cfg.validate()?;
    let stream = |k: u64| rng::substream(cfg.seed, &[tag::SYNTH, k]);

    let mut labels: Vec<usize> = (0..cfg.num_targets).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut stream(0));

    let mut r = stream(1);
    let centroids: Vec<DenseMatrix> = (0..3)
        .map(|_| DenseMatrix::from_fn(cfg.classes, cfg.feature_dim, |_, _| r.sample::<f64, _>(StandardNormal)))
        .collect();
    let aux = |n: usize| (0..n).map(|v| v % cfg.classes).collect::<Vec<_>>();
    let fa = gaussian_features(&labels, &centroids[0], cfg.feature_noise, &mut stream(2));
    let fb = gaussian_features(&aux(cfg.num_b), &centroids[1], cfg.feature_noise, &mut stream(3));
    let fc = gaussian_features(&aux(cfg.num_c), &centroids[2], cfg.feature_noise, &mut stream(4));

    let mut r = stream(8);
    let draws: Vec<f64> = (0..cfg.num_targets).map(|_| r.random()).collect();
    let q = cfg.corrupt_fraction;
    let corrupt_b: Vec<bool> = draws.iter().map(|&u| u < q).collect();
    let corrupt_c: Vec<bool> = draws.iter().map(|&u| u >= q && u < 2.0 * q).collect();
    let ab = wire(&labels, &corrupt_b, cfg.num_b, cfg.classes, cfg.degree_b, &cfg.signal_b, &mut stream(5));
    let ac = wire(&labels, &corrupt_c, cfg.num_c, cfg.classes, cfg.degree_c, &cfg.signal_c, &mut stream(6));

    let mut order: Vec<usize> = (0..cfg.num_targets).collect();
    order.shuffle(&mut stream(7));
    let n_train = cfg.num_targets * 6 / 10;
    let n_val = cfg.num_targets * 2 / 10;
    let mut splits = vec![Split::Test; cfg.num_targets];
    for (i, &t) in order.iter().enumerate() {
        if i < n_train {
            splits[t] = Split::Train;
        } else if i < n_train + n_val {
            splits[t] = Split::Val;
        }
    }

    let node = |name: &str, count: usize, features: DenseMatrix| NodeType {
        name: name.into(),
        count,
        features,
    };
    let edge = |name: &str, dst: u16, edges: Vec<(u32, u32)>| EdgeType {
        name: name.into(),
        src: NodeTypeId(0),
        dst: NodeTypeId(dst),
        edges,
        undirected: false,
    };
    Ok(HeterogeneousGraph {
        node_types: vec![
            node("A", cfg.num_targets, fa),
            node("B", cfg.num_b, fb),
            node("C", cfg.num_c, fc),
        ],
        edge_types: vec![edge("ab", 1, ab), edge("ac", 2, ac)],
        target_type: NodeTypeId(0),
        num_classes: cfg.classes,
        labels,
        splits,
        relation_groups: default_groups(),
    })
}

/// `ab`: targets reached through B (directly and via shared B nodes); `ac`:
/// the same through C.
pub fn default_groups() -> Vec<GroupSpec> {
    ["ab", "ac"]
        .iter()
        .map(|e| GroupSpec {
            name: (*e).into(),
            relations: vec![format!("~{e}"), format!("{e}.~{e}")],
        })
        .collect()
}

/// Generates and writes a dataset directory.
pub fn write(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<HeterogeneousGraph> {
    let graph = generate(cfg)?;
    export_dataset(&graph, dir)?;
    Ok(graph)
}
