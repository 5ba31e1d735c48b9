#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use hgens::hetgraph::{EdgeType, EdgeTypeId, HeterogeneousGraph, NodeType, NodeTypeId, Relation, RelationStep, Split};
use hgens::numerics::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// At most 12 nodes over 1 to 3 node types, a few random edge types
/// (possibly same-type and undirected).
pub fn random_typed_graph(seed: u64) -> HeterogeneousGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_types = rng.random_range(1..=3usize);
    let mut counts = vec![1usize; n_types];
    let budget = rng.random_range(n_types..=12);
    for _ in n_types..budget {
        counts[rng.random_range(0..n_types)] += 1;
    }
    let node_types = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| NodeType {
            name: format!("t{i}"),
            count: c,
            features: DenseMatrix::zeros(c, 1),
        })
        .collect();
    let n_edge_types = rng.random_range(1..=4usize);
    let edge_types = (0..n_edge_types)
        .map(|e| {
            let src = rng.random_range(0..n_types);
            let dst = rng.random_range(0..n_types);
            let density: f64 = rng.random_range(0.0..0.6);
            let mut edges = Vec::new();
            for s in 0..counts[src] as u32 {
                for d in 0..counts[dst] as u32 {
                    if rng.random::<f64>() < density {
                        edges.push((s, d));
                    }
                }
            }
            EdgeType {
                name: format!("e{e}"),
                src: NodeTypeId(src as u16),
                dst: NodeTypeId(dst as u16),
                edges,
                undirected: src == dst && rng.random::<bool>(),
            }
        })
        .collect();
    let n0 = counts[0];
    HeterogeneousGraph {
        node_types,
        edge_types,
        target_type: NodeTypeId(0),
        num_classes: 1,
        labels: vec![0; n0],
        splits: vec![Split::Train; n0],
        relation_groups: Vec::new(),
    }
}

/// Every type-compatible relation of one or two steps.
pub fn all_relations(g: &HeterogeneousGraph, max_len: usize) -> Vec<Relation> {
    let steps: Vec<RelationStep> = (0..g.edge_types.len())
        .flat_map(|e| {
            [false, true].map(|reverse| RelationStep {
                edge_type: EdgeTypeId(e as u16),
                reverse,
            })
        })
        .collect();
    let mut out = Vec::new();
    let mut paths: Vec<Vec<RelationStep>> = steps.iter().map(|&s| vec![s]).collect();
    for len in 1..=max_len {
        let mut next = Vec::new();
        for p in &paths {
            if let Ok(r) = Relation::new(g, format!("r{}", out.len()), p.clone()) {
                out.push(r);
                if len < max_len {
                    for &s in &steps {
                        let mut q = p.clone();
                        q.push(s);
                        next.push(q);
                    }
                }
            }
        }
        paths = next;
    }
    out
}

/// `(receiver, sender)` pairs joined by at least one instance of `r`, found by
/// walking every node sequence of the right types.
pub fn enumerate_paths(g: &HeterogeneousGraph, r: &Relation) -> BTreeSet<(usize, usize)> {
    let hop_sets: Vec<HashSet<(u32, u32)>> = r
        .steps
        .iter()
        .map(|st| {
            let et = &g.edge_types[st.edge_type.0 as usize];
            let mut set = HashSet::new();
            for &(s, d) in &et.edges {
                // (from, to) in message direction.
                let (from, to) = if st.reverse { (d, s) } else { (s, d) };
                set.insert((from, to));
                if et.undirected {
                    set.insert((to, from));
                }
            }
            set
        })
        .collect();
    let type_of_step_end = |i: usize| {
        let st = r.steps[i];
        let et = &g.edge_types[st.edge_type.0 as usize];
        if st.reverse {
            et.src
        } else {
            et.dst
        }
    };
    let mut out = BTreeSet::new();
    let start_count = g.node_types[r.src_type.0 as usize].count as u32;
    for k in 0..start_count {
        let mut frontier = vec![k];
        for (i, hops) in hop_sets.iter().enumerate() {
            let count = g.node_types[type_of_step_end(i).0 as usize].count as u32;
            let mut next = Vec::new();
            for &x in &frontier {
                for y in 0..count {
                    if hops.contains(&(x, y)) {
                        next.push(y);
                    }
                }
            }
            frontier = next;
        }
        for j in frontier {
            out.insert((j as usize, k as usize));
        }
    }
    out
}
