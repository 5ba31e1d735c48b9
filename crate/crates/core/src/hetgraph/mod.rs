//! Heterogeneous graph data model and relation-adjacency generation.
//!
//! A relation is a directed path over typed edges that ends at a receiving
//! node type. Its adjacency has one row per receiving node and one column per
//! sending node, and marks every (receiver, sender) pair joined by at least one
//! instance of the path.

mod adjacency;
mod io;

pub use adjacency::{normalize_adjacency, NormalizedAdjacency, RelationAdjacency};
pub use io::{export_dataset, load_dataset, EdgeTypeEntry, Manifest, NodeTypeEntry};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeTypeId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeTypeId(pub u16);

impl NodeTypeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl EdgeTypeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeType {
    pub name: String,
    pub count: usize,
    /// `count × feature_dim`.
    pub features: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeType {
    pub name: String,
    pub src: NodeTypeId,
    pub dst: NodeTypeId,
    /// `(src_local_id, dst_local_id)` pairs.
    pub edges: Vec<(u32, u32)>,
    pub undirected: bool,
}

/// Named list of relation specs, e.g. `{"name": "apa", "relations": ["ap.~ap"]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub relations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneousGraph {
    pub node_types: Vec<NodeType>,
    pub edge_types: Vec<EdgeType>,
    pub target_type: NodeTypeId,
    pub num_classes: usize,
    /// Class index per target node.
    pub labels: Vec<usize>,
    /// Split tag per target node.
    pub splits: Vec<Split>,
    /// Default relation-group registry shipped with the dataset, if any.
    pub relation_groups: Vec<GroupSpec>,
}

impl HeterogeneousGraph {
    pub fn node_type(&self, id: NodeTypeId) -> &NodeType {
        &self.node_types[id.index()]
    }

    pub fn edge_type(&self, id: EdgeTypeId) -> &EdgeType {
        &self.edge_types[id.index()]
    }

    pub fn node_type_id(&self, name: &str) -> Option<NodeTypeId> {
        self.node_types
            .iter()
            .position(|t| t.name == name)
            .map(|i| NodeTypeId(i as u16))
    }

    pub fn edge_type_id(&self, name: &str) -> Option<EdgeTypeId> {
        self.edge_types
            .iter()
            .position(|t| t.name == name)
            .map(|i| EdgeTypeId(i as u16))
    }

    pub fn node_count(&self, id: NodeTypeId) -> usize {
        self.node_type(id).count
    }

    pub fn feature_dim(&self, id: NodeTypeId) -> usize {
        self.node_type(id).features.cols()
    }

    pub fn num_targets(&self) -> usize {
        self.node_count(self.target_type)
    }

    pub fn num_edges(&self) -> usize {
        self.edge_types.iter().map(|e| e.edges.len()).sum()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_types.iter().map(|t| t.count).sum()
    }

    pub fn split_mask(&self, split: Split) -> Vec<bool> {
        self.splits.iter().map(|&s| s == split).collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Typed adjacency for one traversal step, rows = receiving side.
    pub fn step_adjacency(&self, step: RelationStep) -> RelationAdjacency {
        let et = self.edge_type(step.edge_type);
        let (recv, send) = step.endpoints(et);
        let (rows, cols) = (self.node_count(recv), self.node_count(send));
        let oriented = et.edges.iter().map(|&(s, d)| if step.reverse { (s, d) } else { (d, s) });
        let pairs: Vec<(u32, u32)> = if et.undirected && et.src == et.dst {
            oriented.flat_map(|(r, c)| [(r, c), (c, r)]).collect()
        } else {
            oriented.collect()
        };
        RelationAdjacency::from_pairs(rows, cols, pairs).expect("edge ids are validated on load")
    }
}

/// One hop along an edge type. A forward step sends messages from the edge's
/// source node to its destination node; a reverse step the other way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationStep {
    pub edge_type: EdgeTypeId,
    pub reverse: bool,
}

impl RelationStep {
    /// `(receiving type, sending type)`.
    fn endpoints(self, et: &EdgeType) -> (NodeTypeId, NodeTypeId) {
        if self.reverse {
            (et.src, et.dst)
        } else {
            (et.dst, et.src)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub steps: Vec<RelationStep>,
    pub src_type: NodeTypeId,
    pub dst_type: NodeTypeId,
}

impl Relation {
    /// Builds a relation, checking that consecutive steps chain by node type.
    pub fn new(graph: &HeterogeneousGraph, name: impl Into<String>, steps: Vec<RelationStep>) -> Result<Self> {
        let name = name.into();
        let first = steps
            .first()
            .ok_or_else(|| Error::Structure(format!("relation `{name}` has no steps")))?;
        let mut current = {
            let et = checked_edge_type(graph, first.edge_type, &name)?;
            first.endpoints(et).1
        };
        let src_type = current;
        for (j, step) in steps.iter().enumerate() {
            let et = checked_edge_type(graph, step.edge_type, &name)?;
            let (recv, send) = step.endpoints(et);
            if send != current {
                return Err(Error::Structure(format!(
                    "relation `{name}`: step {j} over `{}` starts at `{}` but the previous step ends at `{}`",
                    et.name,
                    graph.node_type(send).name,
                    graph.node_type(current).name
                )));
            }
            current = recv;
        }
        Ok(Self {
            name,
            steps,
            src_type,
            dst_type: current,
        })
    }

    /// Parses a dot-separated step list; a leading `~` marks a reverse step,
    /// so `"ab.~ab"` goes from the source of `ab` to its destination and back.
    pub fn parse(graph: &HeterogeneousGraph, spec: &str) -> Result<Self> {
        let steps = spec
            .split('.')
            .map(|tok| {
                let (reverse, name) = match tok.strip_prefix('~') {
                    Some(rest) => (true, rest),
                    None => (false, tok),
                };
                let edge_type = graph
                    .edge_type_id(name)
                    .ok_or_else(|| Error::Structure(format!("unknown edge type `{name}` in relation `{spec}`")))?;
                Ok(RelationStep { edge_type, reverse })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(graph, spec, steps)
    }
}

fn checked_edge_type<'g>(graph: &'g HeterogeneousGraph, id: EdgeTypeId, rel: &str) -> Result<&'g EdgeType> {
    graph
        .edge_types
        .get(id.index())
        .ok_or_else(|| Error::Structure(format!("relation `{rel}` uses unknown edge type {}", id.0)))
}

/// A non-empty set of relations that all end at the target node type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationGroup {
    pub name: String,
    pub relations: Vec<Relation>,
}

impl RelationGroup {
    pub fn new(graph: &HeterogeneousGraph, name: impl Into<String>, relations: Vec<Relation>) -> Result<Self> {
        let name = name.into();
        if relations.is_empty() {
            return Err(Error::Structure(format!("relation group `{name}` is empty")));
        }
        if let Some(r) = relations.iter().find(|r| r.dst_type != graph.target_type) {
            return Err(Error::Structure(format!(
                "relation `{}` in group `{name}` ends at `{}`, not the target type `{}`",
                r.name,
                graph.node_type(r.dst_type).name,
                graph.node_type(graph.target_type).name
            )));
        }
        Ok(Self { name, relations })
    }

    pub fn from_spec(graph: &HeterogeneousGraph, spec: &GroupSpec) -> Result<Self> {
        let relations = spec
            .relations
            .iter()
            .map(|r| Relation::parse(graph, r))
            .collect::<Result<Vec<_>>>()?;
        Self::new(graph, spec.name.clone(), relations)
    }
}

/// Registry used when a dataset ships no relation groups: one group per edge
/// type touching the target type, holding the one-hop relation into the
/// target and the target–other–target path (for a target–target edge type,
/// both directions).
pub fn default_relation_groups(graph: &HeterogeneousGraph) -> Vec<GroupSpec> {
    let t = graph.target_type;
    graph
        .edge_types
        .iter()
        .filter_map(|e| {
            let n = &e.name;
            let relations = match (e.src == t, e.dst == t) {
                (true, true) if e.undirected => vec![n.clone()],
                (true, true) => vec![n.clone(), format!("~{n}")],
                (true, false) => vec![format!("~{n}"), format!("{n}.~{n}")],
                (false, true) => vec![n.clone(), format!("~{n}.{n}")],
                (false, false) => return None,
            };
            Some(GroupSpec {
                name: n.clone(),
                relations,
            })
        })
        .collect()
}

/// Boolean adjacency of `relation`: entry (j, k) is set iff a path instance
/// leads from sender k to receiver j.
pub fn gen_relation_adjacency(graph: &HeterogeneousGraph, relation: &Relation) -> Result<RelationAdjacency> {
    // Re-validate: the relation may have been built against another graph.
    let checked = Relation::new(graph, relation.name.clone(), relation.steps.clone())?;
    if checked.src_type != relation.src_type || checked.dst_type != relation.dst_type {
        return Err(Error::Structure(format!(
            "relation `{}` endpoints do not match this graph",
            relation.name
        )));
    }
    let mut steps = relation.steps.iter();
    let first = steps.next().expect("validated non-empty");
    let mut acc = graph.step_adjacency(*first);
    for step in steps {
        acc = graph.step_adjacency(*step).bool_product(&acc)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    EdgeOutOfRange,
    EdgeTypeUnknownNodeType,
    FeatureShape,
    NonFiniteFeature,
    LabelCount,
    LabelOutOfRange,
    SplitCount,
    TargetType,
    NumClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

/// Checks every graph invariant, returning one diagnostic per violation.
pub fn validate_graph(graph: &HeterogeneousGraph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |kind, message: String| out.push(Diagnostic { kind, message });

    let n_types = graph.node_types.len();
    if graph.target_type.index() >= n_types {
        push(
            DiagnosticKind::TargetType,
            format!("target type index {} out of range", graph.target_type.0),
        );
        return out;
    }
    if graph.num_classes == 0 {
        push(DiagnosticKind::NumClasses, "num_classes must be at least 1".into());
    }

    for t in &graph.node_types {
        if t.features.rows() != t.count {
            push(
                DiagnosticKind::FeatureShape,
                format!("node type `{}`: {} feature rows for {} nodes", t.name, t.features.rows(), t.count),
            );
        }
        if let Some(pos) = t.features.as_slice().iter().position(|x| !x.is_finite()) {
            let cols = t.features.cols().max(1);
            push(
                DiagnosticKind::NonFiniteFeature,
                format!("node type `{}`: non-finite feature at [{}, {}]", t.name, pos / cols, pos % cols),
            );
        }
    }

    for e in &graph.edge_types {
        if e.src.index() >= n_types || e.dst.index() >= n_types {
            push(
                DiagnosticKind::EdgeTypeUnknownNodeType,
                format!("edge type `{}` references an unknown node type", e.name),
            );
            continue;
        }
        let (ns, nd) = (graph.node_count(e.src), graph.node_count(e.dst));
        if let Some((i, &(s, d))) = e
            .edges
            .iter()
            .enumerate()
            .find(|(_, &(s, d))| s as usize >= ns || d as usize >= nd)
        {
            push(
                DiagnosticKind::EdgeOutOfRange,
                format!("edge type `{}`: edge {i} ({s}, {d}) out of range ({ns}, {nd})", e.name),
            );
        }
    }

    let nt = graph.num_targets();
    if graph.labels.len() != nt {
        push(
            DiagnosticKind::LabelCount,
            format!("{} labels for {nt} target nodes", graph.labels.len()),
        );
    }
    if let Some((i, &c)) = graph.labels.iter().enumerate().find(|(_, &c)| c >= graph.num_classes) {
        push(
            DiagnosticKind::LabelOutOfRange,
            format!("target node {i} has label {c}, num_classes is {}", graph.num_classes),
        );
    }
    if graph.splits.len() != nt {
        push(
            DiagnosticKind::SplitCount,
            format!("{} split tags for {nt} target nodes", graph.splits.len()),
        );
    }
    out
}
