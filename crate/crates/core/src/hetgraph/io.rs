//! Dataset directory reader and writer.
//!
//! Layout: `manifest.json` plus one CSV feature file per node type, one TSV
//! edge file per edge type, and TSV label and split files for the target type.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{validate_graph, EdgeType, GroupSpec, HeterogeneousGraph, NodeType, NodeTypeId, Split};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTypeEntry {
    pub name: String,
    pub count: usize,
    pub feature_dim: usize,
    pub feature_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTypeEntry {
    pub name: String,
    pub src_type: String,
    pub dst_type: String,
    pub edge_file: String,
    #[serde(default)]
    pub undirected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub node_types: Vec<NodeTypeEntry>,
    pub edge_types: Vec<EdgeTypeEntry>,
    pub target_type: String,
    pub num_classes: usize,
    pub labels_file: String,
    pub splits_file: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relation_groups: Vec<GroupSpec>,
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path },
        _ => Error::Io(e),
    })
}

/// Non-empty lines with 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_err(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_id(file: &str, line: usize, tok: &str) -> Result<u64> {
    tok.trim()
        .parse::<u64>()
        .map_err(|_| parse_err(file, line, format!("invalid node id `{tok}`")))
}

fn two_fields<'a>(file: &str, line: usize, text: &'a str) -> Result<(&'a str, &'a str)> {
    let mut parts = text.split('\t');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), None) => Ok((a, b)),
        _ => Err(parse_err(file, line, "expected two tab-separated fields")),
    }
}

fn check_range(file: &str, line: usize, id: u64, ty: &NodeTypeEntry) -> Result<u32> {
    if id as usize >= ty.count {
        return Err(Error::IdOutOfRange {
            file: file.to_string(),
            line,
            node_type: ty.name.clone(),
            id,
            count: ty.count,
        });
    }
    Ok(id as u32)
}

fn read_features(dir: &Path, ty: &NodeTypeEntry) -> Result<DenseMatrix> {
    let file = ty.feature_file.as_str();
    let text = read(dir, file)?;
    let mut data = Vec::with_capacity(ty.count * ty.feature_dim);
    let mut rows = 0;
    for (line, text) in lines(&text) {
        if rows == ty.count {
            return Err(parse_err(file, line, format!("more than {} feature rows", ty.count)));
        }
        let before = data.len();
        for tok in text.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(file, line, format!("invalid number `{tok}`")))?;
            data.push(v);
        }
        let found = data.len() - before;
        if found != ty.feature_dim {
            return Err(Error::FeatureDim {
                file: file.to_string(),
                line,
                expected: ty.feature_dim,
                found,
            });
        }
        rows += 1;
    }
    if rows != ty.count {
        return Err(parse_err(
            file,
            text.lines().count() + 1,
            format!("expected {} feature rows, found {rows}", ty.count),
        ));
    }
    DenseMatrix::new(ty.count, ty.feature_dim, data)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<HeterogeneousGraph> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&read(dir, "manifest.json")?)
        .map_err(|e| Error::Manifest(e.to_string()))?;

    let type_id = |name: &str| -> Result<NodeTypeId> {
        manifest
            .node_types
            .iter()
            .position(|t| t.name == name)
            .map(|i| NodeTypeId(i as u16))
            .ok_or_else(|| Error::Manifest(format!("unknown node type `{name}`")))
    };

    let mut node_types = Vec::with_capacity(manifest.node_types.len());
    for (i, entry) in manifest.node_types.iter().enumerate() {
        if manifest.node_types[..i].iter().any(|t| t.name == entry.name) {
            return Err(Error::Manifest(format!("duplicate node type `{}`", entry.name)));
        }
        node_types.push(NodeType {
            name: entry.name.clone(),
            count: entry.count,
            features: read_features(dir, entry)?,
        });
    }

    let mut edge_types = Vec::with_capacity(manifest.edge_types.len());
    for entry in &manifest.edge_types {
        let (src, dst) = (type_id(&entry.src_type)?, type_id(&entry.dst_type)?);
        let file = entry.edge_file.as_str();
        let text = read(dir, file)?;
        let mut edges = Vec::new();
        for (line, text) in lines(&text) {
            let (a, b) = two_fields(file, line, text)?;
            let s = check_range(file, line, parse_id(file, line, a)?, &manifest.node_types[src.index()])?;
            let d = check_range(file, line, parse_id(file, line, b)?, &manifest.node_types[dst.index()])?;
            edges.push((s, d));
        }
        edge_types.push(EdgeType {
            name: entry.name.clone(),
            src,
            dst,
            edges,
            undirected: entry.undirected,
        });
    }

    let target_type = type_id(&manifest.target_type)?;
    let target_entry = &manifest.node_types[target_type.index()];
    let n_targets = target_entry.count;

    let labels_file = manifest.labels_file.as_str();
    let mut labels: Vec<Option<usize>> = vec![None; n_targets];
    for (line, text) in lines(&read(dir, labels_file)?) {
        let (a, b) = two_fields(labels_file, line, text)?;
        let node = check_range(labels_file, line, parse_id(labels_file, line, a)?, target_entry)? as usize;
        let class: usize = b
            .trim()
            .parse()
            .map_err(|_| parse_err(labels_file, line, format!("invalid class `{b}`")))?;
        if class >= manifest.num_classes {
            return Err(parse_err(
                labels_file,
                line,
                format!("class {class} out of range (num_classes {})", manifest.num_classes),
            ));
        }
        if labels[node].replace(class).is_some() {
            return Err(parse_err(labels_file, line, format!("duplicate label for node {node}")));
        }
    }

    let splits_file = manifest.splits_file.as_str();
    let mut splits: Vec<Option<Split>> = vec![None; n_targets];
    for (line, text) in lines(&read(dir, splits_file)?) {
        let (a, b) = two_fields(splits_file, line, text)?;
        let node = check_range(splits_file, line, parse_id(splits_file, line, a)?, target_entry)? as usize;
        let split = Split::parse(b.trim())
            .ok_or_else(|| parse_err(splits_file, line, format!("invalid split `{b}`")))?;
        if splits[node].replace(split).is_some() {
            return Err(parse_err(splits_file, line, format!("duplicate split for node {node}")));
        }
    }

    let splits = splits
        .into_iter()
        .enumerate()
        .map(|(node, s)| {
            s.ok_or_else(|| Error::MissingSplit {
                file: splits_file.to_string(),
                node,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(node, l)| {
            l.ok_or_else(|| Error::MissingLabel {
                file: labels_file.to_string(),
                node,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let graph = HeterogeneousGraph {
        node_types,
        edge_types,
        target_type,
        num_classes: manifest.num_classes,
        labels,
        splits,
        relation_groups: manifest.relation_groups,
    };
    if let Some(d) = validate_graph(&graph).into_iter().next() {
        return Err(Error::Manifest(d.to_string()));
    }
    Ok(graph)
}

/// Writes `graph` in the directory format read by [`load_dataset`].
///
/// Floats are written in shortest round-trip form, so export followed by load
/// reproduces the features bit for bit.
pub fn export_dataset(graph: &HeterogeneousGraph, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut node_entries = Vec::new();
    for t in &graph.node_types {
        let file = format!("features_{}.csv", t.name);
        let mut out = String::new();
        for r in 0..t.features.rows() {
            for (c, v) in t.features.row(r).iter().enumerate() {
                if c > 0 {
                    out.push(',');
                }
                write!(out, "{v:?}").expect("write to string");
            }
            out.push('\n');
        }
        fs::write(dir.join(&file), out)?;
        node_entries.push(NodeTypeEntry {
            name: t.name.clone(),
            count: t.count,
            feature_dim: t.features.cols(),
            feature_file: file,
        });
    }

    let mut edge_entries = Vec::new();
    for e in &graph.edge_types {
        let file = format!("edges_{}.tsv", e.name);
        let mut out = String::new();
        for (s, d) in &e.edges {
            writeln!(out, "{s}\t{d}").expect("write to string");
        }
        fs::write(dir.join(&file), out)?;
        edge_entries.push(EdgeTypeEntry {
            name: e.name.clone(),
            src_type: graph.node_type(e.src).name.clone(),
            dst_type: graph.node_type(e.dst).name.clone(),
            edge_file: file,
            undirected: e.undirected,
        });
    }

    let mut labels = String::new();
    let mut splits = String::new();
    for (i, (l, s)) in graph.labels.iter().zip(&graph.splits).enumerate() {
        writeln!(labels, "{i}\t{l}").expect("write to string");
        writeln!(splits, "{i}\t{s}").expect("write to string");
    }
    fs::write(dir.join("labels.tsv"), labels)?;
    fs::write(dir.join("splits.tsv"), splits)?;

    let manifest = Manifest {
        node_types: node_entries,
        edge_types: edge_entries,
        target_type: graph.node_type(graph.target_type).name.clone(),
        num_classes: graph.num_classes,
        labels_file: "labels.tsv".into(),
        splits_file: "splits.tsv".into(),
        relation_groups: graph.relation_groups.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(dir.to_path_buf())
}
