//! Row-compressed boolean and row-normalized adjacency matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boolean sparse matrix, rows = receiving nodes, columns = sending nodes.
///
/// Column indices are strictly increasing within each row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationAdjacency {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
}

impl RelationAdjacency {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
        }
    }

    /// Build from per-row column lists. Lists are sorted and deduplicated.
    pub fn from_rows(cols: usize, mut rows: Vec<Vec<u32>>) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for (r, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            if let Some(&last) = row.last() {
                if last as usize >= cols {
                    return Err(Error::shape(
                        "RelationAdjacency::from_rows",
                        format!("row {r} references column {last} >= {cols}"),
                    ));
                }
            }
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
        })
    }

    /// Build from `(row, col)` pairs; repeated pairs collapse to one entry.
    pub fn from_pairs(rows: usize, cols: usize, pairs: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut lists = vec![Vec::new(); rows];
        for (r, c) in pairs {
            let list = lists.get_mut(r as usize).ok_or_else(|| {
                Error::shape("RelationAdjacency::from_pairs", format!("row {r} >= {rows}"))
            })?;
            list.push(c);
        }
        Self::from_rows(cols, lists)
    }

    pub fn from_dense(dense: &[Vec<bool>], cols: usize) -> Result<Self> {
        let rows = dense
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(c, _)| c as u32)
                    .collect()
            })
            .collect();
        Self::from_rows(cols, rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u32] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn degree(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.rows).map(|r| self.degree(r)).max().unwrap_or(0)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row(r).binary_search(&(c as u32)).is_ok()
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        (0..self.rows)
            .map(|r| {
                let mut row = vec![false; self.cols];
                for &c in self.row(r) {
                    row[c as usize] = true;
                }
                row
            })
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut lists = vec![Vec::new(); self.cols];
        for r in 0..self.rows {
            for &c in self.row(r) {
                lists[c as usize].push(r as u32);
            }
        }
        // Rows are visited in increasing order, so every list is already sorted.
        Self::from_rows(self.rows, lists).expect("transpose keeps indices in range")
    }

    /// Boolean product `self · rhs`: entry (i, k) is set iff some j has
    /// `self[i, j]` and `rhs[j, k]`.
    pub fn bool_product(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "bool_product",
                format!("{:?} · {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut marker = vec![usize::MAX; rhs.cols];
        let mut row_ptr = Vec::with_capacity(self.rows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        let mut scratch: Vec<u32> = Vec::new();
        for i in 0..self.rows {
            scratch.clear();
            for &j in self.row(i) {
                for &k in rhs.row(j as usize) {
                    if marker[k as usize] != i {
                        marker[k as usize] = i;
                        scratch.push(k);
                    }
                }
            }
            scratch.sort_unstable();
            col_idx.extend_from_slice(&scratch);
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows: self.rows,
            cols: rhs.cols,
            row_ptr,
            col_idx,
        })
    }

    /// Checks the structural invariants; used by tests and on deserialized data.
    pub fn is_well_formed(&self) -> bool {
        self.row_ptr.len() == self.rows + 1
            && self.row_ptr.first() == Some(&0)
            && self.row_ptr.last() == Some(&self.col_idx.len())
            && (0..self.rows).all(|r| {
                let row = self.row(r);
                row.windows(2).all(|w| w[0] < w[1]) && row.iter().all(|&c| (c as usize) < self.cols)
            })
    }
}

/// Row-normalized adjacency: same pattern as the source [`RelationAdjacency`],
/// each nonempty row holds `1 / degree`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedAdjacency {
    pattern: RelationAdjacency,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn pattern(&self) -> &RelationAdjacency {
        &self.pattern
    }

    pub fn rows(&self) -> usize {
        self.pattern.rows
    }

    pub fn cols(&self) -> usize {
        self.pattern.cols
    }

    /// Column indices and values of row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let range = self.pattern.row_ptr[r]..self.pattern.row_ptr[r + 1];
        (&self.pattern.col_idx[range.clone()], &self.values[range])
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).1.iter().sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|r| {
                let mut out = vec![0.0; self.cols()];
                let (cols, vals) = self.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    out[c as usize] = v;
                }
                out
            })
            .collect()
    }
}

/// Row normalization by receiving-node degree. Empty rows stay empty.
pub fn normalize_adjacency(a: &RelationAdjacency) -> NormalizedAdjacency {
    let mut values = Vec::with_capacity(a.nnz());
    for r in 0..a.rows {
        let deg = a.degree(r);
        if deg > 0 {
            let w = 1.0 / deg as f64;
            values.extend(std::iter::repeat_n(w, deg));
        }
    }
    NormalizedAdjacency {
        pattern: a.clone(),
        values,
    }
}
