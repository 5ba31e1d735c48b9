//! Residual attention fusion of aligned embeddings.
//!
//! A fusion stage takes k row-aligned embeddings, projects each one, scores
//! the concatenated projections into an `n × k` matrix Θ, normalizes every
//! column of Θ and fuses with per-node weights `Θ̃ + 1/k`. The same stage is
//! used over batch sizes within a group and over groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, DenseMatrix};

/// Columns whose raw spread is below this are treated as constant.
pub const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Per-column min-max normalization plus the `1/k` residual.
    #[default]
    MinMax,
    /// Row softmax across sources plus the `1/k` residual.
    Softmax,
    /// Uniform mean of the sources; no attention parameters are used.
    Naive,
}

/// Column-wise min-max normalization of Θ with everything the backward pass
/// needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensors {
    pub raw: DenseMatrix,
    /// Column means of `raw`.
    pub mean: Vec<f64>,
    pub centered: DenseMatrix,
    pub normalized: DenseMatrix,
    pub argmin: Vec<usize>,
    pub argmax: Vec<usize>,
    /// `max − min` per column.
    pub spread: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// `Σ_b (H_b P_b) S[block b]`, computed as `[H_1 P_1 ‖ … ‖ H_k P_k] · S`.
#[derive(Debug, Clone)]
pub struct RawAttention {
    pub projected: Vec<DenseMatrix>,
    pub concat: DenseMatrix,
    pub theta: DenseMatrix,
}

pub fn raw_attention(
    embeddings: &[&DenseMatrix],
    projections: &[&DenseMatrix],
    score: &DenseMatrix,
) -> Result<RawAttention> {
    if embeddings.is_empty() || embeddings.len() != projections.len() {
        return Err(Error::InvalidArgument(format!(
            "attention needs one projection per source, got {} sources and {} projections",
            embeddings.len(),
            projections.len()
        )));
    }
    let n = embeddings[0].rows();
    if let Some(h) = embeddings.iter().find(|h| h.rows() != n) {
        return Err(Error::shape(
            "raw_attention",
            format!("source rows {} differ from {n}", h.rows()),
        ));
    }
    let projected = embeddings
        .iter()
        .zip(projections)
        .map(|(h, p)| numerics::matmul(h, p))
        .collect::<Result<Vec<_>>>()?;
    let concat = DenseMatrix::hcat(&projected.iter().collect::<Vec<_>>())?;
    if score.cols() != embeddings.len() {
        return Err(Error::shape(
            "raw_attention",
            format!("score weight has {} columns for {} sources", score.cols(), embeddings.len()),
        ));
    }
    let theta = numerics::matmul(&concat, score)?;
    Ok(RawAttention {
        projected,
        concat,
        theta,
    })
}

/// Index of the first minimum and first maximum.
fn extremes(values: impl Iterator<Item = f64>) -> (usize, usize) {
    let (mut lo, mut hi) = (0, 0);
    let (mut vlo, mut vhi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v < vlo {
            vlo = v;
            lo = i;
        }
        if v > vhi {
            vhi = v;
            hi = i;
        }
    }
    (lo, hi)
}

/// Per column: subtract the mean, then map to `[0, 1]` by `(x − min)/(max − min)`.
///
/// The ratio is taken on raw differences, which equal the centered ones, so a
/// positive affine map of a column that is exact in floating point leaves the
/// output bit for bit unchanged.
pub fn minmax_normalize(theta: &DenseMatrix) -> AttentionTensors {
    let (n, k) = theta.shape();
    let mut mean = vec![0.0; k];
    let mut centered = theta.clone();
    let mut normalized = DenseMatrix::zeros(n, k);
    let mut argmin = vec![0; k];
    let mut argmax = vec![0; k];
    let mut spread = vec![0.0; k];
    let mut degenerate = vec![true; k];
    for c in 0..k {
        if n == 0 {
            continue;
        }
        let col = theta.column(c);
        mean[c] = col.iter().sum::<f64>() / n as f64;
        for r in 0..n {
            centered[(r, c)] = col[r] - mean[c];
        }
        let (lo, hi) = extremes(col.iter().copied());
        argmin[c] = lo;
        argmax[c] = hi;
        spread[c] = col[hi] - col[lo];
        degenerate[c] = !(spread[c] >= DEGENERATE_SPREAD);
        if !degenerate[c] {
            for r in 0..n {
                normalized[(r, c)] = (col[r] - col[lo]) / spread[c];
            }
        }
    }
    AttentionTensors {
        raw: theta.clone(),
        mean,
        centered,
        normalized,
        argmin,
        argmax,
        spread,
        degenerate,
    }
}

/// Gradient with respect to the raw scores given the gradient with respect to
/// the normalized ones. Min and max route through the recorded indices;
/// degenerate columns pass no gradient.
pub fn minmax_backward(t: &AttentionTensors, grad: &DenseMatrix) -> DenseMatrix {
    let (n, k) = t.raw.shape();
    let mut out = DenseMatrix::zeros(n, k);
    for c in 0..k {
        if t.degenerate[c] {
            continue;
        }
        let (lo, hi, d) = (t.argmin[c], t.argmax[c], t.spread[c]);
        let mut col = vec![0.0; n];
        for r in 0..n {
            let g = grad[(r, c)] / d;
            let gt = g * t.normalized[(r, c)];
            col[r] += g;
            col[lo] -= g;
            col[hi] -= gt;
            col[lo] += gt;
        }
        // Jacobian of the mean subtraction.
        let m = col.iter().sum::<f64>() / n as f64;
        for r in 0..n {
            out[(r, c)] = col[r] - m;
        }
    }
    out
}

pub fn softmax_normalize(theta: &DenseMatrix) -> DenseMatrix {
    numerics::softmax_rows(theta)
}

/// `Σ_j weights[:, j] ⊙ sources[j]`, weights broadcast over feature columns.
pub fn fuse(weights: &DenseMatrix, sources: &[&DenseMatrix]) -> Result<DenseMatrix> {
    if sources.is_empty() || weights.cols() != sources.len() {
        return Err(Error::InvalidArgument(format!(
            "fusion weight has {} columns for {} sources",
            weights.cols(),
            sources.len()
        )));
    }
    let (n, d) = sources[0].shape();
    if weights.rows() != n || sources.iter().any(|s| s.shape() != (n, d)) {
        return Err(Error::shape("fuse", "sources and weights are not row-aligned"));
    }
    let mut out = DenseMatrix::zeros(n, d);
    for r in 0..n {
        let row = out.row_mut(r);
        for (j, s) in sources.iter().enumerate() {
            let w = weights[(r, j)];
            for (o, &x) in row.iter_mut().zip(s.row(r)) {
                *o += w * x;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`fuse`] with respect to the weights and to each source.
pub fn fuse_backward(
    weights: &DenseMatrix,
    sources: &[&DenseMatrix],
    grad_out: &DenseMatrix,
) -> (DenseMatrix, Vec<DenseMatrix>) {
    let (n, k) = weights.shape();
    let mut d_weights = DenseMatrix::zeros(n, k);
    let mut d_sources = Vec::with_capacity(k);
    for (j, s) in sources.iter().enumerate() {
        let mut ds = DenseMatrix::zeros(s.rows(), s.cols());
        for r in 0..n {
            d_weights[(r, j)] = numerics::dot(grad_out.row(r), s.row(r));
            let w = weights[(r, j)];
            for (o, &g) in ds.row_mut(r).iter_mut().zip(grad_out.row(r)) {
                *o = w * g;
            }
        }
        d_sources.push(ds);
    }
    (d_weights, d_sources)
}

/// Forward state of one fusion stage.
#[derive(Debug, Clone)]
pub struct StageForward {
    pub mode: FusionMode,
    /// Absent in naive mode.
    pub raw: Option<RawAttention>,
    pub minmax: Option<AttentionTensors>,
    pub softmax: Option<DenseMatrix>,
    /// `n × k` per-node fusion weights.
    pub weights: DenseMatrix,
    pub fused: DenseMatrix,
}

impl StageForward {
    /// Normalized attention scores without the residual.
    pub fn scores(&self) -> Option<&DenseMatrix> {
        self.minmax.as_ref().map(|t| &t.normalized).or(self.softmax.as_ref())
    }
}

/// Projection, scoring, normalization and fusion of one stage.
pub fn fusion_stage(
    sources: &[&DenseMatrix],
    projections: &[&DenseMatrix],
    score: &DenseMatrix,
    mode: FusionMode,
) -> Result<StageForward> {
    let k = sources.len();
    if k == 0 {
        return Err(Error::InvalidArgument("fusion stage without sources".into()));
    }
    let n = sources[0].rows();
    let residual = 1.0 / k as f64;
    let (raw, minmax, softmax, weights) = match mode {
        FusionMode::Naive => (None, None, None, DenseMatrix::filled(n, k, residual)),
        FusionMode::MinMax => {
            let raw = raw_attention(sources, projections, score)?;
            let t = minmax_normalize(&raw.theta);
            let w = t.normalized.map(|x| x + residual);
            (Some(raw), Some(t), None, w)
        }
        FusionMode::Softmax => {
            let raw = raw_attention(sources, projections, score)?;
            let s = softmax_normalize(&raw.theta);
            let w = s.map(|x| x + residual);
            (Some(raw), None, Some(s), w)
        }
    };
    let fused = fuse(&weights, sources)?;
    Ok(StageForward {
        mode,
        raw,
        minmax,
        softmax,
        weights,
        fused,
    })
}

#[derive(Debug, Clone)]
pub struct StageGradients {
    pub sources: Vec<DenseMatrix>,
    /// Empty in naive mode.
    pub projections: Vec<DenseMatrix>,
    pub score: Option<DenseMatrix>,
}

/// Reverse pass of [`fusion_stage`], through both the fusion weights and the
/// fused sources.
pub fn fusion_stage_backward(
    stage: &StageForward,
    sources: &[&DenseMatrix],
    projections: &[&DenseMatrix],
    score: &DenseMatrix,
    grad_fused: &DenseMatrix,
) -> Result<StageGradients> {
    let (d_weights, mut d_sources) = fuse_backward(&stage.weights, sources, grad_fused);
    let raw = match &stage.raw {
        Some(raw) => raw,
        None => {
            return Ok(StageGradients {
                sources: d_sources,
                projections: Vec::new(),
                score: None,
            })
        }
    };
    let d_theta = match (&stage.minmax, &stage.softmax) {
        (Some(t), _) => minmax_backward(t, &d_weights),
        (None, Some(s)) => numerics::softmax_rows_backward(s, &d_weights),
        (None, None) => unreachable!("attention modes record their normalization"),
    };
    let d_score = numerics::matmul_tn(&raw.concat, &d_theta)?;
    let d_concat = numerics::matmul_nt(&d_theta, score)?;
    let mut d_proj = Vec::with_capacity(sources.len());
    let mut start = 0;
    for (j, (h, p)) in sources.iter().zip(projections).enumerate() {
        let width = p.cols();
        let d_hp = d_concat.column_block(start, width);
        start += width;
        d_proj.push(numerics::matmul_tn(h, &d_hp)?);
        d_sources[j].add_assign(&numerics::matmul_nt(&d_hp, p)?);
    }
    Ok(StageGradients {
        sources: d_sources,
        projections: d_proj,
        score: Some(d_score),
    })
}
