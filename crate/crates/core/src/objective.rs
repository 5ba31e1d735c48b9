//! Prediction head, diversity penalty, loss and accuracy.

use crate::error::{Error, Result};
use crate::numerics::{self, DenseMatrix};

/// Two-layer perceptron `ReLU(H W₁ + b₁) W₂ + b₂`. Biases are `1 × n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
}

impl MlpParams {
    pub fn zeros(hidden: usize, classes: usize) -> Self {
        Self {
            w1: DenseMatrix::zeros(hidden, hidden),
            b1: DenseMatrix::zeros(1, hidden),
            w2: DenseMatrix::zeros(hidden, classes),
            b2: DenseMatrix::zeros(1, classes),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpForward {
    pub pre: DenseMatrix,
    pub hidden: DenseMatrix,
    pub logits: DenseMatrix,
}

fn add_bias(x: &mut DenseMatrix, bias: &DenseMatrix) -> Result<()> {
    if bias.shape() != (1, x.cols()) {
        return Err(Error::shape("add_bias", format!("{:?} bias for {:?}", bias.shape(), x.shape())));
    }
    for r in 0..x.rows() {
        for (v, b) in x.row_mut(r).iter_mut().zip(bias.row(0)) {
            *v += b;
        }
    }
    Ok(())
}

pub fn mlp_predict(h: &DenseMatrix, params: &MlpParams) -> Result<MlpForward> {
    let mut pre = numerics::matmul(h, &params.w1)?;
    add_bias(&mut pre, &params.b1)?;
    let hidden = numerics::relu(&pre);
    let mut logits = numerics::matmul(&hidden, &params.w2)?;
    add_bias(&mut logits, &params.b2)?;
    Ok(MlpForward { pre, hidden, logits })
}

fn column_sums(x: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(1, x.cols());
    for r in 0..x.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out
}

/// Returns the parameter gradients and the gradient with respect to `h`.
pub fn mlp_backward(
    h: &DenseMatrix,
    params: &MlpParams,
    fwd: &MlpForward,
    grad_logits: &DenseMatrix,
) -> Result<(MlpParams, DenseMatrix)> {
    let w2 = numerics::matmul_tn(&fwd.hidden, grad_logits)?;
    let b2 = column_sums(grad_logits);
    let d_hidden = numerics::matmul_nt(grad_logits, &params.w2)?;
    let d_pre = numerics::relu_backward(&fwd.pre, &d_hidden);
    let w1 = numerics::matmul_tn(h, &d_pre)?;
    let b1 = column_sums(&d_pre);
    let dh = numerics::matmul_nt(&d_pre, &params.w1)?;
    Ok((MlpParams { w1, b1, w2, b2 }, dh))
}

/// Gram matrix of mean-pooled view embeddings. Row `v` of `pooled` belongs to
/// the v-th view in the order given.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityMatrix {
    pub pooled: DenseMatrix,
    pub s: DenseMatrix,
}

pub fn diversity_matrix(views: &[&DenseMatrix]) -> Result<DiversityMatrix> {
    let rows = views
        .iter()
        .map(|h| numerics::mean_pool_rows(h))
        .collect::<Result<Vec<_>>>()?;
    let pooled = DenseMatrix::from_rows(&rows)?;
    let s = numerics::matmul_nt(&pooled, &pooled)?;
    Ok(DiversityMatrix { pooled, s })
}

/// `‖S‖₁`, optionally without the diagonal.
pub fn diversity_penalty(s: &DenseMatrix, exclude_diagonal: bool) -> f64 {
    if !exclude_diagonal {
        return numerics::elementwise_l1(s);
    }
    let mut total = 0.0;
    for r in 0..s.rows() {
        for c in 0..s.cols() {
            if r != c {
                total += s[(r, c)].abs();
            }
        }
    }
    total
}

/// Gradient of `scale · ‖S‖₁` with respect to each view embedding, each
/// `rows × d`.
pub fn diversity_backward(
    dm: &DiversityMatrix,
    rows: usize,
    scale: f64,
    exclude_diagonal: bool,
) -> Result<Vec<DenseMatrix>> {
    let mut sign = numerics::elementwise_l1_backward(&dm.s);
    if exclude_diagonal {
        for i in 0..sign.rows() {
            sign[(i, i)] = 0.0;
        }
    }
    // S = P Pᵀ, so ∂/∂P = (G + Gᵀ) P.
    let g = sign.add(&sign.transpose())?.scale(scale);
    let d_pooled = numerics::matmul(&g, &dm.pooled)?;
    Ok((0..d_pooled.rows())
        .map(|v| numerics::mean_pool_backward(rows, d_pooled.row(v)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub diversity: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cross_entropy: f64, diversity: f64, lambda: f64) -> Self {
        Self {
            cross_entropy,
            diversity,
            lambda,
            total: cross_entropy + lambda * diversity,
        }
    }
}

/// Mean softmax cross-entropy over the masked rows and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize], mask: &[bool]) -> Result<(f64, DenseMatrix)> {
    if labels.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels and {} mask entries for {} rows", labels.len(), mask.len(), logits.rows()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument("cross-entropy over an empty mask".into()));
    }
    let probs = numerics::softmax_rows(logits);
    let mut grad = DenseMatrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    let n = count as f64;
    for r in 0..logits.rows() {
        if !mask[r] {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[r]];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = (probs[(r, c)] - if c == labels[r] { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((total / n, grad))
}

pub fn total_loss(
    logits: &DenseMatrix,
    labels: &[usize],
    train_mask: &[bool],
    s: &DenseMatrix,
    lambda: f64,
    exclude_diagonal: bool,
) -> Result<LossBreakdown> {
    let (ce, _) = cross_entropy(logits, labels, train_mask)?;
    Ok(LossBreakdown::new(ce, diversity_penalty(s, exclude_diagonal), lambda))
}

/// First index of the row maximum.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of masked rows whose argmax equals the label.
pub fn evaluate(logits: &DenseMatrix, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let rows: Vec<usize> = (0..logits.rows()).filter(|&r| mask.get(r).copied().unwrap_or(false)).collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty mask".into()));
    }
    let hits = rows.iter().filter(|&&r| argmax_row(logits.row(r)) == labels[r]).count();
    Ok(hits as f64 / rows.len() as f64)
}
