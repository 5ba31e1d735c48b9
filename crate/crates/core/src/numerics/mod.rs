//! Deterministic numeric kernels and their reverse-mode rules.
//!
//! Every accumulation runs in a fixed left-to-right order so identical inputs
//! give bitwise-identical outputs.

mod matrix;

pub use matrix::DenseMatrix;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hetgraph::NormalizedAdjacency;
use crate::rng;

/// `a · b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("{:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = DenseMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}ᵀ · {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = DenseMatrix::zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let b_row = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            for (o, &brj) in out.row_mut(i).iter_mut().zip(b_row) {
                *o += ari * brj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} · {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let mut out = DenseMatrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let a_row = a.row(i);
        for j in 0..b.rows() {
            out[(i, j)] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Reverse rule for `c = a · b`: returns `(∂a, ∂b)` given `∂c`.
pub fn matmul_backward(
    a: &DenseMatrix,
    b: &DenseMatrix,
    grad_out: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    Ok((matmul_nt(grad_out, b)?, matmul_tn(a, grad_out)?))
}

/// Sparse row-gather product `Ã · H`.
pub fn sparse_dense_multiply(a: &NormalizedAdjacency, h: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != h.rows() {
        return Err(Error::shape(
            "sparse_dense_multiply",
            format!("{}x{} · {:?}", a.rows(), a.cols(), h.shape()),
        ));
    }
    let mut out = DenseMatrix::zeros(a.rows(), h.cols());
    for r in 0..a.rows() {
        let (cols, vals) = a.row(r);
        let out_row = out.row_mut(r);
        for (&c, &v) in cols.iter().zip(vals) {
            for (o, &x) in out_row.iter_mut().zip(h.row(c as usize)) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

/// Reverse rule for `Ã · H` with respect to `H`: `Ãᵀ · G`.
pub fn sparse_dense_backward(a: &NormalizedAdjacency, grad_out: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != grad_out.rows() {
        return Err(Error::shape(
            "sparse_dense_backward",
            format!("{}x{} vs grad {:?}", a.rows(), a.cols(), grad_out.shape()),
        ));
    }
    let mut out = DenseMatrix::zeros(a.cols(), grad_out.cols());
    for r in 0..a.rows() {
        let (cols, vals) = a.row(r);
        let g = grad_out.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            for (o, &x) in out.row_mut(c as usize).iter_mut().zip(g) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &DenseMatrix) -> DenseMatrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// ReLU reverse rule; the subgradient at 0 is 0.
pub fn relu_backward(pre: &DenseMatrix, grad_out: &DenseMatrix) -> DenseMatrix {
    let data = pre
        .as_slice()
        .iter()
        .zip(grad_out.as_slice())
        .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
        .collect();
    DenseMatrix::new(pre.rows(), pre.cols(), data).expect("same shape")
}

/// Keep-mask for inverted dropout, reproducible from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub p: f64,
    pub seed: u64,
}

impl DropoutMask {
    pub fn all_kept(len: usize) -> Self {
        Self {
            keep: vec![true; len],
            p: 0.0,
            seed: 0,
        }
    }

    pub fn generate(len: usize, p: f64, seed: u64) -> Self {
        if p == 0.0 {
            return Self {
                seed,
                ..Self::all_kept(len)
            };
        }
        let mut r = rng::substream(seed, &[rng::tag::DROPOUT]);
        let keep = (0..len).map(|_| r.random::<f64>() >= p).collect();
        Self { keep, p, seed }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (1.0 - self.p)
    }

    pub fn zero_fraction(&self) -> f64 {
        self.keep.iter().filter(|k| !**k).count() as f64 / self.keep.len().max(1) as f64
    }
}

fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Inverted dropout: `mask ⊙ x / (1 - p)`.
pub fn apply_dropout(x: &DenseMatrix, p: f64, seed: u64) -> Result<(DenseMatrix, DropoutMask)> {
    check_dropout_p(p)?;
    let mask = DropoutMask::generate(x.rows() * x.cols(), p, seed);
    Ok((apply_mask(x, &mask), mask))
}

pub fn apply_mask(x: &DenseMatrix, mask: &DropoutMask) -> DenseMatrix {
    let s = mask.scale();
    let data = x
        .as_slice()
        .iter()
        .zip(&mask.keep)
        .map(|(&v, &k)| if k { v * s } else { 0.0 })
        .collect();
    DenseMatrix::new(x.rows(), x.cols(), data).expect("same shape")
}

/// Dropout reverse rule; identical to the forward map since it is linear.
pub fn dropout_backward(mask: &DropoutMask, grad_out: &DenseMatrix) -> DenseMatrix {
    apply_mask(grad_out, mask)
}

/// Column means of `h`.
pub fn mean_pool_rows(h: &DenseMatrix) -> Result<Vec<f64>> {
    if h.rows() == 0 {
        return Err(Error::InvalidArgument("mean pooling of an empty matrix".into()));
    }
    let mut acc = vec![0.0; h.cols()];
    for r in 0..h.rows() {
        for (a, &x) in acc.iter_mut().zip(h.row(r)) {
            *a += x;
        }
    }
    let n = h.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Reverse rule for mean pooling: every row receives `grad / rows`.
pub fn mean_pool_backward(rows: usize, grad_out: &[f64]) -> DenseMatrix {
    let n = rows as f64;
    DenseMatrix::from_fn(rows, grad_out.len(), |_, c| grad_out[c] / n)
}

pub fn elementwise_l1(s: &DenseMatrix) -> f64 {
    s.as_slice().iter().fold(0.0, |acc, x| acc + x.abs())
}

/// Subgradient of `‖S‖₁`: `sign(S)` with `sign(0) = 0`.
pub fn elementwise_l1_backward(s: &DenseMatrix) -> DenseMatrix {
    s.map(|x| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Row-wise softmax.
pub fn softmax_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Reverse rule for row softmax given its output `y`.
pub fn softmax_rows_backward(y: &DenseMatrix, grad_out: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), grad_out.row(r));
        let inner = dot(yr, gr);
        for (o, (&yv, &gv)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
            *o = yv * (gv - inner);
        }
    }
    out
}
