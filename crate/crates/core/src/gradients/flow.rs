//! Jacobian of the fused embedding of a single node with respect to each of
//! its k source embeddings, with and without the `1/k` residual.
//!
//! For one node, `θ_j = Σ_i h_i W_i W′_ij`, `θ̃ = (θ − θ↓)/(θ↑ − θ↓)` across
//! the k sources and `h_f = Σ_j (θ̃_j + r) h_j` with `r = 1/k` or 0.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{self, DenseMatrix};

/// Inputs of the single-node fusion: `h[i]` of length d, `w[i]` of shape
/// `d × d′`, `w_prime[i][j]` of length d′.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowInputs {
    pub h: Vec<Vec<f64>>,
    pub w: Vec<DenseMatrix>,
    pub w_prime: Vec<Vec<Vec<f64>>>,
}

impl FlowInputs {
    pub fn k(&self) -> usize {
        self.h.len()
    }

    fn validate(&self) -> Result<(usize, usize)> {
        let k = self.k();
        if k == 0 || self.w.len() != k || self.w_prime.len() != k {
            return Err(Error::InvalidArgument(
                "need k ≥ 1 sources with one W and one row of W′ blocks each".into(),
            ));
        }
        let d = self.h[0].len();
        let dp = self.w[0].cols();
        let ok = self.h.iter().all(|h| h.len() == d)
            && self.w.iter().all(|w| w.shape() == (d, dp))
            && self.w_prime.iter().all(|row| row.len() == k && row.iter().all(|b| b.len() == dp));
        if !ok {
            return Err(Error::shape("intermediate_gradient", "inconsistent source shapes"));
        }
        Ok((k, d))
    }

    /// `∂θ_j/∂h_i = W_i W′_ij`, indexed `[i][j]`.
    fn score_gradients(&self) -> Vec<Vec<Vec<f64>>> {
        self.w
            .iter()
            .zip(&self.w_prime)
            .map(|(w, row)| {
                row.iter()
                    .map(|b| (0..w.rows()).map(|a| numerics::dot(w.row(a), b)).collect())
                    .collect()
            })
            .collect()
    }

    pub fn raw_scores(&self) -> Vec<f64> {
        let k = self.k();
        (0..k)
            .map(|j| {
                (0..k)
                    .map(|i| {
                        let hw: Vec<f64> = (0..self.w[i].cols())
                            .map(|c| (0..self.h[i].len()).map(|a| self.h[i][a] * self.w[i][(a, c)]).sum())
                            .collect();
                        numerics::dot(&hw, &self.w_prime[i][j])
                    })
                    .sum()
            })
            .collect()
    }

    /// Fused vector `h_f`.
    pub fn fused(&self, with_residual: bool) -> Vec<f64> {
        let k = self.k();
        let theta = self.raw_scores();
        let norm = normalize(&theta);
        let r = if with_residual { 1.0 / k as f64 } else { 0.0 };
        let mut out = vec![0.0; self.h[0].len()];
        for j in 0..k {
            for (o, x) in out.iter_mut().zip(&self.h[j]) {
                *o += (norm.0[j] + r) * x;
            }
        }
        out
    }
}

/// `(θ̃, argmin, argmax, spread)` with first-index tie-breaking; all zeros
/// when the spread is below the degenerate threshold.
fn normalize(theta: &[f64]) -> (Vec<f64>, usize, usize, f64) {
    let (mut lo, mut hi) = (0, 0);
    for (i, &t) in theta.iter().enumerate() {
        if t < theta[lo] {
            lo = i;
        }
        if t > theta[hi] {
            hi = i;
        }
    }
    let spread = theta[hi] - theta[lo];
    if !(spread >= crate::fusion::DEGENERATE_SPREAD) {
        return (vec![0.0; theta.len()], lo, hi, spread);
    }
    (theta.iter().map(|t| (t - theta[lo]) / spread).collect(), lo, hi, spread)
}

/// `∂h_f/∂h_i` for every source i, each `d × d` with entry `[a][b] =
/// ∂h_f[a]/∂h_i[b]`:
///
/// `(θ̃_i + r) I + Σ_j h_j ⊗ ∂θ̃_j/∂h_i`, where
/// `∂θ̃_j/∂h_i = g_ij/D − g_i↓ (θ↑ − θ_j)/D² − g_i↑ (θ_j − θ↓)/D²` and
/// `g_ij = W_i W′_ij`.
///
/// With `omit_mean` the scores are normalized directly; otherwise they are
/// mean-centered first and the centering Jacobian is applied. A single source
/// follows the constant-column rule; a tie across k ≥ 2 sources is an error.
pub fn intermediate_gradient(inputs: &FlowInputs, with_residual: bool, omit_mean: bool) -> Result<Vec<DenseMatrix>> {
    let (k, d) = inputs.validate()?;
    let mut theta = inputs.raw_scores();
    let mut g = inputs.score_gradients();
    if !omit_mean {
        let mean = theta.iter().sum::<f64>() / k as f64;
        theta.iter_mut().for_each(|t| *t -= mean);
        for gi in g.iter_mut() {
            let avg: Vec<f64> = (0..d).map(|a| gi.iter().map(|v| v[a]).sum::<f64>() / k as f64).collect();
            for v in gi.iter_mut() {
                v.iter_mut().zip(&avg).for_each(|(x, m)| *x -= m);
            }
        }
    }
    let (norm, lo, hi, spread) = normalize(&theta);
    let degenerate = !(spread >= crate::fusion::DEGENERATE_SPREAD);
    if degenerate && k > 1 {
        return Err(Error::DegenerateAttention(format!(
            "raw attention spread {spread:e} across {k} sources"
        )));
    }
    let r = if with_residual { 1.0 / k as f64 } else { 0.0 };

    Ok((0..k)
        .map(|i| {
            let mut jac = DenseMatrix::identity(d).scale(norm[i] + r);
            if degenerate {
                return jac;
            }
            let d2 = spread * spread;
            for j in 0..k {
                let up = (theta[hi] - theta[j]) / d2;
                let down = (theta[j] - theta[lo]) / d2;
                let coeff: Vec<f64> = (0..d)
                    .map(|b| g[i][j][b] / spread - g[i][lo][b] * up - g[i][hi][b] * down)
                    .collect();
                for a in 0..d {
                    let ha = inputs.h[j][a];
                    for (x, c) in jac.row_mut(a).iter_mut().zip(&coeff) {
                        *x += ha * c;
                    }
                }
            }
            jac
        })
        .collect())
}

/// Largest singular value.
pub fn spectral_norm(m: &DenseMatrix) -> f64 {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    dm.singular_values().iter().cloned().fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceFlow {
    pub raw_score: f64,
    pub normalized_score: f64,
    pub norm_with_residual: f64,
    pub norm_without_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradFlowReport {
    pub k: usize,
    pub dim: usize,
    pub spread: f64,
    /// The source constructed to have the lowest attention.
    pub min_source: usize,
    pub sources: Vec<SourceFlow>,
    /// Largest deviation of `with − without` from `(1/k)·I` over all sources.
    pub residual_identity_error: f64,
}

impl GradFlowReport {
    pub fn min_with_residual(&self) -> f64 {
        self.sources[self.min_source].norm_with_residual
    }

    pub fn min_without_residual(&self) -> f64 {
        self.sources[self.min_source].norm_without_residual
    }
}

/// Builds inputs where source 0 has the lowest raw score and the scores span
/// `spread`, then evaluates both Jacobians.
///
/// Every `h_j` is `e_1` and every `W_i` is the identity. Source 0 contributes
/// bounded scores `β_j`; the last source carries the offsets that place
/// `θ_j` at fraction `j/(k−1)` of the spread. Source 0's score gradients stay
/// bounded, so the attention term of its Jacobian shrinks like `1/spread`.
pub fn vanishing_scenario(k: usize, spread: f64, dim: usize) -> Result<GradFlowReport> {
    if k < 2 || !(spread > 0.0) || dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "vanishing scenario needs k ≥ 2, spread > 0 and dim ≥ 2, got k={k}, spread={spread}, dim={dim}"
        )));
    }
    let mut e1 = vec![0.0; dim];
    e1[0] = 1.0;
    let beta: Vec<f64> = (0..k)
        .map(|j| if j % 2 == 0 { 0.5 } else { -0.5 } / (j + 1) as f64)
        .collect();
    let helper = k - 1;
    let mut w_prime = vec![vec![vec![0.0; dim]; k]; k];
    for j in 0..k {
        let alpha = j as f64 / (k - 1) as f64;
        w_prime[0][j][0] = beta[j];
        w_prime[helper][j][0] = alpha * spread - beta[j];
    }
    let inputs = FlowInputs {
        h: vec![e1; k],
        w: vec![DenseMatrix::identity(dim); k],
        w_prime,
    };
    flow_report(&inputs, 0)
}

/// Report for arbitrary inputs.
pub fn flow_report(inputs: &FlowInputs, min_source: usize) -> Result<GradFlowReport> {
    let with = intermediate_gradient(inputs, true, true)?;
    let without = intermediate_gradient(inputs, false, true)?;
    let k = inputs.k();
    let theta = inputs.raw_scores();
    let (norm, _, _, spread) = normalize(&theta);
    let eye = DenseMatrix::identity(inputs.h[0].len()).scale(1.0 / k as f64);
    let residual_identity_error = with
        .iter()
        .zip(&without)
        .map(|(a, b)| a.sub(b).expect("same shape").max_abs_diff(&eye))
        .fold(0.0, f64::max);
    Ok(GradFlowReport {
        k,
        dim: inputs.h[0].len(),
        spread,
        min_source,
        sources: (0..k)
            .map(|i| SourceFlow {
                raw_score: theta[i],
                normalized_score: norm[i],
                norm_with_residual: spectral_norm(&with[i]),
                norm_without_residual: spectral_norm(&without[i]),
            })
            .collect(),
        residual_identity_error,
    })
}
