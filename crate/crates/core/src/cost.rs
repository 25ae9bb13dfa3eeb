//! Quadratic multi-marginal transport costs.
//!
//! `points[0]` holds the source batch (the identity map) and `points[h]` the
//! image of the same batch under the h-th map; all share one `M × d` shape.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::tensor::{sq_dist, Matrix2D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `Σ_{i=1}^{N−1} ‖p_i − p_{i+1}‖²`
    ChainQuadratic,
    /// `Σ_{i<j} ‖p_i − p_j‖²`
    PairwiseQuadratic,
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostKind::ChainQuadratic => "chain",
            CostKind::PairwiseQuadratic => "pairwise",
        })
    }
}

impl FromStr for CostKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chain" | "chain_quadratic" => Ok(CostKind::ChainQuadratic),
            "pairwise" | "pairwise_quadratic" => Ok(CostKind::PairwiseQuadratic),
            other => Err(domain_err!(
                "unknown cost '{other}' (expected chain or pairwise)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSpec {
    pub kind: CostKind,
    /// Number of marginals N, including the source.
    pub marginals: usize,
}

impl CostSpec {
    pub fn new(kind: CostKind, marginals: usize) -> Result<Self> {
        if marginals < 2 {
            return Err(domain_err!(
                "a transport cost needs N >= 2 marginals, got {marginals}"
            ));
        }
        Ok(Self { kind, marginals })
    }

    fn check(&self, points: &[&Matrix2D]) -> Result<(usize, usize)> {
        if points.len() != self.marginals {
            return Err(shape_err!(
                "cost expects {} point sets, got {}",
                self.marginals,
                points.len()
            ));
        }
        let shape = points[0].shape();
        for (k, p) in points.iter().enumerate() {
            if p.shape() != shape {
                return Err(shape_err!(
                    "point set {k} has shape {:?}, expected {shape:?}",
                    p.shape()
                ));
            }
        }
        Ok(shape)
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.marginals;
        match self.kind {
            CostKind::ChainQuadratic => (0..n - 1).map(|i| (i, i + 1)).collect(),
            CostKind::PairwiseQuadratic => (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .collect(),
        }
    }
}

/// Per-row cost `c(p_1[r], …, p_N[r])`.
pub fn cost_batch(spec: &CostSpec, points: &[&Matrix2D]) -> Result<Vec<f64>> {
    let (m, _) = spec.check(points)?;
    let pairs = spec.pairs();
    Ok((0..m)
        .map(|r| {
            pairs
                .iter()
                .map(|&(i, j)| sq_dist(points[i].row(r), points[j].row(r)))
                .sum()
        })
        .collect())
}

/// Gradient of `Σ_r c(p_1[r], …, p_N[r])` with respect to each point set.
pub fn cost_grad(spec: &CostSpec, points: &[&Matrix2D]) -> Result<Vec<Matrix2D>> {
    let (m, d) = spec.check(points)?;
    let mut grads = vec![Matrix2D::zeros(m, d); spec.marginals];
    for (i, j) in spec.pairs() {
        let (pi, pj) = (points[i].as_slice(), points[j].as_slice());
        for k in 0..m * d {
            let g = 2.0 * (pi[k] - pj[k]);
            grads[i].as_mut_slice()[k] += g;
            grads[j].as_mut_slice()[k] -= g;
        }
    }
    Ok(grads)
}

/// Row-wise mean `(p_1[r] + … + p_N[r]) / N`.
pub fn barycenter_samples(points: &[&Matrix2D]) -> Result<Matrix2D> {
    let first = points
        .first()
        .ok_or_else(|| shape_err!("barycenter of an empty list"))?;
    let mut out = Matrix2D::zeros(first.rows(), first.cols());
    for (k, p) in points.iter().enumerate() {
        if p.shape() != first.shape() {
            return Err(shape_err!(
                "point set {k} has shape {:?}, expected {:?}",
                p.shape(),
                first.shape()
            ));
        }
        out.add_scaled(p, 1.0)?;
    }
    let n = points.len() as f64;
    out.map_inplace(|v| v / n);
    Ok(out)
}
