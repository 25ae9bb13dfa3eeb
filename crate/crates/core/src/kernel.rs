//! Gaussian reproducing kernel `K(x, y) = exp(-α‖x − y‖²)` and Gram matrices.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::par::*;
use crate::tensor::{sq_dist, Matrix2D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    /// Bandwidth coefficient α > 0.
    pub alpha: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            family: KernelFamily::Gaussian,
            alpha: 1.0,
        }
    }
}

impl KernelConfig {
    pub fn gaussian(alpha: f64) -> Result<Self> {
        let cfg = Self {
            family: KernelFamily::Gaussian,
            alpha,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(domain_err!(
                "kernel alpha must be positive and finite, got {}",
                self.alpha
            ));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn at_sq_dist(&self, d2: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => (-self.alpha * d2).exp(),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(shape_err!(
                "kernel eval: dimensions {} vs {}",
                x.len(),
                y.len()
            ));
        }
        Ok(self.at_sq_dist(sq_dist(x, y)))
    }

    /// `G[i][j] = K(a_i, b_j)`.
    pub fn gram(&self, a: &Matrix2D, b: &Matrix2D) -> Result<Matrix2D> {
        let mut g = crate::tensor::pairwise_sq_dists(a, b)?;
        g.map_inplace(|d2| self.at_sq_dist(d2));
        Ok(g)
    }

    /// Gradient of `Σ_ij upstream[i][j] · K(a_i, b_j)` with respect to `a`,
    /// holding `b` fixed: `Σ_j upstream[i][j] · (−2α)(a_i − b_j) K(a_i, b_j)`.
    pub fn gram_grad_wrt_a(
        &self,
        a: &Matrix2D,
        b: &Matrix2D,
        upstream: &Matrix2D,
    ) -> Result<Matrix2D> {
        if a.cols() != b.cols() {
            return Err(shape_err!(
                "gram_grad_wrt_a: {} vs {} columns",
                a.cols(),
                b.cols()
            ));
        }
        if upstream.shape() != (a.rows(), b.rows()) {
            return Err(shape_err!(
                "gram_grad_wrt_a: upstream {:?}, Gram shape {:?}",
                upstream.shape(),
                (a.rows(), b.rows())
            ));
        }
        let d = a.cols();
        let mut out = Matrix2D::zeros(a.rows(), d);
        if d == 0 || a.rows() == 0 {
            return Ok(out);
        }
        let scale = -2.0 * self.alpha;
        out.as_mut_slice()
            .par_chunks_mut(d)
            .enumerate()
            .with_min_len(16)
            .for_each(|(i, gi)| {
                let ai = a.row(i);
                let ui = upstream.row(i);
                for (j, &u) in ui.iter().enumerate() {
                    if u == 0.0 {
                        continue;
                    }
                    let bj = b.row(j);
                    let k = self.at_sq_dist(sq_dist(ai, bj));
                    let w = scale * u * k;
                    for c in 0..d {
                        gi[c] += w * (ai[c] - bj[c]);
                    }
                }
            });
        Ok(out)
    }

    /// Per-row kernel moments against `z`, without storing the Gram matrix:
    /// `sums[i] = Σ_j K(x_i, z_j)` and `moments[i] = Σ_j K(x_i, z_j)(x_i − z_j)`.
    /// With `skip_diagonal` the `j = i` term is left out (for `z = x`).
    ///
    /// Rows are independent work items and each row sums in index order, so
    /// the output does not depend on scheduling.
    pub(crate) fn row_moments(
        &self,
        x: &Matrix2D,
        z: &Matrix2D,
        skip_diagonal: bool,
    ) -> (Vec<f64>, Matrix2D) {
        let d = x.cols();
        let mut sums = vec![0.0; x.rows()];
        let mut moments = Matrix2D::zeros(x.rows(), d);
        if x.rows() == 0 || d == 0 {
            return (sums, moments);
        }
        sums.par_chunks_mut(1)
            .zip(moments.as_mut_slice().par_chunks_mut(d))
            .enumerate()
            .with_min_len(8)
            .for_each(|(i, (s, mi))| {
                let xi = x.row(i);
                let mut acc = 0.0;
                for j in 0..z.rows() {
                    if skip_diagonal && j == i {
                        continue;
                    }
                    let zj = z.row(j);
                    let k = self.at_sq_dist(sq_dist(xi, zj));
                    acc += k;
                    for c in 0..d {
                        mi[c] += k * (xi[c] - zj[c]);
                    }
                }
                s[0] = acc;
            });
        (sums, moments)
    }
}
