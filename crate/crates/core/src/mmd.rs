//! Squared maximum mean discrepancy between two samples.
//!
//! For samples `x` (M rows) and `y` (M' rows):
//!
//! - unbiased U-statistic (requires M = M' ≥ 2):
//!   `Σ_{i≠j} K(x_i,x_j)/(M(M−1)) − 2/M² Σ_{i,j} K(x_i,y_j) + Σ_{i≠j} K(y_i,y_j)/(M(M−1))`.
//!   It can be negative.
//! - biased V-statistic (any M, M' ≥ 1): the same three blocks with all
//!   pairs including the diagonal, normalized by M², MM' and M'². It is the
//!   squared RKHS distance between the two empirical mean embeddings, so it
//!   is never negative.
//!
//! Gradients are taken with respect to `x` only; `y` is data.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::kernel::KernelConfig;
use crate::tensor::Matrix2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "unbiased_u")]
    Unbiased,
    #[serde(rename = "biased_v")]
    Biased,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdValue {
    pub value: f64,
    pub estimator: Estimator,
}

/// The three blocks of an MMD² estimate: `value = xx − 2·cross + yy`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdTerms {
    pub xx: f64,
    pub cross: f64,
    pub yy: f64,
}

impl MmdTerms {
    pub fn value(&self) -> f64 {
        // (xx + yy) first so swapping the samples gives the same bits.
        (self.xx + self.yy) - 2.0 * self.cross
    }
}

fn check_inputs(x: &Matrix2D, y: &Matrix2D, est: Estimator) -> Result<()> {
    if x.cols() != y.cols() {
        return Err(shape_err!("mmd: {} vs {} columns", x.cols(), y.cols()));
    }
    match est {
        Estimator::Unbiased => {
            if x.rows() != y.rows() {
                return Err(shape_err!(
                    "unbiased mmd needs equal sample counts, got {} and {}",
                    x.rows(),
                    y.rows()
                ));
            }
            if x.rows() < 2 {
                return Err(shape_err!(
                    "unbiased mmd needs at least 2 samples, got {}",
                    x.rows()
                ));
            }
        }
        Estimator::Biased => {
            if x.rows() == 0 || y.rows() == 0 {
                return Err(shape_err!("biased mmd needs non-empty samples"));
            }
        }
    }
    Ok(())
}

/// Normalized within-sample block of `x`.
fn self_block(cfg: &KernelConfig, x: &Matrix2D, est: Estimator) -> (f64, Matrix2D) {
    let m = x.rows() as f64;
    let (sums, moments) = cfg.row_moments(x, x, true);
    let off: f64 = sums.iter().sum();
    let value = match est {
        Estimator::Unbiased => off / (m * (m - 1.0)),
        // The diagonal contributes K(x, x) = 1 per row.
        Estimator::Biased => (off + m) / (m * m),
    };
    (value, moments)
}

/// Within-sample block for `y` alone (constant with respect to `x`).
pub fn mmd2_self_term(cfg: &KernelConfig, y: &Matrix2D, est: Estimator) -> Result<f64> {
    check_inputs(y, y, est)?;
    Ok(self_block(cfg, y, est).0)
}

/// The `x`-dependent blocks and the gradient of `xx − 2·cross` with respect to `x`.
pub fn mmd2_x_terms_and_grad(
    cfg: &KernelConfig,
    x: &Matrix2D,
    y: &Matrix2D,
    est: Estimator,
) -> Result<(f64, f64, Matrix2D)> {
    check_inputs(x, y, est)?;
    let m = x.rows() as f64;
    let my = y.rows() as f64;
    let (xx, self_moments) = self_block(cfg, x, est);
    let (cross_sums, cross_moments) = cfg.row_moments(x, y, false);
    let cross = cross_sums.iter().sum::<f64>() / (m * my);

    // x_i appears in both arguments of the symmetric xx block, hence the 2.
    let w_xx = match est {
        Estimator::Unbiased => 2.0 / (m * (m - 1.0)),
        Estimator::Biased => 2.0 / (m * m),
    };
    let w_xy = 2.0 / (m * my);
    let scale = -2.0 * cfg.alpha;
    let mut grad = self_moments;
    for (g, c) in grad.as_mut_slice().iter_mut().zip(cross_moments.as_slice()) {
        *g = scale * (w_xx * *g - w_xy * c);
    }
    Ok((xx, cross, grad))
}

pub fn mmd2_terms(
    cfg: &KernelConfig,
    x: &Matrix2D,
    y: &Matrix2D,
    est: Estimator,
) -> Result<MmdTerms> {
    check_inputs(x, y, est)?;
    let m = x.rows() as f64;
    let my = y.rows() as f64;
    let xx = self_block(cfg, x, est).0;
    let yy = self_block(cfg, y, est).0;
    // Sum the cross block in a canonical orientation so that the estimate is
    // exactly symmetric under swapping x and y.
    let (rows, cols) = if x
        .as_slice()
        .iter()
        .map(|v| v.to_bits())
        .cmp(y.as_slice().iter().map(|v| v.to_bits()))
        .is_le()
    {
        (x, y)
    } else {
        (y, x)
    };
    let cross = cfg.row_moments(rows, cols, false).0.iter().sum::<f64>() / (m * my);
    Ok(MmdTerms { xx, cross, yy })
}

pub fn mmd2_unbiased(cfg: &KernelConfig, x: &Matrix2D, y: &Matrix2D) -> Result<MmdValue> {
    Ok(MmdValue {
        value: mmd2_terms(cfg, x, y, Estimator::Unbiased)?.value(),
        estimator: Estimator::Unbiased,
    })
}

pub fn mmd2_biased(cfg: &KernelConfig, x: &Matrix2D, y: &Matrix2D) -> Result<MmdValue> {
    // Round-off can push an exact zero a few ulps below; the true value is a squared norm.
    let value = mmd2_terms(cfg, x, y, Estimator::Biased)?.value().max(0.0);
    Ok(MmdValue {
        value,
        estimator: Estimator::Biased,
    })
}

pub fn mmd2_grad_wrt_x(
    cfg: &KernelConfig,
    x: &Matrix2D,
    y: &Matrix2D,
    est: Estimator,
) -> Result<Matrix2D> {
    Ok(mmd2_x_terms_and_grad(cfg, x, y, est)?.2)
}

/// Population MMD² between `N(mean_a, var_a·I_d)` and `N(mean_b, var_b·I_d)`
/// under the Gaussian kernel, in closed form.
///
/// With `g(s) = (1 + 2αs)^{−d/2}` and `h(s, r) = g(s)·exp(−αr/(1 + 2αs))`:
/// `g(2·var_a) − 2·h(var_a + var_b, ‖mean_a − mean_b‖²) + g(2·var_b)`.
pub fn mmd2_gaussian_oracle(
    cfg: &KernelConfig,
    d: usize,
    mean_a: &[f64],
    var_a: f64,
    mean_b: &[f64],
    var_b: f64,
) -> Result<f64> {
    cfg.validate()?;
    if mean_a.len() != d || mean_b.len() != d {
        return Err(shape_err!(
            "oracle means have lengths {} and {}, expected {d}",
            mean_a.len(),
            mean_b.len()
        ));
    }
    if !(var_a >= 0.0 && var_b >= 0.0) {
        return Err(domain_err!(
            "variances must be non-negative, got {var_a} and {var_b}"
        ));
    }
    let alpha = cfg.alpha;
    let half_d = d as f64 / 2.0;
    let g = |s: f64| (1.0 + 2.0 * alpha * s).powf(-half_d);
    let h = |s: f64, r: f64| g(s) * (-alpha * r / (1.0 + 2.0 * alpha * s)).exp();
    let r = crate::tensor::sq_dist(mean_a, mean_b);
    Ok(g(2.0 * var_a) - 2.0 * h(var_a + var_b, r) + g(2.0 * var_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal_matrix, Rng};

    fn k1() -> KernelConfig {
        KernelConfig::default()
    }

    #[test]
    fn identical_point_masses_give_zero() {
        let a = Matrix2D::filled(4, 2, 0.3);
        assert_eq!(mmd2_unbiased(&k1(), &a, &a).unwrap().value, 0.0);
        assert_eq!(mmd2_biased(&k1(), &a, &a).unwrap().value, 0.0);
    }

    #[test]
    fn constant_blocks_unbiased() {
        // Every block is constant: xx = yy = 1, cross = exp(-α‖a−b‖²).
        let k = KernelConfig::gaussian(0.5).unwrap();
        let x = Matrix2D::from_rows(&[[1.0, 0.0]; 3]).unwrap();
        let y = Matrix2D::from_rows(&[[0.0, 2.0]; 3]).unwrap();
        let expected = 2.0 * (1.0 - (-0.5f64 * 5.0).exp());
        let v = mmd2_unbiased(&k, &x, &y).unwrap();
        assert!((v.value - expected).abs() < 1e-14);
        assert_eq!(v.estimator, Estimator::Unbiased);
    }

    #[test]
    fn two_point_unbiased_can_be_negative() {
        // xx = yy = e^-1 (the only off-diagonal pair); cross = (2 + 2e^-1)/4.
        let x = Matrix2D::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let e = (-1.0f64).exp();
        let brute = e - 2.0 * (2.0 + 2.0 * e) / 4.0 + e;
        let v = mmd2_unbiased(&k1(), &x, &x).unwrap().value;
        assert!((v - brute).abs() < 1e-15);
        assert!((v - (e - 1.0)).abs() < 1e-15);
        assert!(v < 0.0);
    }

    #[test]
    fn biased_single_points() {
        let a = Matrix2D::from_rows(&[[0.0, 1.0]]).unwrap();
        let b = Matrix2D::from_rows(&[[2.0, 0.0]]).unwrap();
        let v = mmd2_biased(&k1(), &a, &b).unwrap().value;
        assert!((v - (2.0 - 2.0 * (-5.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn biased_nonnegative_and_zero_on_equal_samples() {
        let mut rng = Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = standard_normal_matrix(&mut rng, 5, 2).unwrap();
            let y = standard_normal_matrix(&mut rng, 5, 2).unwrap();
            assert!(mmd2_biased(&k1(), &x, &y).unwrap().value >= 0.0);
            assert!(mmd2_biased(&k1(), &x, &x).unwrap().value.abs() < 1e-15);
        }
    }

    #[test]
    fn input_contracts() {
        let x = Matrix2D::zeros(3, 2);
        assert!(mmd2_unbiased(&k1(), &x, &Matrix2D::zeros(4, 2)).is_err());
        assert!(mmd2_unbiased(&k1(), &Matrix2D::zeros(1, 2), &Matrix2D::zeros(1, 2)).is_err());
        assert!(mmd2_unbiased(&k1(), &x, &Matrix2D::zeros(3, 1)).is_err());
        assert!(mmd2_biased(&k1(), &x, &Matrix2D::zeros(4, 2)).is_ok());
        assert!(mmd2_biased(&k1(), &x, &Matrix2D::zeros(0, 2)).is_err());
    }

    #[test]
    fn gradient_zero_when_all_rows_coincide() {
        let x = Matrix2D::filled(3, 2, 1.5);
        for est in [Estimator::Unbiased, Estimator::Biased] {
            let g = mmd2_grad_wrt_x(&k1(), &x, &x, est).unwrap();
            assert!(g.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn biased_and_unbiased_gradients_differ_only_in_xx_weight() {
        let k = k1();
        let mut rng = Rng::seed_from_u64(21);
        let x = standard_normal_matrix(&mut rng, 6, 2).unwrap();
        let y = standard_normal_matrix(&mut rng, 6, 2).unwrap();
        let gu = mmd2_grad_wrt_x(&k, &x, &y, Estimator::Unbiased).unwrap();
        let gb = mmd2_grad_wrt_x(&k, &x, &y, Estimator::Biased).unwrap();
        // Gradient of the xx block alone with unit weight, via the Gram gradient.
        let ones = Matrix2D::filled(6, 6, 1.0);
        let gxx = k.gram_grad_wrt_a(&x, &x, &ones).unwrap();
        let m = 6.0;
        let dw = 2.0 / (m * (m - 1.0)) - 2.0 / (m * m);
        for i in 0..gu.as_slice().len() {
            let diff = gu.as_slice()[i] - gb.as_slice()[i];
            assert!((diff - dw * gxx.as_slice()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn swap_and_permutation_invariance() {
        let k = k1();
        let mut rng = Rng::seed_from_u64(4);
        let x = standard_normal_matrix(&mut rng, 7, 2).unwrap();
        let y = standard_normal_matrix(&mut rng, 7, 2).unwrap();
        let xy = mmd2_unbiased(&k, &x, &y).unwrap().value;
        let yx = mmd2_unbiased(&k, &y, &x).unwrap().value;
        assert_eq!(xy.to_bits(), yx.to_bits());
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let xp = x.select_rows(&perm).unwrap();
        assert!((mmd2_unbiased(&k, &xp, &y).unwrap().value - xy).abs() < 1e-12);
        let b = mmd2_biased(&k, &x, &y).unwrap().value;
        assert!((mmd2_biased(&k, &xp, &y).unwrap().value - b).abs() < 1e-12);
    }

    #[test]
    fn oracle_trivial_cases() {
        let k = KernelConfig::gaussian(0.8).unwrap();
        let v = mmd2_gaussian_oracle(&k, 2, &[1.0, 2.0], 0.5, &[1.0, 2.0], 0.5).unwrap();
        assert!(v.abs() < 1e-15);
        let v = mmd2_gaussian_oracle(&k, 2, &[0.0, 0.0], 0.0, &[1.0, 1.0], 0.0).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.8f64 * 2.0).exp())).abs() < 1e-15);
        assert!(mmd2_gaussian_oracle(&k, 2, &[0.0, 0.0], -1.0, &[0.0, 0.0], 1.0).is_err());
        assert!(mmd2_gaussian_oracle(&k, 2, &[0.0], 1.0, &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn oracle_is_positive_for_distinct_gaussians() {
        let k = k1();
        let grid = [
            ([0.0, 0.0], 1.0, [0.1, 0.0], 1.0),
            ([0.0, 0.0], 1.0, [0.0, 0.0], 1.1),
            ([0.0, 0.0], 0.0, [0.0, 0.0], 0.1),
            ([1.0, -1.0], 2.0, [1.0, -1.0], 0.5),
            ([3.0, 3.0], 1.0, [0.0, 0.0], 1.0),
            ([0.0, 0.0], 1.0, [10.0, 10.0], 1.0),
            ([0.5, 0.5], 0.2, [0.4, 0.6], 0.2),
            ([0.0, 0.0], 4.0, [1.0, 0.0], 0.25),
            ([-2.0, 1.0], 0.0, [-2.0, 1.0], 3.0),
            ([0.0, 0.0], 1.0, [0.0, 0.01], 1.0),
        ];
        for (ma, va, mb, vb) in grid {
            let v = mmd2_gaussian_oracle(&k, 2, &ma, va, &mb, vb).unwrap();
            assert!(v > 0.0, "{ma:?} {va} {mb:?} {vb}: {v}");
        }
    }
}
