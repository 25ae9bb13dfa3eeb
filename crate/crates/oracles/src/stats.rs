//! Sampling-based references for the MMD estimators.

use mm_monge::data::MarginalSpec;
use mm_monge::mmd::mmd2_biased;
use mm_monge::rng::standard_normal_matrix;
use mm_monge::{KernelConfig, Result, Rng};

/// Radical inverse of `i` in `base`.
pub fn halton(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// E exp(−α‖δ + σZ‖²) for Z ~ N(0, I₂) by quasi-Monte Carlo with Halton
/// points mapped through Box–Muller.
pub fn qmc_kernel_mean(alpha: f64, delta: [f64; 2], sigma: f64, n: u64) -> f64 {
    let mut acc = 0.0;
    for i in 1..=n {
        let u1 = halton(i, 2);
        let u2 = halton(i, 3);
        let r = (-2.0 * u1.ln()).sqrt();
        let t = std::f64::consts::TAU * u2;
        let z = [r * t.cos(), r * t.sin()];
        let d0 = delta[0] + sigma * z[0];
        let d1 = delta[1] + sigma * z[1];
        acc += (-alpha * (d0 * d0 + d1 * d1)).exp();
    }
    acc / n as f64
}

/// Population MMD² between N(a, va·I₂) and N(b, vb·I₂): the difference of
/// two independent draws is Gaussian with variance va + vb per coordinate.
pub fn qmc_mmd2(alpha: f64, a: [f64; 2], va: f64, b: [f64; 2], vb: f64) -> f64 {
    let n = 1 << 18;
    let kxx = qmc_kernel_mean(alpha, [0.0, 0.0], (2.0 * va).sqrt(), n);
    let kyy = qmc_kernel_mean(alpha, [0.0, 0.0], (2.0 * vb).sqrt(), n);
    let kxy = qmc_kernel_mean(alpha, [a[0] - b[0], a[1] - b[1]], (va + vb).sqrt(), n);
    kxx + kyy - 2.0 * kxy
}

/// Monte-Carlo mean and standard error of the unbiased MMD² between
/// `N(0, I₂)` and `N((3,3), I₂)` at batch size `m`.
pub fn mmd_monte_carlo(draws: usize, m: usize, seed: u64) -> (f64, f64) {
    let cfg = KernelConfig::default();
    let mut rng = Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..draws)
        .map(|_| {
            let x = standard_normal_matrix(&mut rng, m, 2).unwrap();
            let mut y = standard_normal_matrix(&mut rng, m, 2).unwrap();
            y.map_inplace(|v| v + 3.0);
            mm_monge::mmd::mmd2_unbiased(&cfg, &x, &y).unwrap().value
        })
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Biased MMD² between each of `pairs` pairs of independent `n`-point draws
/// from `spec`.
pub fn noise_draws(
    spec: &MarginalSpec,
    kernel: &KernelConfig,
    n: usize,
    pairs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..pairs)
        .map(|_| {
            let a = spec.sample(n, &mut rng)?;
            let b = spec.sample(n, &mut rng)?;
            Ok(mmd2_biased(kernel, &a, &b)?.value)
        })
        .collect()
}

/// Mean of [`noise_draws`]: the value a perfect generator scores on average.
pub fn noise_floor(
    spec: &MarginalSpec,
    kernel: &KernelConfig,
    n: usize,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    let draws = noise_draws(spec, kernel, n, pairs, seed)?;
    Ok(draws.iter().sum::<f64>() / draws.len() as f64)
}
