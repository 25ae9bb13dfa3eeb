//! Seedable pseudo-random numbers.
//!
//! The generator is xoshiro256** with its state expanded from a 64-bit seed
//! by SplitMix64. Both are fully specified integer recurrences, so a seed
//! produces the same stream on every platform. Normal variates use the
//! Box–Muller transform and always consume uniforms in pairs: the second
//! variate of a pair is cached and returned by the next call.

use std::f64::consts::TAU;

use crate::error::{shape_err, Result};
use crate::tensor::Matrix2D;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
    spare_normal: Option<f64>,
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self {
            seed,
            state,
            spare_normal: None,
        }
    }

    /// The seed this generator was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Independent child generator seeded from this stream.
    pub fn fork(&mut self) -> Rng {
        Rng::seed_from_u64(self.next_u64())
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (Lemire's multiply-and-reject). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }
}

/// `rows × cols` matrix of i.i.d. standard normal draws, filled row by row.
pub fn standard_normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix2D> {
    if rows == 0 || cols == 0 {
        return Err(shape_err!(
            "standard_normal_matrix needs rows, cols >= 1, got {rows}x{cols}"
        ));
    }
    let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
    Matrix2D::from_vec(rows, cols, data)
}
