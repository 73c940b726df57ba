//! Deterministic random numbers for noise synthesis and randomized checks.
//!
//! The generator is SplitMix64 driven by a plain 64-bit counter: draw `k`
//! hashes `mix(seed ^ golden * k)`. Gaussian variates come from the
//! Box-Muller transform applied to consecutive uniform pairs. The stream for
//! a given seed is a pure function of (seed, draw index), so every consumer
//! is bit-reproducible across runs and platforms.

use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed, counter: 0, spare_normal: None }
    }

    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn next_u64(&mut self) -> u64 {
        let k = self.counter;
        self.counter += 1;
        Self::mix(self.seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; pairs are consumed in stream order.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u in (0, 1] keeps the log finite.
        let r = (-2.0 * (1.0 - self.next_f64()).ln()).sqrt();
        let angle = 2.0 * PI * self.next_f64();
        self.spare_normal = Some(r * angle.sin());
        r * angle.cos()
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.next_normal();
        }
    }
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (|error| < 1.5e-7), enough for Kolmogorov-Smirnov checks.
pub fn normal_cdf(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    0.5 * (1.0 + erf(z))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    sign * (1.0 - poly * (-x * x).exp())
}
