//! Counter-based pseudo random numbers.
//!
//! The generator is stateless apart from a 64-bit seed and a 64-bit counter.
//! Draw number `k` (starting at zero) is
//!
//! ```text
//! x = seed + (k + 1) * 0x9E3779B97F4A7C15          (wrapping)
//! x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9          (wrapping)
//! x = (x ^ (x >> 27)) * 0x94D049BB133111EB          (wrapping)
//! x =  x ^ (x >> 31)
//! ```
//!
//! which is the SplitMix64 finalizer applied to a Weyl sequence, so any draw
//! can be computed directly from `(seed, k)`. Derived quantities:
//!
//! * `uniform01`: `(x >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal`: Box-Muller on two consecutive uniforms `u1, u2`,
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`.
//! * `below(n)`: rejection sampling of `x` on the largest multiple of `n`.
//! * `fork(stream)`: a new generator whose seed is `mix(seed ^ mix(stream))`
//!   where `mix` is the finalizer above applied to its argument plus the
//!   golden-ratio increment. Forking does not advance the parent.

use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit draws consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent child stream; the parent is not advanced.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(stream.wrapping_add(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform01();
        let u2 = self.uniform01();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// I.i.d. uniform samples in `[lo, hi)`.
pub fn rng_uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo < hi) {
        return arg_err(format!("uniform range requires lo < hi, got [{lo}, {hi})"));
    }
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::from_vec(shape, data)
}

pub fn rng_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| std * rng.normal()).collect();
    Tensor::from_vec(shape, data)
}
