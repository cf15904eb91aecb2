//! Counter-based random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by `(seed, tag)` and positioned on
//! stream `index`, so any sample can be regenerated independently of how many
//! samples precede it or how work is split across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Complex64;

/// Stream tags. Distinct purposes draw from disjoint key spaces.
pub mod tags {
    pub const GAUSSIAN_SAMPLE: u64 = 0x5341_4d50;
    pub const MIXTURE_LABEL: u64 = 0x4c41_4245;
    pub const MIXTURE_SAMPLE: u64 = 0x4d49_5853;
    pub const SPECTRUM: u64 = 0x5350_4543;
    pub const GEOMETRY: u64 = 0x4745_4f4d;
    pub const EM_INIT: u64 = 0x454d_494e;
    pub const KMEANS: u64 = 0x4b4d_4541;
    pub const TEST: u64 = 0x5445_5354;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One deterministic random stream.
pub struct StreamRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl StreamRng {
    pub fn new(seed: u64, tag: u64, index: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = seed ^ splitmix64(tag);
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(index);
        Self {
            inner,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on (0, 1], safe for logarithms.
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal variate via the Box–Muller transform.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    /// Proper complex normal with `E|z|^2 = 1`.
    pub fn complex_normal(&mut self) -> Complex64 {
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        Complex64::new(self.standard_normal() * scale, self.standard_normal() * scale)
    }

    /// Index drawn from the categorical law `weights` (assumed normalised).
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n.max(1)
    }
}
