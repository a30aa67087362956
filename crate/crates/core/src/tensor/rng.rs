//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, stream_id, counter)`. The generator behind
//! it is ChaCha8 keyed by the seed, with the stream id as the ChaCha nonce and
//! the counter as the 64-bit word position, so any draw can be reproduced
//! from its address alone.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_from_seed(seed: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    key
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter: 0,
        }
    }

    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter,
        }
    }

    /// A fresh stream whose id is derived from this one's id and `tag`.
    pub fn child(&self, tag: u64) -> Self {
        Self::new(self.seed, splitmix(self.stream_id ^ splitmix(tag)))
    }

    /// The same stream repositioned at `counter`.
    pub fn seek(&self, counter: u64) -> Self {
        Self { counter, ..*self }
    }

    fn generator(&self) -> ChaCha8Rng {
        let mut g = ChaCha8Rng::from_seed(key_from_seed(self.seed));
        g.set_stream(self.stream_id);
        g.set_word_pos(u128::from(self.counter) * 2);
        g
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.generator().next_u64();
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        to_unit(self.next_u64())
    }

    pub fn fill_uniform(&mut self, out: &mut [f64]) {
        let mut g = self.generator();
        for v in out.iter_mut() {
            *v = to_unit(g.next_u64());
        }
        self.counter += out.len() as u64;
    }

    pub fn uniform(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        self.fill_uniform(t.data_mut());
        t
    }

    /// Box-Muller normals; every pair of uniforms yields two values.
    pub fn fill_gaussian(&mut self, out: &mut [f64], mean: f64, std: f64) -> Result<()> {
        if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::Parameter(format!(
                "gaussian needs finite mean and std >= 0, got mean {mean}, std {std}"
            )));
        }
        let pairs = out.len().div_ceil(2);
        let mut u = vec![0.0; pairs * 2];
        self.fill_uniform(&mut u);
        for (i, v) in out.iter_mut().enumerate() {
            let (u1, u2) = (1.0 - u[(i / 2) * 2], u[(i / 2) * 2 + 1]);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            let z = if i % 2 == 0 { r * theta.cos() } else { r * theta.sin() };
            *v = mean + std * z;
        }
        Ok(())
    }

    pub fn gaussian(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
        let mut t = Tensor::zeros(shape);
        self.fill_gaussian(t.data_mut(), mean, std)?;
        Ok(t)
    }

    /// Integer in `0..n` by modulo reduction; the bias is negligible for small `n`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        self.next_u64() % n
    }
}

fn to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
