//! Seeded randomness shared by every stochastic operation.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a purpose tag.
pub fn derive(seed: u64, tag: &str) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seeded(seed ^ h.rotate_left(17))
}

pub fn normal<T: Scalar>(rng: &mut Rng) -> T {
    T::of(rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_tensor<T: Scalar>(shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| normal(rng))
}

pub fn uniform<T: Scalar>(lo: T, hi: T, rng: &mut Rng) -> T {
    lo + (hi - lo) * T::of(rng.random::<f64>())
}

/// Exact position of a generator, enough to resume it bit-for-bit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Option<Rng> {
        if self.seed.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(self.seed.get(2 * i..2 * i + 2)?, 16).ok()?;
        }
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}
