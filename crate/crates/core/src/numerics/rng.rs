use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Named, seedable random generator.
///
/// Every stochastic operation takes one of these explicitly. Streams are
/// derived from `(seed, name)` so that e.g. the shuffle stream and the
/// dropout stream of one run never interleave. The mapping from raw 64-bit
/// words to floats is fixed here rather than borrowed from a library so the
/// produced sequences stay stable across dependency upgrades.
#[derive(Debug, Clone)]
pub struct RunRng {
    inner: ChaCha8Rng,
}

fn stream_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the stream name, folded into the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

impl RunRng {
    pub fn named(seed: u64, name: &str) -> Self {
        RunRng {
            inner: ChaCha8Rng::seed_from_u64(stream_seed(seed, name)),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of entropy.
    pub fn unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Unbiased draw in `[0, n)` by rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Raw generator state for checkpointing.
    pub fn state(&self) -> ([u8; 32], u128) {
        (self.inner.get_seed(), self.inner.get_word_pos())
    }

    pub fn restore(seed: [u8; 32], word_pos: u128) -> Self {
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_word_pos(word_pos);
        RunRng { inner }
    }
}
