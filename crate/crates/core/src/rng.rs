//! Portable generator for the built-in toy model's weights.
//!
//! The toy weights must be reproducible from any language, so they come from a
//! fully written-out generator instead of a library RNG:
//!
//! * state initialisation: one SplitMix64 step applied to the seed
//!   (`z = seed + 0x9E3779B97F4A7C15`,
//!   `z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9`,
//!   `z = (z ^ (z >> 27)) * 0x94D049BB133111EB`, `z ^= z >> 31`),
//!   with a zero result replaced by `0x9E3779B97F4A7C15`;
//! * each draw: xorshift64* (`x ^= x >> 12; x ^= x << 25; x ^= x >> 27;`
//!   output `x * 0x2545F4914F6CDD1D`), all arithmetic wrapping mod 2^64;
//! * uniform real in `[-1, 1)`: `(out >> 11) as f64 / 2^53 * 2 - 1`.
//!
//! Everything else stochastic in the crate (sampling, initialisation) uses
//! ChaCha8 from `rand_chacha`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(GOLDEN);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Self {
            state: if z == 0 { GOLDEN } else { z },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[-1, 1)`.
    pub fn next_symmetric(&mut self) -> f64 {
        let unit = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        unit * 2.0 - 1.0
    }
}

/// ChaCha8 stream for a given seed and stream id.
pub(crate) fn chacha(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
