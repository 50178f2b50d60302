//! Deterministic seed derivation.
//!
//! Every random stream in the crate (topology re-sampling, gradient noise,
//! sweep cells) is keyed by a 64-bit value produced by the SplitMix64
//! finalizer below, so results do not depend on platform, thread count or
//! call order.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function applied to `z`.
pub fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one sub-seed: `h = splitmix64(h ^ w)` per word.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0u64, |h, &w| splitmix64(h ^ w))
}

pub fn rng_from(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(words))
}

/// Where the Gaussian noise enters an oracle call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Added to every returned gradient coordinate.
    #[default]
    Gradient,
    /// Added to the agent's observed data (e.g. rewards) once per iteration,
    /// so both lower-level evaluations of that iteration see the same draw.
    Observation,
}

/// Gaussian noise for one oracle call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub seed: u64,
    pub omega: f64,
    pub kind: NoiseKind,
}

impl NoiseSpec {
    pub fn new(seed: u64, omega: f64) -> Option<Self> {
        (omega > 0.0).then_some(Self { seed, omega, kind: NoiseKind::Gradient })
    }

    pub fn with_kind(self, kind: NoiseKind) -> Self {
        Self { kind, ..self }
    }

    /// `dim` draws of `N(0, omega^2)` from the `(agent, iteration, tag)` stream.
    pub fn draw(&self, dim: usize, agent: usize, iter: u64, tag: u64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        self.perturb(&mut v, agent, iter, tag);
        v
    }

    /// Adds `N(0, omega^2)` entries drawn from the stream keyed by
    /// `(seed, agent, iteration, tag)`.
    pub fn perturb(&self, v: &mut [f64], agent: usize, iter: u64, tag: u64) {
        let mut rng = rng_from(&[self.seed, 0x006E_6F69_7365, agent as u64, iter, tag]);
        for x in v.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *x += self.omega * e;
        }
    }
}
