//! Laplace noise source and the closed-form noise-error term.
//!
//! All randomness in the crate flows through [`NoiseGen`], keyed by an
//! [`RngSeed`]: identical (seed, stream_id) pairs produce bit-identical
//! sample sequences, which is what makes whole experiment trials
//! reproducible and parallelizable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::Error;

/// Seed plus a sub-stream discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSeed {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngSeed {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngSeed { seed, stream_id }
    }

    /// Derives a further sub-stream, for keying independent trials off one
    /// base seed. SplitMix64 finalizer over the combined words.
    pub fn child(&self, index: u64) -> RngSeed {
        RngSeed { seed: self.seed, stream_id: splitmix(self.stream_id ^ splitmix(index)) }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.stream_id.to_le_bytes());
        ChaCha12Rng::from_seed(key)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Randomness for one mechanism run.
///
/// `zero_noise` disables the Laplace perturbation (sampling draws are
/// unaffected); several worked-trace tests rely on it.
#[derive(Debug, Clone)]
pub struct NoiseGen {
    rng: ChaCha12Rng,
    pub zero_noise: bool,
}

impl NoiseGen {
    pub fn new(seed: RngSeed) -> Self {
        NoiseGen { rng: seed.rng(), zero_noise: false }
    }

    pub fn new_silent(seed: RngSeed) -> Self {
        NoiseGen { rng: seed.rng(), zero_noise: true }
    }

    /// One Laplace(0, scale) draw, or 0.0 in zero-noise mode.
    pub fn laplace(&mut self, scale: f64) -> f64 {
        if self.zero_noise {
            return 0.0;
        }
        let u: f64 = self.rng.gen_range(-0.5..0.5);
        laplace_from_uniform(scale, u)
    }

    /// Uniform draw in [0, 1), used for sampling-inclusion decisions.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}

/// Inverse-CDF transform of a uniform in (-1/2, 1/2) to Laplace(0, scale):
/// `-scale * sign(u) * ln(1 - 2|u|)`.
pub fn laplace_from_uniform(scale: f64, u: f64) -> f64 {
    debug_assert!(scale > 0.0);
    debug_assert!((-0.5..0.5).contains(&u));
    if u == 0.0 {
        return 0.0;
    }
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// One seeded Laplace(0, scale) draw.
pub fn laplace_sample(scale: f64, gen: &mut NoiseGen) -> Result<f64, Error> {
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::invalid("laplace scale must be > 0"));
    }
    Ok(gen.laplace(scale))
}

/// Variance of the Laplace mechanism on a sensitivity-1 count query at
/// budget `eps_theta`: `2 / eps_theta^2`.
pub fn noise_error(eps_theta: f64) -> Result<f64, Error> {
    if eps_theta.is_nan() || eps_theta <= 0.0 {
        return Err(Error::invalid("eps_theta must be > 0"));
    }
    Ok(2.0 / (eps_theta * eps_theta))
}
