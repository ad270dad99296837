//! Input corruptions used to produce out-of-distribution samples: additive
//! Gaussian noise, impulse (salt-and-pepper) noise and single-step FGSM.
//!
//! Inputs are image tensors normalized to `[0, 1]`; every generator clips its
//! result back into that range. Random draws depend only on the seed, not on
//! the strength parameter, so one seed at several strengths gives nested
//! corruptions of the same input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refnet::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    Gaussian { variance: f64 },
    Impulse { p: f64 },
    Fgsm { epsilon: f64 },
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::Gaussian { variance } if !(variance >= 0.0 && variance.is_finite()) => {
                Err(Error::param("variance", format!("{variance} is not >= 0")))
            }
            Perturbation::Impulse { p } if !(0.0..=1.0).contains(&p) => {
                Err(Error::param("p", format!("{p} is outside [0, 1]")))
            }
            Perturbation::Fgsm { epsilon } if !(epsilon >= 0.0 && epsilon.is_finite()) => {
                Err(Error::param("epsilon", format!("{epsilon} is not >= 0")))
            }
            _ => Ok(()),
        }
    }

    /// Short stable name, e.g. `gaussian_0.02`.
    pub fn label(&self) -> String {
        match self {
            Perturbation::Gaussian { variance } => format!("gaussian_{variance}"),
            Perturbation::Impulse { p } => format!("impulse_{p}"),
            Perturbation::Fgsm { epsilon } => format!("fgsm_{epsilon}"),
        }
    }

    pub fn level(&self) -> f64 {
        match *self {
            Perturbation::Gaussian { variance } => variance,
            Perturbation::Impulse { p } => p,
            Perturbation::Fgsm { epsilon } => epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    #[serde(flatten)]
    pub perturbation: Perturbation,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(perturbation: Perturbation, seed: u64) -> Self {
        PerturbationSpec { perturbation, seed }
    }

    /// Applies the perturbation to one input. `stream` separates the random
    /// draws of different inputs sharing this spec (e.g. the sample index).
    pub fn apply(&self, net: Option<&Network>, x: &[f64], stream: u64) -> Result<Vec<f64>> {
        let seed = derive_seed(self.seed, stream);
        match self.perturbation {
            Perturbation::Gaussian { variance } => gaussian_noise(x, variance, seed),
            Perturbation::Impulse { p } => impulse_noise(x, p, seed),
            Perturbation::Fgsm { epsilon } => {
                let net = net.ok_or_else(|| Error::param("network", "fgsm needs a network"))?;
                fgsm(net, x, epsilon, seed)
            }
        }
    }
}

/// SplitMix64 finalizer over `seed ^ stream`-mixed input.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// The pre-clip noise `n ~ N(0, variance)` that [`gaussian_noise`] adds.
pub fn gaussian_noise_field(len: usize, variance: f64, seed: u64) -> Result<Vec<f64>> {
    Perturbation::Gaussian { variance }.validate()?;
    let sd = variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect())
}

pub fn gaussian_noise(x: &[f64], variance: f64, seed: u64) -> Result<Vec<f64>> {
    if variance == 0.0 {
        return Ok(x.to_vec());
    }
    let noise = gaussian_noise_field(x.len(), variance, seed)?;
    Ok(x.iter().zip(noise).map(|(v, n)| clip01(v + n)).collect())
}

/// Each element becomes 1.0 with probability `p/2`, 0.0 with probability
/// `p/2`, and is left alone otherwise.
pub fn impulse_noise(x: &[f64], p: f64, seed: u64) -> Result<Vec<f64>> {
    Perturbation::Impulse { p }.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = p / 2.0;
    Ok(x.iter()
        .map(|&v| {
            let u: f64 = rng.random();
            if u < half {
                1.0
            } else if u >= 1.0 - half {
                0.0
            } else {
                v
            }
        })
        .collect())
}

/// Untargeted single-step FGSM against the SSE loss.
///
/// The attack target is the clean output shifted by a seeded random unit
/// vector, which keeps the gradient away from the trivial zero at the clean
/// output; the sign mask then pushes the output further from that target.
pub fn fgsm(net: &Network, x: &[f64], epsilon: f64, seed: u64) -> Result<Vec<f64>> {
    Perturbation::Fgsm { epsilon }.validate()?;
    let clean = net.forward(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir: Vec<f64> = (0..clean.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm > 0.0 {
        dir.iter_mut().for_each(|d| *d /= norm);
    } else {
        dir[0] = 1.0;
    }
    let target: Vec<f64> = clean.iter().zip(&dir).map(|(y, d)| y + d).collect();
    let grad = net.input_gradient(x, &target)?;
    Ok(x.iter()
        .zip(grad)
        .map(|(&v, g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            clip01(v + epsilon * s)
        })
        .collect())
}
