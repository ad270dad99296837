//! Synthetic image-like inputs.
//!
//! A scene is a fixed, mostly saturated low-frequency pattern chosen by
//! `scene_seed`. Each sample adds a few smooth variation fields with small
//! random weights and i.i.d. pixel noise, then clips to `[0, 1]`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_seed: u64,
    /// Cosine components summed into the base pattern.
    pub components: usize,
    /// Logistic slope applied to the base pattern; larger saturates more.
    pub sharpness: f64,
    /// Smooth per-sample variation fields.
    pub factors: usize,
    pub factor_std: f64,
    /// Per-sample scaling of the base pattern around 0.5.
    #[serde(default)]
    pub contrast_std: f64,
    pub pixel_std: f64,
    /// Added to every pixel before clipping.
    pub brightness: f64,
}

impl SceneSpec {
    pub fn in_distribution() -> Self {
        SceneSpec {
            scene_seed: 0x5CE7E,
            components: 4,
            sharpness: 20.0,
            factors: 3,
            factor_std: 0.005,
            contrast_std: 0.065,
            pixel_std: 0.1,
            brightness: 0.0,
        }
    }

    /// A different pattern family under a brightness shift.
    pub fn foreign() -> Self {
        SceneSpec {
            scene_seed: 0xF0_5E1C,
            brightness: 0.25,
            ..Self::in_distribution()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::param("components", "need at least one component"));
        }
        for (name, v) in [
            ("sharpness", self.sharpness),
            ("factor_std", self.factor_std),
            ("contrast_std", self.contrast_std),
            ("pixel_std", self.pixel_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("{v} is not >= 0")));
            }
        }
        if !self.brightness.is_finite() {
            return Err(Error::param("brightness", "not finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SceneGenerator {
    spec: SceneSpec,
    base: Vec<f64>,
    fields: Vec<Vec<f64>>,
}

fn cosine_field(rng: &mut ChaCha8Rng, components: usize, height: usize, width: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..components)
        .map(|_| {
            let u = rng.random_range(0..=2) as f64;
            let v = rng.random_range(0..=2) as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.0);
            (u, v, phase, amp)
        })
        .collect();
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let y = r as f64 / height as f64;
            let x = c as f64 / width as f64;
            let s: f64 = waves
                .iter()
                .map(|&(u, v, phase, amp)| amp * (2.0 * PI * (u * x + v * y) + phase).cos())
                .sum();
            out.push(s);
        }
    }
    let scale = out.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        out.iter_mut().for_each(|v| *v /= scale);
    }
    out
}

impl SceneGenerator {
    pub fn new(spec: SceneSpec, height: usize, width: usize) -> Result<Self> {
        spec.validate()?;
        if height == 0 || width == 0 {
            return Err(Error::param("shape", "empty image"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.scene_seed);
        let base = cosine_field(&mut rng, spec.components, height, width)
            .into_iter()
            .map(|v| 1.0 / (1.0 + (-spec.sharpness * v).exp()))
            .collect();
        let fields = (0..spec.factors)
            .map(|_| cosine_field(&mut rng, 2, height, width))
            .collect();
        Ok(SceneGenerator { spec, base, fields })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn sample(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = self
            .fields
            .iter()
            .map(|_| self.spec.factor_std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let contrast =
            1.0 + self.spec.contrast_std * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        (0..self.base.len())
            .map(|i| {
                let mut v = 0.5 + contrast * (self.base[i] - 0.5) + self.spec.brightness;
                for (w, f) in weights.iter().zip(&self.fields) {
                    v += w * f[i];
                }
                let z: f64 = StandardNormal.sample(&mut rng);
                (v + self.spec.pixel_std * z).clamp(0.0, 1.0)
            })
            .collect()
    }
}
