//! Synthetic (StO₂, RGB) pairs from a Beer–Lambert forward model.
//!
//! Each RGB channel is the attenuation through a layer of tissue whose
//! absorption mixes oxygenated and deoxygenated haemoglobin:
//! `rgb_c = exp(−depth · (s · eps_oxy_c + (1 − s) · eps_deoxy_c))`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_counts, CaseImages, Split, Tissue};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub eps_oxy: [f32; 3],
    pub eps_deoxy: [f32; 3],
    pub depth: f32,
    /// Number of Gaussian blobs summed into the saturation field.
    pub field_smoothness: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            eps_oxy: [0.2, 0.9, 0.3],
            eps_deoxy: [0.8, 0.4, 0.9],
            depth: 1.0,
            field_smoothness: 5,
            seed: 0,
            height: 96,
            width: 128,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth.is_finite() && self.depth > 0.0) {
            return Err(Error::Config(format!("depth must be positive, got {}", self.depth)));
        }
        if self.eps_oxy.iter().chain(&self.eps_deoxy).any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Config("absorption coefficients must be finite and non-negative".into()));
        }
        if self.field_smoothness == 0 {
            return Err(Error::Config("field_smoothness must be at least 1".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("image size {}×{} must be positive", self.height, self.width)));
        }
        Ok(())
    }
}

/// Applies the forward model to a 1×H×W saturation map in [0, 1].
pub fn beer_lambert_rgb(sto2: &Tensor, eps_oxy: [f32; 3], eps_deoxy: [f32; 3], depth: f32) -> Result<Tensor> {
    let &[1, h, w] = sto2.dims() else {
        return Err(Error::Contract(format!("expected a 1×H×W map, got dims {:?}", sto2.dims())));
    };
    if !(depth.is_finite() && depth >= 0.0) {
        return Err(Error::Param(format!("depth must be non-negative, got {depth}")));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        data.extend(
            sto2.data()
                .iter()
                .map(|&s| (-depth * (s * eps_oxy[c] + (1.0 - s) * eps_deoxy[c])).exp()),
        );
    }
    Tensor::new(&[3, h, w], data)
}

/// Smooth saturation field: a base level plus Gaussian blobs, clamped to [0, 1].
fn saturation_field(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let short = h.min(w) as f32;
    let base: f32 = rng.random_range(0.3..0.7);
    let blobs: Vec<(f32, f32, f32, f32)> = (0..cfg.field_smoothness)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f32);
            let cx = rng.random_range(0.0..w as f32);
            let sigma = rng.random_range(0.1..0.35) * short;
            let amp = rng.random_range(-0.5..0.5);
            (cy, cx, 1.0 / (2.0 * sigma * sigma), amp)
        })
        .collect();
    Tensor::from_fn(&[1, h, w], |i| {
        let (r, c) = ((i / w) as f32, (i % w) as f32);
        let v: f32 = blobs
            .iter()
            .map(|&(cy, cx, k, amp)| amp * (-((r - cy).powi(2) + (c - cx).powi(2)) * k).exp())
            .sum();
        (base + v).clamp(0.0, 1.0)
    })
}

/// Returns (StO₂ 1×H×W, RGB 3×H×W), both in [0, 1].
pub fn synth_pair(cfg: &SynthConfig) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sto2 = saturation_field(cfg, &mut rng);
    let rgb = beer_lambert_rgb(&sto2, cfg.eps_oxy, cfg.eps_deoxy, cfg.depth)?;
    Ok((sto2, rgb))
}

/// `n` synthetic cases named `syn0000`, `syn0001`, ... Case `i` is drawn
/// with a seed derived from `cfg.seed` and `i`; a seeded shuffle assigns
/// `split_counts(n, train_ratio)` cases to train and the rest to test.
pub fn synth_cases(cfg: &SynthConfig, n: usize, train_ratio: f64) -> Result<Vec<CaseImages>> {
    let (n_train, _) = split_counts(n, train_ratio)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX)));
    let mut split = vec![Split::Test; n];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    (0..n)
        .map(|i| {
            let (sto2, rgb) = synth_pair(&SynthConfig {
                seed: derive_seed(cfg.seed, i as u64),
                ..cfg.clone()
            })?;
            Ok(CaseImages {
                case_id: format!("syn{i:04}"),
                tissue: Tissue::Synthetic,
                split: split[i],
                sto2,
                rgb,
            })
        })
        .collect()
}
