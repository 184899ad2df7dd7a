//! Synthetic degradation: blur, then box downsample with nearest re-upsample,
//! then additive Gaussian noise, then uniform quantization.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image::{clamp01, ToyImage};
use crate::error::{Error, Result};
use crate::numerics::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    /// Gaussian blur standard deviation in pixels.
    pub blur_sigma: f32,
    /// Additive Gaussian noise standard deviation.
    pub noise_sigma: f32,
    pub downsample_factor: u32,
    /// Number of uniform quantization levels; `None` disables the stage.
    pub quant_levels: Option<u32>,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            downsample_factor: 1,
            quant_levels: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(Error::validation("blur_sigma", format!("{} is not >= 0", self.blur_sigma)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::validation(
                "noise_sigma",
                format!("{} is not >= 0", self.noise_sigma),
            ));
        }
        if self.downsample_factor < 1 {
            return Err(Error::validation("downsample_factor", "must be >= 1"));
        }
        if let Some(q) = self.quant_levels {
            if q < 2 {
                return Err(Error::validation("quant_levels", format!("{q} is not >= 2")));
            }
        }
        Ok(())
    }

    /// Which degradation stages are active: (blur, downsample, noise, quantize).
    pub fn active(&self) -> [bool; 4] {
        [
            self.blur_sigma > 0.0,
            self.downsample_factor > 1,
            self.noise_sigma > 0.0,
            self.quant_levels.is_some(),
        ]
    }
}

/// Normalized discrete Gaussian truncated at ⌈3σ⌉.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur with replicated borders, accumulated in f64.
pub fn gaussian_blur(img: &ToyImage, sigma: f32) -> ToyImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let k = gaussian_kernel(sigma as f64);
    let r = (k.len() / 2) as isize;
    let src: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, &kv)| kv * src[y * w + at(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = k
                .iter()
                .enumerate()
                .map(|(t, &kv)| kv * tmp[at(y as isize + t as isize - r, h) * w + x])
                .sum();
            out[y * w + x] = v as f32;
        }
    }
    ToyImage::from_clamped(w, h, out).expect("same extents")
}

/// Box-average `factor × factor` blocks, then repeat each block mean.
/// Edge blocks that do not fit a full `factor` are averaged over what exists.
pub fn box_resample(img: &ToyImage, factor: u32) -> ToyImage {
    let f = factor as usize;
    if f <= 1 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0f32; w * h];
    for by in (0..h).step_by(f) {
        for bx in (0..w).step_by(f) {
            let (ye, xe) = ((by + f).min(h), (bx + f).min(w));
            let mut sum = 0.0f64;
            for y in by..ye {
                for x in bx..xe {
                    sum += img.get(x, y) as f64;
                }
            }
            let mean = (sum / ((ye - by) * (xe - bx)) as f64) as f32;
            for y in by..ye {
                for x in bx..xe {
                    out[y * w + x] = mean;
                }
            }
        }
    }
    ToyImage::from_clamped(w, h, out).expect("same extents")
}

/// Standard-normal field from the spec seed. Independent of `noise_sigma`, so
/// raising the noise level scales the same draws.
fn noise_field(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = stream(seed, &[0x6e6f_6973_65]);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn quantize(v: f32, levels: u32) -> f32 {
    let l = (levels - 1) as f32;
    (v * l).round() / l
}

/// Applies the full pipeline; pure in `(clean, spec)`.
pub fn degrade(clean: &ToyImage, spec: &DegradationSpec) -> Result<ToyImage> {
    spec.validate()?;
    let blurred = gaussian_blur(clean, spec.blur_sigma);
    let resampled = box_resample(&blurred, spec.downsample_factor);
    let mut px = resampled.into_pixels();
    if spec.noise_sigma > 0.0 {
        let z = noise_field(spec.seed, px.len());
        px.iter_mut()
            .zip(z)
            .for_each(|(p, zv)| *p = clamp01(*p + spec.noise_sigma * zv));
    }
    if let Some(levels) = spec.quant_levels {
        px.iter_mut().for_each(|p| *p = clamp01(quantize(*p, levels)));
    }
    ToyImage::from_clamped(clean.width(), clean.height(), px)
}
