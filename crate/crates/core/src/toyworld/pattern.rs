//! Procedural clean images.

use std::f32::consts::PI;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{clamp01, ToyImage, DEFAULT_SIZE};
use crate::error::Error;
use crate::numerics::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternFamily {
    Grating,
    Checkerboard,
    Blob,
    Edge,
    Mixture,
}

impl PatternFamily {
    pub const ALL: [PatternFamily; 5] = [
        PatternFamily::Grating,
        PatternFamily::Checkerboard,
        PatternFamily::Blob,
        PatternFamily::Edge,
        PatternFamily::Mixture,
    ];

    const BASIC: [PatternFamily; 4] = [
        PatternFamily::Grating,
        PatternFamily::Checkerboard,
        PatternFamily::Blob,
        PatternFamily::Edge,
    ];
}

impl FromStr for PatternFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grating" => Ok(Self::Grating),
            "checkerboard" => Ok(Self::Checkerboard),
            "blob" => Ok(Self::Blob),
            "edge" => Ok(Self::Edge),
            "mixture" => Ok(Self::Mixture),
            other => Err(Error::validation("pattern family", format!("unknown `{other}`"))),
        }
    }
}

/// Fully specified pattern; [`Pattern::render`] is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    /// Intensity constant along each row, sinusoidal down the columns.
    Grating {
        cycles: f32,
        phase: f32,
        amplitude: f32,
        offset: f32,
    },
    Checkerboard {
        cell: usize,
        low: f32,
        high: f32,
        shift_x: usize,
        shift_y: usize,
    },
    Blob {
        cx: f32,
        cy: f32,
        radius: f32,
        background: f32,
        peak: f32,
    },
    /// Smoothed step across the line through `(cx, cy)` at `angle`.
    Edge {
        angle: f32,
        cx: f32,
        cy: f32,
        low: f32,
        high: f32,
        softness: f32,
    },
    Mixture {
        first: Box<Pattern>,
        second: Box<Pattern>,
        weight: f32,
    },
}

impl Pattern {
    fn value(&self, x: usize, y: usize, w: usize, h: usize) -> f32 {
        let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
        match self {
            Pattern::Grating {
                cycles,
                phase,
                amplitude,
                offset,
            } => offset + amplitude * (2.0 * PI * cycles * yf / h as f32 + phase).sin(),
            Pattern::Checkerboard {
                cell,
                low,
                high,
                shift_x,
                shift_y,
            } => {
                let cx = (x + shift_x) / cell;
                let cy = (y + shift_y) / cell;
                if (cx + cy) % 2 == 0 {
                    *low
                } else {
                    *high
                }
            }
            Pattern::Blob {
                cx,
                cy,
                radius,
                background,
                peak,
            } => {
                let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                background + (peak - background) * (-d2 / (2.0 * radius * radius)).exp()
            }
            Pattern::Edge {
                angle,
                cx,
                cy,
                low,
                high,
                softness,
            } => {
                let d = (xf - cx) * angle.cos() + (yf - cy) * angle.sin();
                let s = 1.0 / (1.0 + (-d / softness).exp());
                low + (high - low) * s
            }
            Pattern::Mixture {
                first,
                second,
                weight,
            } => weight * first.value(x, y, w, h) + (1.0 - weight) * second.value(x, y, w, h),
        }
    }

    pub fn render(&self, width: usize, height: usize) -> ToyImage {
        let pixels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| clamp01(self.value(x, y, width, height)))
            .collect();
        ToyImage::new(width, height, pixels).expect("clamped pixels are valid")
    }

    /// Draws the parameters of a pattern of `family` for a `size × size` image.
    pub fn random(family: PatternFamily, size: usize, rng: &mut impl Rng) -> Pattern {
        let s = size as f32;
        match family {
            PatternFamily::Grating => Pattern::Grating {
                cycles: rng.random_range(1.0..4.0),
                phase: rng.random_range(0.0..2.0 * PI),
                amplitude: rng.random_range(0.25..0.45),
                offset: rng.random_range(0.45..0.55),
            },
            PatternFamily::Checkerboard => {
                let mut cells: Vec<usize> = [4, 8, 16].into_iter().filter(|&c| c < size).collect();
                if cells.is_empty() {
                    cells.push((size / 2).max(1));
                }
                let cell = cells[rng.random_range(0..cells.len())];
                Pattern::Checkerboard {
                    cell,
                    low: rng.random_range(0.05..0.35),
                    high: rng.random_range(0.65..0.95),
                    shift_x: rng.random_range(0..cell),
                    shift_y: rng.random_range(0..cell),
                }
            }
            PatternFamily::Blob => Pattern::Blob {
                cx: rng.random_range(0.2 * s..0.8 * s),
                cy: rng.random_range(0.2 * s..0.8 * s),
                radius: rng.random_range(0.1 * s..0.25 * s),
                background: rng.random_range(0.05..0.3),
                peak: rng.random_range(0.7..0.95),
            },
            PatternFamily::Edge => {
                let (low, high) = (rng.random_range(0.05..0.35), rng.random_range(0.65..0.95));
                let (low, high) = if rng.random_bool(0.5) { (low, high) } else { (high, low) };
                Pattern::Edge {
                    angle: rng.random_range(0.0..PI),
                    cx: rng.random_range(0.35 * s..0.65 * s),
                    cy: rng.random_range(0.35 * s..0.65 * s),
                    low,
                    high,
                    softness: rng.random_range(0.3..0.8),
                }
            }
            PatternFamily::Mixture => {
                let a = PatternFamily::BASIC[rng.random_range(0..4)];
                let b = PatternFamily::BASIC[rng.random_range(0..4)];
                Pattern::Mixture {
                    first: Box::new(Pattern::random(a, size, rng)),
                    second: Box::new(Pattern::random(b, size, rng)),
                    weight: rng.random_range(0.35..0.65),
                }
            }
        }
    }
}

/// Clean `32 × 32` image from `family`, deterministic per `(family, seed)`.
pub fn make_clean_image(family: PatternFamily, seed: u64) -> ToyImage {
    make_clean_image_sized(family, seed, DEFAULT_SIZE)
}

pub fn make_clean_image_sized(family: PatternFamily, seed: u64, size: usize) -> ToyImage {
    let mut rng = stream(seed, &[family as u64]);
    Pattern::random(family, size, &mut rng).render(size, size)
}
