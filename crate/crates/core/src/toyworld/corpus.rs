//! Corpora of (clean, degraded) pairs and the `FPCR` file format.
//!
//! File layout (little-endian): magic `FPCR`, version `u16`, pair count `u32`,
//! width `u16`, height `u16`, then per pair: `blur_sigma f32`,
//! `noise_sigma f32`, `factor u32`, `quant_levels u32` (0 = absent),
//! `seed u64`, clean pixels as f32, degraded pixels as f32.
//!
//! Split tags are not stored: they follow from the pair index (first 80%
//! train, next 10% validation, rest test).

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::degrade::{degrade, DegradationSpec};
use super::image::{ToyImage, DEFAULT_SIZE};
use super::pattern::{make_clean_image_sized, PatternFamily};
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, stream};

const MAGIC: &[u8; 4] = b"FPCR";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation("split", format!("unknown `{other}`"))),
        }
    }
}

/// Split of pair `index` in a corpus of `n` pairs.
pub fn split_of(index: usize, n: usize) -> Split {
    let train = (n * 8).div_ceil(10).max(1);
    let val = train + (n - train) / 2;
    if index < train {
        Split::Train
    } else if index < val {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub clean: ToyImage,
    pub degraded: ToyImage,
    pub spec: DegradationSpec,
}

/// Discrete choices per degradation field; each pair draws every field
/// independently and uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecDistribution {
    pub blur_sigmas: Vec<f32>,
    pub noise_sigmas: Vec<f32>,
    pub downsample_factors: Vec<u32>,
    pub quant_levels: Vec<Option<u32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Easy,
    Hard,
    Mixed,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Profile::Easy),
            "hard" => Ok(Profile::Hard),
            "mixed" => Ok(Profile::Mixed),
            other => Err(Error::validation("profile", format!("unknown `{other}`"))),
        }
    }
}

impl SpecDistribution {
    pub fn fixed(spec: DegradationSpec) -> Self {
        Self {
            blur_sigmas: vec![spec.blur_sigma],
            noise_sigmas: vec![spec.noise_sigma],
            downsample_factors: vec![spec.downsample_factor],
            quant_levels: vec![spec.quant_levels],
        }
    }

    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Easy => Self {
                blur_sigmas: vec![0.8, 1.0, 1.2],
                noise_sigmas: vec![0.02, 0.04],
                downsample_factors: vec![1, 2],
                quant_levels: vec![None],
            },
            Profile::Hard => Self {
                blur_sigmas: vec![1.5, 2.0, 2.5],
                noise_sigmas: vec![0.05, 0.08, 0.1],
                downsample_factors: vec![2, 4],
                quant_levels: vec![None, Some(8), Some(16)],
            },
            Profile::Mixed => {
                let (e, h) = (Self::profile(Profile::Easy), Self::profile(Profile::Hard));
                let join = |a: &[f32], b: &[f32]| a.iter().chain(b).copied().collect::<Vec<_>>();
                let mut factors = e.downsample_factors.clone();
                factors.extend(h.downsample_factors.iter().filter(|f| !e.downsample_factors.contains(f)));
                let mut quant = e.quant_levels.clone();
                quant.extend(h.quant_levels.iter().filter(|q| !e.quant_levels.contains(q)));
                Self {
                    blur_sigmas: join(&e.blur_sigmas, &h.blur_sigmas),
                    noise_sigmas: join(&e.noise_sigmas, &h.noise_sigmas),
                    downsample_factors: factors,
                    quant_levels: quant,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |name: &str, len: usize| {
            if len == 0 {
                Err(Error::validation(name, "distribution has no choices"))
            } else {
                Ok(())
            }
        };
        empty("blur_sigmas", self.blur_sigmas.len())?;
        empty("noise_sigmas", self.noise_sigmas.len())?;
        empty("downsample_factors", self.downsample_factors.len())?;
        empty("quant_levels", self.quant_levels.len())
    }

    pub fn draw(&self, rng: &mut impl Rng, seed: u64) -> DegradationSpec {
        let pick = |rng: &mut _, n: usize| Rng::random_range(rng, 0..n);
        DegradationSpec {
            blur_sigma: self.blur_sigmas[pick(rng, self.blur_sigmas.len())],
            noise_sigma: self.noise_sigmas[pick(rng, self.noise_sigmas.len())],
            downsample_factor: self.downsample_factors[pick(rng, self.downsample_factors.len())],
            quant_levels: self.quant_levels[pick(rng, self.quant_levels.len())],
            seed,
        }
    }
}

/// How many pairs have each degradation stage active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DiversitySummary {
    pub blur: usize,
    pub downsample: usize,
    pub noise: usize,
    pub quantize: usize,
    pub distinct_blur_sigmas: usize,
    pub distinct_noise_sigmas: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    width: usize,
    height: usize,
    pairs: Vec<Pair>,
}

impl Corpus {
    pub fn from_pairs(pairs: Vec<Pair>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::validation("corpus", "no pairs"))?;
        let (width, height) = (first.clean.width(), first.clean.height());
        for (i, p) in pairs.iter().enumerate() {
            for img in [&p.clean, &p.degraded] {
                if img.width() != width || img.height() != height {
                    return Err(Error::validation(
                        "corpus",
                        format!("pair {i} is not {width}x{height}"),
                    ));
                }
            }
        }
        Ok(Self {
            width,
            height,
            pairs,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn split(&self, index: usize) -> Split {
        split_of(index, self.pairs.len())
    }

    /// Indices of the pairs in `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&i| self.split(i) == split).collect()
    }

    pub fn split_pairs(&self, split: Split) -> Vec<&Pair> {
        self.indices(split).into_iter().map(|i| &self.pairs[i]).collect()
    }

    /// Re-runs the degradation of every pair and compares bit-for-bit.
    pub fn verify_reproducible(&self) -> Result<bool> {
        for p in &self.pairs {
            if degrade(&p.clean, &p.spec)? != p.degraded {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn diversity(&self) -> DiversitySummary {
        let mut s = DiversitySummary::default();
        let mut blurs: Vec<u32> = Vec::new();
        let mut noises: Vec<u32> = Vec::new();
        for p in &self.pairs {
            let [b, d, n, q] = p.spec.active();
            s.blur += b as usize;
            s.downsample += d as usize;
            s.noise += n as usize;
            s.quantize += q as usize;
            blurs.push(p.spec.blur_sigma.to_bits());
            noises.push(p.spec.noise_sigma.to_bits());
        }
        blurs.sort_unstable();
        blurs.dedup();
        noises.sort_unstable();
        noises.dedup();
        s.distinct_blur_sigmas = blurs.len();
        s.distinct_noise_sigmas = noises.len();
        s
    }

    pub fn encode(&self) -> Vec<u8> {
        let px = self.pixel_count();
        let mut out = Vec::with_capacity(16 + self.pairs.len() * (24 + 8 * px));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.pairs.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        for p in &self.pairs {
            out.extend_from_slice(&p.spec.blur_sigma.to_le_bytes());
            out.extend_from_slice(&p.spec.noise_sigma.to_le_bytes());
            out.extend_from_slice(&p.spec.downsample_factor.to_le_bytes());
            out.extend_from_slice(&p.spec.quant_levels.unwrap_or(0).to_le_bytes());
            out.extend_from_slice(&p.spec.seed.to_le_bytes());
            for v in p.clean.pixels().iter().chain(p.degraded.pixels()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "FPCR",
            reason,
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(bad(format!("truncated at byte {pos}")));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let width = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let height = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let px = width * height;
        let mut pairs = Vec::with_capacity(count);
        for i in 0..count {
            let f32_at = |b: &[u8]| f32::from_le_bytes(b.try_into().unwrap());
            let blur_sigma = f32_at(take(4)?);
            let noise_sigma = f32_at(take(4)?);
            let factor = u32::from_le_bytes(take(4)?.try_into().unwrap());
            let quant = u32::from_le_bytes(take(4)?.try_into().unwrap());
            let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let mut read_image = |what: &str| -> Result<ToyImage> {
                let raw = take(px * 4)?;
                let pixels = raw.chunks_exact(4).map(f32_at).collect();
                ToyImage::new(width, height, pixels)
                    .map_err(|e| bad(format!("pair {i} {what} image: {e}")))
            };
            let clean = read_image("clean")?;
            let degraded = read_image("degraded")?;
            pairs.push(Pair {
                clean,
                degraded,
                spec: DegradationSpec {
                    blur_sigma,
                    noise_sigma,
                    downsample_factor: factor,
                    quant_levels: (quant != 0).then_some(quant),
                    seed,
                },
            });
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Corpus::from_pairs(pairs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// `n` pairs of 32×32 images with specs drawn from `dist`.
pub fn build_corpus(n: usize, dist: &SpecDistribution, seed: u64) -> Result<Corpus> {
    build_corpus_sized(n, dist, seed, DEFAULT_SIZE)
}

pub fn build_corpus_sized(n: usize, dist: &SpecDistribution, seed: u64, size: usize) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::validation("n", "corpus needs at least one pair"));
    }
    dist.validate()?;
    let pairs = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[i as u64, 0]);
            let family = PatternFamily::ALL[rng.random_range(0..PatternFamily::ALL.len())];
            let clean = make_clean_image_sized(family, derive_seed(seed, &[i as u64, 1]), size);
            let spec = dist.draw(&mut rng, derive_seed(seed, &[i as u64, 2]));
            let degraded = degrade(&clean, &spec)?;
            Ok(Pair {
                clean,
                degraded,
                spec,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::from_pairs(pairs)
}
