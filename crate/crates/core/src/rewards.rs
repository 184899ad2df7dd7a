//! Per-rollout reward vectors: a no-reference quality proxy, a consistency
//! reward anchored on the degraded input, and simple synthetic objectives
//! for exercising the advantage pipelines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyModel;
use crate::error::{Error, Result};
use crate::toyworld::ToyImage;

/// Rows are rollouts, columns are objectives.
pub type RewardMatrix = Vec<Vec<f64>>;

const STAT_FLOOR: f64 = 1e-6;
const CLEAN_TARGET: f64 = 0.85;

/// Log of (gradient energy, Laplacian variance, contrast).
pub fn quality_stats(img: &ToyImage) -> [f64; 3] {
    let (w, h) = (img.width(), img.height());
    let at = |x: isize, y: isize| {
        img.get(x.clamp(0, w as isize - 1) as usize, y.clamp(0, h as isize - 1) as usize) as f64
    };
    let n = (w * h) as f64;
    let (mut energy, mut lap_sum, mut lap_sq) = (0.0, 0.0, 0.0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = at(x, y);
            let dx = at(x + 1, y) - p;
            let dy = at(x, y + 1) - p;
            energy += dx * dx + dy * dy;
            let lap = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * p;
            lap_sum += lap;
            lap_sq += lap * lap;
        }
    }
    let lap_mean = lap_sum / n;
    let lap_var = (lap_sq / n - lap_mean * lap_mean).max(0.0);
    let contrast = img.variance().sqrt();
    [
        (energy / n + STAT_FLOOR).ln(),
        (lap_var + STAT_FLOOR).ln(),
        (contrast + STAT_FLOOR).ln(),
    ]
}

/// Clean-corpus moments of [`quality_stats`] and the squashing rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReference {
    pub mean: [f64; 3],
    pub precision: [[f64; 3]; 3],
    pub alpha: f64,
}

fn invert3(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det: f64 = (0..3).map(|j| m[0][j] * cof[0][j]).sum();
    if !(det.abs() > 1e-300) {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cof[j][i] / det;
        }
    }
    Some(inv)
}

impl QualityReference {
    /// Fits mean and covariance on clean images, then sets `alpha` so an
    /// image at the mean clean distance scores 0.85.
    pub fn fit<'a>(clean: impl IntoIterator<Item = &'a ToyImage>) -> Result<Self> {
        let stats: Vec<[f64; 3]> = clean.into_iter().map(quality_stats).collect();
        if stats.len() < 4 {
            return Err(Error::validation("quality reference", "needs at least 4 clean images"));
        }
        let n = stats.len() as f64;
        let mut mean = [0.0; 3];
        for s in &stats {
            (0..3).for_each(|k| mean[k] += s[k] / n);
        }
        let mut cov = [[0.0; 3]; 3];
        for s in &stats {
            for a in 0..3 {
                for b in 0..3 {
                    cov[a][b] += (s[a] - mean[a]) * (s[b] - mean[b]) / n;
                }
            }
        }
        (0..3).for_each(|k| cov[k][k] += 1e-6);
        let precision =
            invert3(cov).ok_or_else(|| Error::validation("quality reference", "singular covariance"))?;
        let mut r = Self {
            mean,
            precision,
            alpha: 1.0,
        };
        let mean_d = stats.iter().map(|s| r.distance_of(s)).sum::<f64>() / n;
        r.alpha = if mean_d > 0.0 { -CLEAN_TARGET.ln() / mean_d } else { 1.0 };
        Ok(r)
    }

    fn distance_of(&self, s: &[f64; 3]) -> f64 {
        let d = [s[0] - self.mean[0], s[1] - self.mean[1], s[2] - self.mean[2]];
        let mut q = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                q += d[a] * self.precision[a][b] * d[b];
            }
        }
        q.max(0.0).sqrt()
    }

    pub fn distance(&self, img: &ToyImage) -> f64 {
        self.distance_of(&quality_stats(img))
    }

    /// `exp(-α·D)` in `(0, 1]`.
    pub fn score(&self, img: &ToyImage) -> f64 {
        (-self.alpha * self.distance(img)).exp()
    }
}

pub fn quality_reward(sr: &ToyImage, reference: &QualityReference) -> f64 {
    reference.score(sr)
}

/// Consistency score mapped from `[-1, 1]` to `[0, 1]`.
pub fn consistency_reward(lr: &ToyImage, sr: &ToyImage, model: Option<&ConsistencyModel>) -> Result<f64> {
    let model = model.ok_or_else(|| Error::Config("consistency reward needs a trained head".into()))?;
    Ok(0.5 * (model.score(lr, sr)? + 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveId {
    Quality,
    Consistency,
    MeanIntensity,
    NegMeanIntensity,
    /// Pixel standard deviation of the restoration.
    Contrast,
    Constant,
}

impl ObjectiveId {
    pub fn name(self) -> &'static str {
        match self {
            Self::Quality => "quality",
            Self::Consistency => "consistency",
            Self::MeanIntensity => "mean_intensity",
            Self::NegMeanIntensity => "neg_mean_intensity",
            Self::Contrast => "contrast",
            Self::Constant => "constant",
        }
    }
}

impl fmt::Display for ObjectiveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "quality" => Self::Quality,
            "consistency" => Self::Consistency,
            "mean_intensity" => Self::MeanIntensity,
            "neg_mean_intensity" => Self::NegMeanIntensity,
            "contrast" => Self::Contrast,
            "constant" => Self::Constant,
            other => return Err(Error::Config(format!("unknown objective `{other}`"))),
        })
    }
}

/// One registry row. `scale` multiplies the raw value before it enters the
/// reward matrix; it exists to build heterogeneous-scale rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub id: ObjectiveId,
    pub weight: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Objective {
    pub fn new(id: ObjectiveId, weight: f64) -> Self {
        Self { id, weight, scale: 1.0 }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

/// Frozen state reward functions may read.
#[derive(Clone, Debug, Default)]
pub struct RewardContext {
    pub quality: Option<QualityReference>,
    pub consistency: Option<ConsistencyModel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardRegistry {
    objectives: Vec<Objective>,
}

impl RewardRegistry {
    pub fn new(objectives: Vec<Objective>) -> Result<Self> {
        if objectives.is_empty() {
            return Err(Error::Config("reward registry needs at least one objective".into()));
        }
        if let Some(o) = objectives.iter().find(|o| !o.weight.is_finite() || !o.scale.is_finite()) {
            return Err(Error::Config(format!("objective `{}` has a non-finite weight or scale", o.id)));
        }
        Ok(Self { objectives })
    }

    /// Quality and consistency, both with weight 1.
    pub fn default_pair() -> Self {
        Self::new(vec![
            Objective::new(ObjectiveId::Quality, 1.0),
            Objective::new(ObjectiveId::Consistency, 1.0),
        ])
        .expect("non-empty")
    }

    pub fn quality_only() -> Self {
        Self::new(vec![Objective::new(ObjectiveId::Quality, 1.0)]).expect("non-empty")
    }

    /// Parses `id[:weight[:scale]]` entries separated by commas.
    pub fn parse(spec: &str) -> Result<Self> {
        let objectives = spec
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let mut parts = item.split(':');
                let id: ObjectiveId = parts.next().unwrap_or_default().parse()?;
                let num = |p: Option<&str>, what: &str| -> Result<f64> {
                    p.map_or(Ok(1.0), |v| {
                        v.parse()
                            .map_err(|_| Error::Config(format!("objective `{id}`: bad {what} `{v}`")))
                    })
                };
                let weight = num(parts.next(), "weight")?;
                let scale = num(parts.next(), "scale")?;
                if parts.next().is_some() {
                    return Err(Error::Config(format!("objective entry `{item}` has too many fields")));
                }
                Ok(Objective { id, weight, scale })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(objectives)
    }

    pub fn objectives(&self) -> &[Objective] {
        &self.objectives
    }

    pub fn k(&self) -> usize {
        self.objectives.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.objectives.iter().map(|o| o.weight).collect()
    }

    pub fn position(&self, id: ObjectiveId) -> Option<usize> {
        self.objectives.iter().position(|o| o.id == id)
    }

    /// Fails early if an objective's frozen state is missing.
    pub fn check_context(&self, ctx: &RewardContext) -> Result<()> {
        for o in &self.objectives {
            match o.id {
                ObjectiveId::Quality if ctx.quality.is_none() => {
                    return Err(Error::Config("quality reward needs reference statistics".into()))
                }
                ObjectiveId::Consistency if ctx.consistency.is_none() => {
                    return Err(Error::Config("consistency reward needs a trained head".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn raw(&self, id: ObjectiveId, ctx: &RewardContext, lr: &ToyImage, sr: &ToyImage) -> Result<f64> {
        Ok(match id {
            ObjectiveId::Quality => {
                let r = ctx
                    .quality
                    .as_ref()
                    .ok_or_else(|| Error::Config("quality reward needs reference statistics".into()))?;
                quality_reward(sr, r)
            }
            ObjectiveId::Consistency => consistency_reward(lr, sr, ctx.consistency.as_ref())?,
            ObjectiveId::MeanIntensity => sr.mean(),
            ObjectiveId::NegMeanIntensity => -sr.mean(),
            ObjectiveId::Contrast => sr.variance().sqrt(),
            ObjectiveId::Constant => 1.0,
        })
    }

    pub fn evaluate(&self, ctx: &RewardContext, lr: &ToyImage, sr: &ToyImage) -> Result<Vec<f64>> {
        self.objectives
            .iter()
            .map(|o| self.raw(o.id, ctx, lr, sr).map(|v| o.scale * v))
            .collect()
    }
}

/// Reward matrix for one group: row `j` scores `samples[j]` against `lr`.
pub fn eval_rewards(
    registry: &RewardRegistry,
    ctx: &RewardContext,
    lr: &ToyImage,
    samples: &[ToyImage],
) -> Result<RewardMatrix> {
    if samples.is_empty() {
        return Err(Error::contract("reward evaluation on an empty group"));
    }
    samples
        .iter()
        .enumerate()
        .map(|(j, sr)| {
            registry
                .objectives
                .iter()
                .map(|o| {
                    let fail = |reason: String| Error::Reward {
                        objective: o.id.to_string(),
                        rollout: j,
                        reason,
                    };
                    let v = o.scale * registry.raw(o.id, ctx, lr, sr).map_err(|e| fail(e.to_string()))?;
                    if !v.is_finite() {
                        return Err(fail(format!("non-finite value {v}")));
                    }
                    Ok(v)
                })
                .collect()
        })
        .collect()
}
