//! Reward matrices to bounded reward weights.
//!
//! Two pipelines share the final map `r = ½ + ½·clip(A / Z_c, -1, 1)`:
//!
//! * scalar-first: `s = Σ λ_k r^(k)`, centered per group and divided by the
//!   population std of every `s` in the batch;
//! * decoupled: each objective is z-scored within its group, the z-scores are
//!   fused with `λ`, and the fused values are standardized over the batch.
//!
//! All statistics use the population convention and are summed in index
//! order, so results do not depend on how callers schedule work.

use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::RewardMatrix;

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_Z_C: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    #[value(name = "scalar", alias = "scalar_first")]
    #[serde(alias = "scalar")]
    ScalarFirst,
    Decoupled,
}

impl AdvantageMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::ScalarFirst => "scalar_first",
            Self::Decoupled => "decoupled",
        }
    }
}

impl FromStr for AdvantageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" | "scalar_first" => Ok(Self::ScalarFirst),
            "decoupled" => Ok(Self::Decoupled),
            other => Err(Error::validation("mode", format!("unknown advantage mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageConfig {
    pub mode: AdvantageMode,
    pub weights: Vec<f64>,
    pub epsilon: f64,
    pub z_c: f64,
}

impl AdvantageConfig {
    pub fn new(mode: AdvantageMode, weights: Vec<f64>) -> Self {
        Self {
            mode,
            weights,
            epsilon: DEFAULT_EPSILON,
            z_c: DEFAULT_Z_C,
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.weights.len() != k {
            return Err(Error::contract(format!(
                "{} weights for {k} objectives",
                self.weights.len()
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::validation("epsilon", "must be > 0"));
        }
        if !(self.z_c > 0.0) {
            return Err(Error::validation("z_c", "must be > 0"));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::validation("weights", "must be finite"));
        }
        Ok(())
    }
}

/// Reward matrices grouped by the input they were sampled for.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    k: usize,
    groups: Vec<RewardMatrix>,
}

impl RolloutBatch {
    pub fn new(groups: Vec<RewardMatrix>) -> Result<Self> {
        let k = groups
            .first()
            .and_then(|g| g.first())
            .map(Vec::len)
            .ok_or_else(|| Error::contract("rollout batch has no rewards"))?;
        if k == 0 {
            return Err(Error::contract("reward rows have no objectives"));
        }
        for (i, g) in groups.iter().enumerate() {
            if g.len() < 2 {
                return Err(Error::contract(format!("group {i} has {} rollouts; need at least 2", g.len())));
            }
            for (j, row) in g.iter().enumerate() {
                if row.len() != k {
                    return Err(Error::contract(format!(
                        "group {i} rollout {j} has {} objectives, expected {k}",
                        row.len()
                    )));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::contract(format!("group {i} rollout {j} has a non-finite reward")));
                }
            }
        }
        Ok(Self { k, groups })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn groups(&self) -> &[RewardMatrix] {
        &self.groups
    }

    pub fn rollout_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageResult {
    /// `A[i][j]` (the batch-standardized `A^L` in decoupled mode).
    pub advantages: Vec<Vec<f64>>,
    pub reward_weights: Vec<Vec<f64>>,
    /// `z[i][j][k]`, decoupled mode only.
    pub z: Option<Vec<Vec<Vec<f64>>>>,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `s_j = Σ_k λ_k r_j^(k)`.
pub fn scalarize(matrix: &RewardMatrix, weights: &[f64]) -> Result<Vec<f64>> {
    matrix
        .iter()
        .enumerate()
        .map(|(j, row)| {
            if row.len() != weights.len() {
                return Err(Error::contract(format!(
                    "rollout {j} has {} objectives but {} weights",
                    row.len(),
                    weights.len()
                )));
            }
            Ok(row.iter().zip(weights).map(|(r, w)| r * w).sum())
        })
        .collect()
}

/// `½ + ½·clip(A / Z_c, -1, 1)`.
pub fn map_to_reward_weight(a: f64, z_c: f64) -> f64 {
    0.5 + 0.5 * (a / z_c).clamp(-1.0, 1.0)
}

fn check_mode(cfg: &AdvantageConfig, want: AdvantageMode) -> Result<()> {
    if cfg.mode != want {
        return Err(Error::contract(format!(
            "{} pipeline called with mode {}",
            want.name(),
            cfg.mode.name()
        )));
    }
    Ok(())
}

fn weights_of(advantages: &[Vec<f64>], z_c: f64) -> Vec<Vec<f64>> {
    advantages
        .iter()
        .map(|g| g.iter().map(|&a| map_to_reward_weight(a, z_c)).collect())
        .collect()
}

pub fn scalar_first_advantage(batch: &RolloutBatch, cfg: &AdvantageConfig) -> Result<AdvantageResult> {
    check_mode(cfg, AdvantageMode::ScalarFirst)?;
    cfg.validate(batch.k)?;
    let scores: Vec<Vec<f64>> = batch
        .groups
        .iter()
        .map(|g| scalarize(g, &cfg.weights))
        .collect::<Result<_>>()?;
    let (_, sigma_global) = mean_std(scores.iter().flatten().copied());
    let advantages: Vec<Vec<f64>> = scores
        .iter()
        .map(|s| {
            let (mu, _) = mean_std(s.iter().copied());
            s.iter().map(|&v| (v - mu) / (sigma_global + cfg.epsilon)).collect()
        })
        .collect();
    Ok(AdvantageResult {
        reward_weights: weights_of(&advantages, cfg.z_c),
        advantages,
        z: None,
    })
}

pub fn decoupled_advantage(batch: &RolloutBatch, cfg: &AdvantageConfig) -> Result<AdvantageResult> {
    check_mode(cfg, AdvantageMode::Decoupled)?;
    cfg.validate(batch.k)?;
    let z: Vec<Vec<Vec<f64>>> = batch
        .groups
        .iter()
        .map(|g| {
            let stats: Vec<(f64, f64)> = (0..batch.k).map(|k| mean_std(g.iter().map(|row| row[k]))).collect();
            g.iter()
                .map(|row| {
                    row.iter()
                        .zip(&stats)
                        .map(|(&r, &(mu, sd))| (r - mu) / (sd + cfg.epsilon))
                        .collect()
                })
                .collect()
        })
        .collect();
    let fused: Vec<Vec<f64>> = z
        .iter()
        .map(|g| {
            g.iter()
                .map(|zs| zs.iter().zip(&cfg.weights).map(|(z, w)| w * z).sum())
                .collect()
        })
        .collect();
    let (mu_b, sd_b) = mean_std(fused.iter().flatten().copied());
    let advantages: Vec<Vec<f64>> = fused
        .iter()
        .map(|g| g.iter().map(|&a| (a - mu_b) / (sd_b + cfg.epsilon)).collect())
        .collect();
    Ok(AdvantageResult {
        reward_weights: weights_of(&advantages, cfg.z_c),
        advantages,
        z: Some(z),
    })
}

/// Dispatches on `cfg.mode`.
pub fn compute_advantage(batch: &RolloutBatch, cfg: &AdvantageConfig) -> Result<AdvantageResult> {
    match cfg.mode {
        AdvantageMode::ScalarFirst => scalar_first_advantage(batch, cfg),
        AdvantageMode::Decoupled => decoupled_advantage(batch, cfg),
    }
}

/// A reward table keyed by the group and rollout ids found in the file.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable {
    pub group_ids: Vec<String>,
    pub rollout_ids: Vec<Vec<String>>,
    pub batch: RolloutBatch,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        kind: "rewards csv",
        reason: e.to_string(),
    }
}

/// Reads `group_id, rollout_id, r_1..r_K`. Groups keep first-appearance order.
pub fn read_rewards_csv(reader: impl Read) -> Result<RewardTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let k = headers.len().saturating_sub(2);
    if headers.get(0) != Some("group_id") || headers.get(1) != Some("rollout_id") || k == 0 {
        return Err(Error::Format {
            kind: "rewards csv",
            reason: "header must be group_id,rollout_id,r_1..r_K".into(),
        });
    }
    let mut group_ids: Vec<String> = Vec::new();
    let mut rollout_ids: Vec<Vec<String>> = Vec::new();
    let mut groups: Vec<RewardMatrix> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let gid = rec.get(0).unwrap_or_default();
        let gi = match group_ids.iter().position(|g| g == gid) {
            Some(i) => i,
            None => {
                group_ids.push(gid.to_string());
                rollout_ids.push(Vec::new());
                groups.push(Vec::new());
                group_ids.len() - 1
            }
        };
        let row = (2..rec.len())
            .map(|c| {
                rec[c].trim().parse::<f64>().map_err(|_| Error::Format {
                    kind: "rewards csv",
                    reason: format!("row {}: `{}` is not a number", line + 2, &rec[c]),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rollout_ids[gi].push(rec.get(1).unwrap_or_default().to_string());
        groups[gi].push(row);
    }
    Ok(RewardTable {
        group_ids,
        rollout_ids,
        batch: RolloutBatch::new(groups)?,
    })
}

pub fn write_rewards_csv(table: &RewardTable, writer: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec!["group_id".to_string(), "rollout_id".to_string()];
    header.extend((1..=table.batch.k).map(|k| format!("r_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, g) in table.batch.groups.iter().enumerate() {
        for (j, row) in g.iter().enumerate() {
            let mut rec = vec![table.group_ids[i].clone(), table.rollout_ids[i][j].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Format {
        kind: "rewards csv",
        reason: e.to_string(),
    })
}

/// Rewards plus `z_1..z_K` (decoupled only), `advantage`, `reward_weight`.
pub fn write_advantage_csv(table: &RewardTable, result: &AdvantageResult, writer: impl Write) -> Result<()> {
    let k = table.batch.k;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec!["group_id".to_string(), "rollout_id".to_string()];
    header.extend((1..=k).map(|k| format!("r_{k}")));
    if result.z.is_some() {
        header.extend((1..=k).map(|k| format!("z_{k}")));
    }
    header.extend(["advantage".to_string(), "reward_weight".to_string()]);
    w.write_record(&header).map_err(csv_err)?;
    for (i, g) in table.batch.groups.iter().enumerate() {
        for (j, row) in g.iter().enumerate() {
            let mut rec = vec![table.group_ids[i].clone(), table.rollout_ids[i][j].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            if let Some(z) = &result.z {
                rec.extend(z[i][j].iter().map(|v| v.to_string()));
            }
            rec.push(result.advantages[i][j].to_string());
            rec.push(result.reward_weights[i][j].to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Format {
        kind: "advantage csv",
        reason: e.to_string(),
    })
}

/// A two-group batch where scalar-first flattens a trade-off that the
/// decoupled pipeline keeps. Returns the batch and the witness pair
/// `(group, j, j')`.
///
/// In group 0, rollout 0 wins objective 1 outright while rollout 1 edges it
/// on objective 2. Group 1 spreads objective 2 over a range of 100, which
/// dominates the batch-global std that scalar-first divides by.
pub fn collapse_witness() -> (RolloutBatch, (usize, usize, usize)) {
    let batch = RolloutBatch::new(vec![
        vec![vec![1.0, 0.0], vec![0.0, 0.1], vec![0.0, 10.0], vec![0.0, 0.0]],
        vec![vec![0.0, 0.0], vec![0.0, 100.0], vec![0.0, 0.0], vec![0.0, 100.0]],
    ])
    .expect("well-formed");
    (batch, (0, 0, 1))
}
