//! Advantage separability: distinct-level counts and top-1 gaps over
//! rollout groups, swept over the rollout count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advantage::{compute_advantage, scalarize, AdvantageConfig, AdvantageMode, RolloutBatch};
use crate::error::{Error, Result};
use crate::flowcore::VelocityModel;
use crate::nft::sample_rollout_groups;
use crate::rewards::{eval_rewards, RewardContext, RewardMatrix, RewardRegistry};
use crate::toyworld::ToyImage;

pub const DEFAULT_LEVEL_EPS: f64 = 1e-3;
pub const MAX_ROLLOUTS: usize = 16;

/// Number of clusters after sorting, where a new cluster starts at every
/// consecutive gap larger than `level_eps`.
pub fn dagc(values: &[f64], level_eps: f64) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::contract("dagc of an empty group"));
    }
    if !(level_eps > 0.0) {
        return Err(Error::Domain(format!("level_eps {level_eps} must be > 0")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(1 + v.windows(2).filter(|w| w[1] - w[0] > level_eps).count())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapPair {
    pub first: usize,
    pub second: usize,
    pub gap: f64,
}

/// The pair with the largest scalar reward difference (first in
/// lexicographic order on ties) and its advantage gap.
pub fn max_gap_pair(scores: &[f64], advantages: &[f64]) -> Result<GapPair> {
    if scores.len() < 2 {
        return Err(Error::contract(format!("max-gap pair needs M >= 2, got {}", scores.len())));
    }
    if scores.len() != advantages.len() {
        return Err(Error::Dimension {
            context: "advantages per rollout".into(),
            expected: scores.len(),
            found: advantages.len(),
        });
    }
    // Every maximizing pair holds one minimum and one maximum. The
    // lexicographically smallest starts at the first index holding either
    // extreme and ends at the next index holding the other one.
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let (first, second) = if max == min {
        (0, 1)
    } else {
        let first = scores.iter().position(|&s| s == max || s == min).expect("extremes exist");
        let other = if scores[first] == max { min } else { max };
        let second = first + 1 + scores[first + 1..].iter().position(|&s| s == other).expect("other extreme follows");
        (first, second)
    };
    Ok(GapPair {
        first,
        second,
        gap: (advantages[first] - advantages[second]).abs(),
    })
}

/// Which per-rollout quantity DAGC counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DagcBasis {
    /// Clipped reward weights in `[0, 1]`.
    RewardWeight,
    /// Advantages before the clip.
    Advantage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub modes: Vec<AdvantageMode>,
    pub rollout_counts: Vec<usize>,
    pub level_eps: f64,
    pub basis: DagcBasis,
    pub sample_steps: usize,
    pub z_c: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            modes: vec![AdvantageMode::ScalarFirst, AdvantageMode::Decoupled],
            rollout_counts: vec![2, 4, 8, 12, 16],
            level_eps: DEFAULT_LEVEL_EPS,
            basis: DagcBasis::RewardWeight,
            sample_steps: crate::flowcore::DEFAULT_SAMPLE_STEPS,
            z_c: crate::advantage::DEFAULT_Z_C,
            epsilon: crate::advantage::DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub mode: AdvantageMode,
    pub m: usize,
    pub group_id: usize,
    pub dagc: usize,
    pub top1_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub mode: AdvantageMode,
    pub m: usize,
    pub groups: usize,
    pub mean_dagc: f64,
    pub mean_top1_gap: f64,
    /// Hash of the raw reward matrices this mode was scored on.
    pub rewards_sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub level_eps: f64,
    /// Ordered by (mode, M, group_id) as given in the sweep config.
    pub groups: Vec<GroupRecord>,
    pub summary: Vec<SummaryRecord>,
}

impl SeparabilityReport {
    pub fn summary_for(&self, mode: AdvantageMode, m: usize) -> Option<&SummaryRecord> {
        self.summary.iter().find(|s| s.mode == mode && s.m == m)
    }
}

pub fn rewards_digest(groups: &[RewardMatrix]) -> String {
    let mut h = Sha256::new();
    for g in groups {
        for row in g {
            row.iter().for_each(|v| h.update(v.to_le_bytes()));
        }
    }
    hex::encode(h.finalize())
}

/// Scores one batch of reward matrices under every mode. `groups[i]` must
/// all have the same rollout count.
pub fn score_modes(
    groups: &[RewardMatrix],
    weights: &[f64],
    cfg: &SweepConfig,
) -> Result<Vec<(Vec<GroupRecord>, SummaryRecord)>> {
    let m = groups.first().map_or(0, |g| g.len());
    let batch = RolloutBatch::new(groups.to_vec())?;
    let scores: Vec<Vec<f64>> = groups.iter().map(|g| scalarize(g, weights)).collect::<Result<_>>()?;
    let digest = rewards_digest(groups);
    cfg.modes
        .iter()
        .map(|&mode| {
            let mut adv = AdvantageConfig::new(mode, weights.to_vec());
            adv.z_c = cfg.z_c;
            adv.epsilon = cfg.epsilon;
            let res = compute_advantage(&batch, &adv)?;
            let records: Vec<GroupRecord> = (0..groups.len())
                .map(|i| {
                    let basis = match cfg.basis {
                        DagcBasis::RewardWeight => &res.reward_weights[i],
                        DagcBasis::Advantage => &res.advantages[i],
                    };
                    Ok(GroupRecord {
                        mode,
                        m,
                        group_id: i,
                        dagc: dagc(basis, cfg.level_eps)?,
                        top1_gap: max_gap_pair(&scores[i], &res.advantages[i])?.gap,
                    })
                })
                .collect::<Result<_>>()?;
            let n = records.len() as f64;
            let summary = SummaryRecord {
                mode,
                m,
                groups: records.len(),
                mean_dagc: records.iter().map(|r| r.dagc as f64).sum::<f64>() / n,
                mean_top1_gap: records.iter().map(|r| r.top1_gap).sum::<f64>() / n,
                rewards_sha256: digest.clone(),
            };
            Ok((records, summary))
        })
        .collect()
}

/// Samples `max(M)` rollouts per input once; each M uses the first M, so all
/// modes and counts share rollouts.
pub fn separability_sweep(
    inputs: &[(usize, &ToyImage)],
    policy: &VelocityModel<f32>,
    registry: &RewardRegistry,
    ctx: &RewardContext,
    cfg: &SweepConfig,
) -> Result<SeparabilityReport> {
    if inputs.len() < 2 {
        return Err(Error::validation("groups", format!("{} inputs; need at least 2", inputs.len())));
    }
    if let Some(&m) = cfg.rollout_counts.iter().find(|&&m| !(2..=MAX_ROLLOUTS).contains(&m)) {
        return Err(Error::validation("m", format!("rollout count {m} outside [2, {MAX_ROLLOUTS}]")));
    }
    let m_max = cfg.rollout_counts.iter().copied().max().ok_or_else(|| Error::validation("m", "empty"))?;
    registry.check_context(ctx)?;
    let groups = sample_rollout_groups(policy, inputs, m_max, cfg.sample_steps, cfg.seed)?;
    let full: Vec<RewardMatrix> = groups
        .iter()
        .map(|g| eval_rewards(registry, ctx, &g.lr, &g.samples))
        .collect::<Result<_>>()?;
    sweep_rewards(&full, &registry.weights(), cfg)
}

/// The sweep on precomputed reward matrices (each with at least max(M) rows).
pub fn sweep_rewards(full: &[RewardMatrix], weights: &[f64], cfg: &SweepConfig) -> Result<SeparabilityReport> {
    let mut per_mode: BTreeMap<usize, (Vec<GroupRecord>, Vec<SummaryRecord>)> = BTreeMap::new();
    for &m in &cfg.rollout_counts {
        if full.iter().any(|g| g.len() < m) {
            return Err(Error::contract(format!("reward matrices shorter than M = {m}")));
        }
        let prefix: Vec<RewardMatrix> = full.iter().map(|g| g[..m].to_vec()).collect();
        for (k, (records, summary)) in score_modes(&prefix, weights, cfg)?.into_iter().enumerate() {
            let slot = per_mode.entry(k).or_default();
            slot.0.extend(records);
            slot.1.push(summary);
        }
    }
    let mut report = SeparabilityReport {
        level_eps: cfg.level_eps,
        ..Default::default()
    };
    for (_, (g, s)) in per_mode {
        report.groups.extend(g);
        report.summary.extend(s);
    }
    Ok(report)
}

/// Nine significant digits.
pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

pub fn groups_csv(report: &SeparabilityReport) -> String {
    let mut s = String::from("mode,M,group_id,dagc,top1_gap\n");
    for r in &report.groups {
        let _ = writeln!(s, "{},{},{},{},{}", r.mode.name(), r.m, r.group_id, r.dagc, fmt_sig9(r.top1_gap));
    }
    s
}

pub fn summary_csv(report: &SeparabilityReport) -> String {
    let mut s = String::from("mode,M,groups,mean_dagc,mean_top1_gap,rewards_sha256\n");
    for r in &report.summary {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.mode.name(),
            r.m,
            r.groups,
            fmt_sig9(r.mean_dagc),
            fmt_sig9(r.mean_top1_gap),
            r.rewards_sha256
        );
    }
    s
}

pub const GROUPS_FILE: &str = "separability.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Writes both CSVs into `dir`, creating it if needed.
pub fn emit_report(report: &SeparabilityReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = dir.join(GROUPS_FILE);
    std::fs::write(&g, groups_csv(report)).map_err(|e| Error::io(&g, e))?;
    let s = dir.join(SUMMARY_FILE);
    std::fs::write(&s, summary_csv(report)).map_err(|e| Error::io(&s, e))?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    rec.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format {
            kind: "separability csv".into(),
            reason: format!("bad {what} in line {:?}", rec.position().map(|p| p.line())),
        })
}

/// Parses the per-group CSV back.
pub fn read_groups_csv(text: &str) -> Result<Vec<GroupRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok(GroupRecord {
                mode: parse_field(&rec, 0, "mode")?,
                m: parse_field(&rec, 1, "M")?,
                group_id: parse_field(&rec, 2, "group_id")?,
                dagc: parse_field(&rec, 3, "dagc")?,
                top1_gap: parse_field(&rec, 4, "top1_gap")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dagc_examples() {
        assert_eq!(dagc(&[0.4; 5], 1e-3).unwrap(), 1);
        assert_eq!(dagc(&[0.0, 1.0, 2.0], 0.1).unwrap(), 3);
        assert_eq!(dagc(&[0.0, 0.05, 1.0], 0.1).unwrap(), 2);
        assert!(dagc(&[], 0.1).is_err());
        assert!(dagc(&[1.0], 0.0).is_err());
    }

    #[test]
    fn max_gap_examples() {
        let g = max_gap_pair(&[3.0, 1.0], &[0.7, -0.2]).unwrap();
        assert_eq!((g.first, g.second), (0, 1));
        assert!((g.gap - 0.9).abs() < 1e-15);
        let (a, b) = (0.25, -1.5);
        let g = max_gap_pair(&[0.0, 0.0, 10.0], &[a, a, b]).unwrap();
        assert_eq!((g.first, g.second), (0, 2));
        assert_eq!(g.gap, (a - b).abs());
        assert!(matches!(max_gap_pair(&[1.0], &[0.0]), Err(Error::Contract(_))));
    }

    fn brute_force(scores: &[f64], adv: &[f64]) -> (usize, usize, f64) {
        let mut best = (0, 1, -1.0);
        for j in 0..scores.len() {
            for k in j + 1..scores.len() {
                let d = (scores[j] - scores[k]).abs();
                if d > best.2 {
                    best = (j, k, d);
                }
            }
        }
        (best.0, best.1, (adv[best.0] - adv[best.1]).abs())
    }

    proptest! {
        #[test]
        fn max_gap_matches_exhaustive_pairs(
            // Small integer grids force ties on the extremes.
            scores in prop::collection::vec(0i32..4, 2..16),
            noise in prop::collection::vec(-3.0f64..3.0, 16),
        ) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let a = &noise[..s.len()];
            let g = max_gap_pair(&s, a).unwrap();
            let (j, k, gap) = brute_force(&s, a);
            prop_assert_eq!((g.first, g.second), (j, k));
            prop_assert_eq!(g.gap, gap);
        }

        #[test]
        fn max_gap_matches_exhaustive_pairs_continuous(
            s in prop::collection::vec(-5.0f64..5.0, 2..16),
            noise in prop::collection::vec(-3.0f64..3.0, 16),
        ) {
            let a = &noise[..s.len()];
            let g = max_gap_pair(&s, a).unwrap();
            let (j, k, gap) = brute_force(&s, a);
            prop_assert_eq!((g.first, g.second), (j, k));
            prop_assert_eq!(g.gap, gap);
        }

        #[test]
        fn dagc_bounded_and_permutation_invariant(
            v in prop::collection::vec(0.0f64..1.0, 1..17),
            rot in 0usize..16,
            eps in 1e-4f64..0.2,
        ) {
            let d = dagc(&v, eps).unwrap();
            prop_assert!(d >= 1 && d <= v.len());
            let mut w = v.clone();
            let n = w.len();
            w.rotate_left(rot % n);
            w.reverse();
            prop_assert_eq!(dagc(&w, eps).unwrap(), d);
        }
    }

    fn synthetic(groups: usize, m: usize) -> Vec<RewardMatrix> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        (0..groups)
            .map(|_| (0..m).map(|_| vec![rng.random_range(0.0..1.0), 10.0 * rng.random_range(0.0..1.0)]).collect())
            .collect()
    }

    #[test]
    fn sweep_sizes_and_bounds() {
        let full = synthetic(7, 16);
        let cfg = SweepConfig::default();
        let r = sweep_rewards(&full, &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(r.groups.len(), 2 * 5 * 7);
        assert_eq!(r.summary.len(), 2 * 5);
        for g in &r.groups {
            assert!(g.dagc >= 1 && g.dagc <= g.m && g.top1_gap >= 0.0);
        }
        let two: Vec<_> = r.groups.iter().filter(|g| g.m == 2).collect();
        assert!(two.iter().all(|g| g.dagc <= 2));
        // Ordered by mode, then M, then group.
        let keys: Vec<_> = r.groups.iter().map(|g| (g.mode as u8, g.m, g.group_id)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn modes_see_identical_rewards() {
        let r = sweep_rewards(&synthetic(5, 16), &[1.0, 1.0], &SweepConfig::default()).unwrap();
        for m in [2, 4, 8, 12, 16] {
            let a = r.summary_for(AdvantageMode::ScalarFirst, m).unwrap();
            let b = r.summary_for(AdvantageMode::Decoupled, m).unwrap();
            assert_eq!(a.rewards_sha256, b.rewards_sha256);
        }
        assert_ne!(
            r.summary_for(AdvantageMode::Decoupled, 2).unwrap().rewards_sha256,
            r.summary_for(AdvantageMode::Decoupled, 4).unwrap().rewards_sha256
        );
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = SeparabilityReport::default();
        assert_eq!(groups_csv(&r), "mode,M,group_id,dagc,top1_gap\n");
        assert_eq!(summary_csv(&r).lines().count(), 1);
    }

    #[test]
    fn csv_round_trip_to_nine_digits() {
        let r = sweep_rewards(&synthetic(6, 16), &[1.0, 1.0], &SweepConfig::default()).unwrap();
        let text = groups_csv(&r);
        let back = read_groups_csv(&text).unwrap();
        assert_eq!(back.len(), r.groups.len());
        for (a, b) in r.groups.iter().zip(&back) {
            assert_eq!((a.mode, a.m, a.group_id, a.dagc), (b.mode, b.m, b.group_id, b.dagc));
            assert_eq!(b.top1_gap, fmt_sig9(a.top1_gap).parse::<f64>().unwrap());
            assert!((a.top1_gap - b.top1_gap).abs() <= 5e-9 * a.top1_gap.abs());
        }
        let again = SeparabilityReport { groups: back, ..r.clone() };
        assert_eq!(groups_csv(&again), text);
    }

    #[test]
    fn emit_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = sweep_rewards(&synthetic(3, 16), &[1.0, 1.0], &SweepConfig::default()).unwrap();
        emit_report(&r, &dir.path().join("out")).unwrap();
        let g = std::fs::read_to_string(dir.path().join("out").join(GROUPS_FILE)).unwrap();
        assert_eq!(g.lines().count(), 1 + r.groups.len());
        assert!(!g.contains('\r'));
    }
}
