//! Negative-aware fine-tuning on rollout groups.
//!
//! Each outer iteration freezes `v_old` from the EMA weights, samples `M`
//! restorations per degraded input from it, scores them, turns the scores
//! into reward weights `r ∈ [0, 1]`, and then fits the current policy with
//!
//! ```text
//! w(r)‖v⁺ − v‖² + (1 − r)‖v⁻ − v‖² + κ‖v_θ − v_old‖²
//! v⁺ = (1 − β)v_old + βv_θ,   v⁻ = (1 + β)v_old − βv_θ
//! ```
//!
//! on straight paths from each rollout's own output `x0` to fresh noise,
//! where `w(r)` is 1 or `r` (see [`PositiveWeight`]).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{compute_advantage, AdvantageConfig, AdvantageMode, RolloutBatch};
use crate::error::{Error, Result};
use crate::flowcore::{initial_noise, integrate, standard_normal, FlowBatch, VelocityModel, DEFAULT_SAMPLE_STEPS};
use crate::numerics::rng::{derive_seed, stream};
use crate::numerics::{ema_update, AdamW, AdamWConfig, BoundMlp, Scalar, Tape, Tensor, Var};
use crate::rewards::{eval_rewards, ObjectiveId, RewardContext, RewardMatrix, RewardRegistry};
use crate::toyworld::{Corpus, Split, ToyImage};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_EMA_DECAY: f64 = 0.9;
pub const DEFAULT_KL_WEIGHT: f64 = 1e-4;
pub const DEFAULT_ROLLOUTS: usize = 12;

const ROLLOUT_STREAM: u64 = 0x1201;

/// `(v⁺, v⁻)` from old and current velocity outputs.
pub fn implicit_policies<T: Scalar>(v_old: &[T], v_theta: &[T], beta: f64) -> Result<(Vec<T>, Vec<T>)> {
    if v_old.len() != v_theta.len() {
        return Err(Error::Dimension {
            context: "implicit policies".into(),
            expected: v_old.len(),
            found: v_theta.len(),
        });
    }
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta {beta} must be > 0")));
    }
    let (b, one) = (T::of(beta), T::one());
    let plus = v_old.iter().zip(v_theta).map(|(&o, &n)| (one - b) * o + b * n).collect();
    let minus = v_old.iter().zip(v_theta).map(|(&o, &n)| (one + b) * o - b * n).collect();
    Ok((plus, minus))
}

/// Weight on the positive term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveWeight {
    /// `‖v⁺ − v‖² + (1 − r)‖v⁻ − v‖²`. At `r = 0.5` the optimum still moves
    /// `v_θ` by `(v − v_old) / 3β`, so every rollout is imitated.
    Unit,
    /// `r‖v⁺ − v‖² + (1 − r)‖v⁻ − v‖²`, neutral at `r = 0.5`.
    Reward,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NftParams {
    pub beta: f64,
    pub kl_weight: f64,
    pub positive: PositiveWeight,
}

impl Default for NftParams {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            kl_weight: DEFAULT_KL_WEIGHT,
            positive: PositiveWeight::Reward,
        }
    }
}

/// Handles into the taped objective, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct NftTerms {
    pub loss: Var,
    pub v_theta: Var,
    pub v_old: Var,
}

fn check_weights(r: &[f64], rows: usize) -> Result<()> {
    if r.len() != rows {
        return Err(Error::Dimension {
            context: "reward weights per rollout".into(),
            expected: rows,
            found: r.len(),
        });
    }
    if let Some(bad) = r.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::contract(format!("reward weight {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Taped contrastive objective. `batch.x0` holds rollout outputs of `old`.
pub fn nft_loss_taped<T: Scalar>(
    theta: &VelocityModel<T>,
    tape: &mut Tape<T>,
    bound: &BoundMlp,
    old: &VelocityModel<T>,
    batch: &FlowBatch<T>,
    r: &[f64],
    params: NftParams,
) -> Result<NftTerms> {
    if batch.is_empty() {
        return Err(Error::contract("nft batch is empty"));
    }
    check_weights(r, batch.len())?;
    if !(params.beta > 0.0 && params.beta <= 1.0) {
        return Err(Error::Domain(format!("beta {} not in (0, 1]", params.beta)));
    }
    let (xt, v) = batch.path_and_target()?;
    let old_out = old.predict(&xt, &batch.t, &batch.c)?;
    let b = T::of(params.beta);
    let one = T::one();

    let v_old = tape.constant(old_out.clone());
    let v_theta = theta.predict_taped(tape, bound, &xt, &batch.t, &batch.c)?;
    let target = tape.constant(v);
    let scaled = tape.scale(v_theta, b);

    let old_pos = tape.constant(old_out.map(|o| (one - b) * o));
    let plus = tape.add(old_pos, scaled)?;
    let old_neg = tape.constant(old_out.map(|o| (one + b) * o));
    let minus = tape.sub(old_neg, scaled)?;

    let d_plus = tape.sub(plus, target)?;
    let mut pos = tape.row_sum_sq(d_plus)?;
    if params.positive == PositiveWeight::Reward {
        let pos_w = tape.constant(Tensor::vector(r.iter().map(|&w| T::of(w)).collect()));
        pos = tape.mul(pos, pos_w)?;
    }
    let d_minus = tape.sub(minus, target)?;
    let neg = tape.row_sum_sq(d_minus)?;
    let neg_w = tape.constant(Tensor::vector(r.iter().map(|&w| T::of(1.0 - w)).collect()));
    let neg = tape.mul(neg, neg_w)?;
    let mut per_row = tape.add(pos, neg)?;
    if params.kl_weight != 0.0 {
        let drift = tape.sub(v_theta, v_old)?;
        let drift = tape.row_sum_sq(drift)?;
        let drift = tape.scale(drift, T::of(params.kl_weight));
        per_row = tape.add(per_row, drift)?;
    }
    let loss = tape.mean(per_row);
    Ok(NftTerms { loss, v_theta, v_old })
}

/// Untracked value of the same objective.
pub fn nft_loss<T: Scalar>(
    theta: &VelocityModel<T>,
    old: &VelocityModel<T>,
    batch: &FlowBatch<T>,
    r: &[f64],
    params: NftParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = theta.net().bind_with(&mut tape, false);
    let terms = nft_loss_taped(theta, &mut tape, &bound, old, batch, r, params)?;
    Ok(tape.value(terms.loss).item().to_f64().unwrap())
}

/// Current policy, frozen old policy and the EMA shadow refreshed into it.
#[derive(Clone, Debug)]
pub struct PolicyPair {
    pub theta: VelocityModel<f32>,
    pub old: VelocityModel<f32>,
    pub ema: VelocityModel<f32>,
    pub ema_decay: f64,
    pub params: NftParams,
}

impl PolicyPair {
    pub fn new(base: VelocityModel<f32>, params: NftParams, ema_decay: f64) -> Result<Self> {
        if !(params.beta > 0.0 && params.beta <= 1.0) {
            return Err(Error::validation("beta", format!("{} not in (0, 1]", params.beta)));
        }
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(Error::validation("ema_decay", format!("{ema_decay} not in [0, 1)")));
        }
        Ok(Self {
            old: base.clone(),
            ema: base.clone(),
            theta: base,
            ema_decay,
            params,
        })
    }

    pub fn refresh_old(&mut self) {
        self.old = self.ema.clone();
    }

    pub fn update_ema(&mut self) {
        let src: Vec<&Tensor<f32>> = self.theta.net().params().collect();
        ema_update(&mut self.ema.net_mut().params_mut(), &src, self.ema_decay);
    }
}

/// Euclidean distance between two networks' parameter vectors.
pub fn parameter_distance(a: &VelocityModel<f32>, b: &VelocityModel<f32>) -> f64 {
    a.net()
        .params()
        .zip(b.net().params())
        .flat_map(|(p, q)| p.data().iter().zip(q.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// M restorations of one degraded input.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    /// Corpus index of the input.
    pub input: usize,
    pub lr: ToyImage,
    pub seeds: Vec<u64>,
    /// Trajectory endpoints, clamped to `[0, 1]`.
    pub samples: Vec<ToyImage>,
    pub rewards: RewardMatrix,
    pub weights: Vec<f64>,
}

pub fn rollout_seed(seed: u64, group: usize, rollout: usize) -> u64 {
    derive_seed(seed, &[ROLLOUT_STREAM, group as u64, rollout as u64])
}

fn sample_group(v_old: &VelocityModel<f32>, lr: &ToyImage, seeds: &[u64], steps: usize) -> Result<Vec<ToyImage>> {
    let d = lr.len();
    let c = Tensor::stack_rows(&vec![lr.pixels(); seeds.len()])?;
    let mut x1 = Vec::with_capacity(seeds.len() * d);
    seeds.iter().for_each(|&s| x1.extend(initial_noise(s, d)));
    let x = integrate(v_old, Tensor::matrix(seeds.len(), d, x1)?, &c, steps)?;
    (0..seeds.len())
        .map(|j| ToyImage::from_clamped(lr.width(), lr.height(), x.row(j).to_vec()))
        .collect()
}

/// Rollout `(i, j)` integrates from noise seeded by `(seed, i, j)`; only
/// `v_old` is ever evaluated.
pub fn sample_rollout_groups(
    v_old: &VelocityModel<f32>,
    inputs: &[(usize, &ToyImage)],
    m: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<RolloutGroup>> {
    if m < 2 {
        return Err(Error::validation("rollouts", format!("{m} per group; need at least 2")));
    }
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, &(input, lr))| {
            let seeds: Vec<u64> = (0..m).map(|j| rollout_seed(seed, i, j)).collect();
            let samples = sample_group(v_old, lr, &seeds, steps).map_err(|e| {
                // Locate the failing rollout by re-running the group row by row.
                let j = seeds
                    .iter()
                    .position(|s| sample_group(v_old, lr, &[*s], steps).is_err())
                    .unwrap_or(0);
                Error::Rollout {
                    group: i,
                    rollout: j,
                    source: Box::new(e),
                }
            })?;
            Ok(RolloutGroup {
                input,
                lr: lr.clone(),
                seeds,
                samples,
                rewards: Vec::new(),
                weights: Vec::new(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Quality reward alone with scalar-first normalization.
    IqaOnly,
    Scalar,
    Decoupled,
}

impl FinetuneMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::IqaOnly => "iqa-only",
            Self::Scalar => "scalar",
            Self::Decoupled => "decoupled",
        }
    }
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iqa-only" | "iqa_only" => Ok(Self::IqaOnly),
            "scalar" | "scalar_first" => Ok(Self::Scalar),
            "decoupled" => Ok(Self::Decoupled),
            other => Err(Error::validation("mode", format!("unknown fine-tuning mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub outer_iters: usize,
    pub inner_steps: usize,
    /// Degraded inputs sampled per outer iteration.
    pub groups: usize,
    pub rollouts: usize,
    pub sample_steps: usize,
    /// Rollouts per inner optimization step.
    pub minibatch: usize,
    pub lr: f64,
    pub z_c: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Decoupled,
            outer_iters: 75,
            inner_steps: 8,
            groups: 16,
            rollouts: DEFAULT_ROLLOUTS,
            sample_steps: DEFAULT_SAMPLE_STEPS,
            minibatch: 48,
            lr: 1e-5,
            z_c: crate::advantage::DEFAULT_Z_C,
            epsilon: crate::advantage::DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub mean_quality: f64,
    pub mean_consistency: f64,
    pub mean_reward_weight: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneTrace {
    pub rows: Vec<TraceRow>,
}

impl FinetuneTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,mean_quality,mean_consistency,mean_reward_weight,loss\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iter, r.mean_quality, r.mean_consistency, r.mean_reward_weight, r.loss
            ));
        }
        s
    }
}

/// Registry and advantage config actually used for a mode.
pub fn mode_setup(mode: FinetuneMode, registry: &RewardRegistry, cfg: &FinetuneConfig) -> Result<(RewardRegistry, AdvantageConfig)> {
    let (reg, adv_mode) = match mode {
        FinetuneMode::IqaOnly => {
            let k = registry
                .position(ObjectiveId::Quality)
                .ok_or_else(|| Error::Config("iqa-only mode needs a quality objective".into()))?;
            let q = registry.objectives()[k].clone();
            (RewardRegistry::new(vec![q])?, AdvantageMode::ScalarFirst)
        }
        FinetuneMode::Scalar => (registry.clone(), AdvantageMode::ScalarFirst),
        FinetuneMode::Decoupled => (registry.clone(), AdvantageMode::Decoupled),
    };
    let mut adv = AdvantageConfig::new(adv_mode, reg.weights());
    adv.z_c = cfg.z_c;
    adv.epsilon = cfg.epsilon;
    Ok((reg, adv))
}

/// Scores every group and fills in rewards and reward weights.
pub fn score_groups(
    groups: &mut [RolloutGroup],
    registry: &RewardRegistry,
    ctx: &RewardContext,
    adv: &AdvantageConfig,
) -> Result<()> {
    let matrices: Vec<RewardMatrix> = groups
        .par_iter()
        .map(|g| eval_rewards(registry, ctx, &g.lr, &g.samples))
        .collect::<Result<_>>()?;
    let result = compute_advantage(&RolloutBatch::new(matrices.clone())?, adv)?;
    for ((g, m), w) in groups.iter_mut().zip(matrices).zip(result.reward_weights) {
        g.rewards = m;
        g.weights = w;
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Mean quality and consistency rewards over all samples; NaN when the
/// context lacks the state for one of them.
fn monitor(groups: &[RolloutGroup], ctx: &RewardContext) -> Result<(f64, f64)> {
    let q = match &ctx.quality {
        Some(r) => mean(groups.iter().flat_map(|g| g.samples.iter().map(|s| r.score(s)))),
        None => f64::NAN,
    };
    let c = match &ctx.consistency {
        Some(m) => {
            let scores: Vec<f64> = groups
                .iter()
                .flat_map(|g| g.samples.iter().map(move |s| (g, s)))
                .map(|(g, s)| m.score(&g.lr, s).map(|c| 0.5 * (c + 1.0)))
                .collect::<Result<_>>()?;
            mean(scores.into_iter())
        }
        None => f64::NAN,
    };
    Ok((q, c))
}

/// Runs the outer/inner loop on the corpus train split.
pub fn finetune(
    pair: &mut PolicyPair,
    corpus: &Corpus,
    registry: &RewardRegistry,
    ctx: &RewardContext,
    cfg: &FinetuneConfig,
) -> Result<FinetuneTrace> {
    let (reg, adv) = mode_setup(cfg.mode, registry, cfg)?;
    reg.check_context(ctx)?;
    let train = corpus.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::validation("corpus", "no train split"));
    }
    if cfg.groups == 0 || cfg.minibatch == 0 {
        return Err(Error::validation("groups/minibatch", "must be positive"));
    }
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr));
    let mut trace = FinetuneTrace::default();
    for iter in 0..cfg.outer_iters {
        let wrap = |e: Error| Error::Finetune {
            iteration: iter,
            source: Box::new(e),
        };
        pair.refresh_old();
        let mut rng = stream(cfg.seed, &[0xf7, iter as u64]);
        let picks: Vec<usize> = (0..cfg.groups).map(|_| train[rng.random_range(0..train.len())]).collect();
        let inputs: Vec<(usize, &ToyImage)> = picks.iter().map(|&i| (i, &corpus.pairs()[i].degraded)).collect();
        let group_seed = derive_seed(cfg.seed, &[0x5a, iter as u64]);
        let mut groups =
            sample_rollout_groups(&pair.old, &inputs, cfg.rollouts, cfg.sample_steps, group_seed).map_err(wrap)?;
        score_groups(&mut groups, &reg, ctx, &adv).map_err(wrap)?;
        let (mq, mc) = monitor(&groups, ctx).map_err(wrap)?;

        let pool: Vec<(&ToyImage, &ToyImage, f64)> = groups
            .iter()
            .flat_map(|g| g.samples.iter().zip(&g.weights).map(move |(s, &w)| (&g.lr, s, w)))
            .collect();
        let d = corpus.pixel_count();
        let mut loss_sum = 0.0;
        for step in 0..cfg.inner_steps {
            let mut rng = stream(cfg.seed, &[0x1e, iter as u64, step as u64]);
            let b = cfg.minibatch.min(pool.len());
            let idx = rand::seq::index::sample(&mut rng, pool.len(), b);
            let (mut x0, mut c, mut r, mut t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in idx.iter() {
                let (lr, s, w) = pool[i];
                x0.extend_from_slice(s.pixels());
                c.extend_from_slice(lr.pixels());
                r.push(w);
                t.push(rng.random_range(0.0..=1.0));
            }
            let batch = FlowBatch {
                x0: Tensor::matrix(b, d, x0).map_err(wrap)?,
                x1: Tensor::matrix(b, d, standard_normal(&mut rng, b * d)).map_err(wrap)?,
                t,
                c: Tensor::matrix(b, d, c).map_err(wrap)?,
            };
            let mut tape = Tape::new();
            let bound = pair.theta.net().bind(&mut tape);
            let terms =
                nft_loss_taped(&pair.theta, &mut tape, &bound, &pair.old, &batch, &r, pair.params).map_err(wrap)?;
            let value = tape.value(terms.loss).item() as f64;
            if !value.is_finite() {
                return Err(wrap(Error::Divergence { step, loss: value }));
            }
            tape.backward(terms.loss).map_err(wrap)?;
            let grads = bound.grads(&tape);
            drop(tape);
            opt.step(&mut pair.theta.net_mut().params_mut(), &grads).map_err(wrap)?;
            pair.update_ema();
            loss_sum += value;
        }
        trace.rows.push(TraceRow {
            iter,
            mean_quality: mq,
            mean_consistency: mc,
            mean_reward_weight: mean(groups.iter().flat_map(|g| g.weights.iter().copied())),
            loss: if cfg.inner_steps > 0 { loss_sum / cfg.inner_steps as f64 } else { f64::NAN },
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(d: usize, seed: u64) -> VelocityModel<f64> {
        VelocityModel::new(d, &[8], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch(d: usize, b: usize, seed: u64) -> FlowBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |lo: f64, hi: f64| Tensor::from_fn(&[b, d], |_| rng.random_range(lo..hi));
        FlowBatch {
            x0: m(0.0, 1.0),
            x1: m(-2.0, 2.0),
            c: m(0.0, 1.0),
            t: (0..b).map(|i| (i as f64 + 0.5) / b as f64).collect(),
        }
    }

    #[test]
    fn implicit_policy_examples() {
        let (p, m) = implicit_policies(&[1.0f64], &[2.0], 0.1).unwrap();
        assert!((p[0] - 1.1).abs() < 1e-15 && (m[0] - 0.9).abs() < 1e-15);
        let (p, m) = implicit_policies(&[0.3f64, -2.0], &[0.3, -2.0], 0.4).unwrap();
        for (got, want) in p.iter().chain(&m).zip([0.3, -2.0, 0.3, -2.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(implicit_policies(&[1.0f64], &[1.0], 0.0).is_err());
    }

    #[test]
    fn unit_weights_drop_the_negative_term() {
        let (theta, old) = (model(3, 1), model(3, 2));
        let b = batch(3, 4, 3);
        let p = NftParams { beta: 0.1, kl_weight: 0.0, positive: PositiveWeight::Unit };
        let got = nft_loss(&theta, &old, &b, &[1.0; 4], p).unwrap();
        let (xt, v) = b.path_and_target().unwrap();
        let vo = old.predict(&xt, &b.t, &b.c).unwrap();
        let vn = theta.predict(&xt, &b.t, &b.c).unwrap();
        let (plus, _) = implicit_policies(vo.data(), vn.data(), 0.1).unwrap();
        let want = plus.iter().zip(v.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
        assert!((got - want).abs() < 1e-10 * want);
    }

    fn fixed_point(positive: PositiveWeight) -> (f64, Vec<f64>, [f64; 4]) {
        let old = model(3, 2);
        let b = batch(3, 4, 5);
        let r = [0.0, 0.25, 0.5, 1.0];
        let p = NftParams { beta: 0.3, kl_weight: 0.0, positive };
        let got = nft_loss(&old, &old, &b, &r, p).unwrap();
        let (xt, v) = b.path_and_target().unwrap();
        let vo = old.predict(&xt, &b.t, &b.c).unwrap();
        let err = (0..4).map(|i| vo.row(i).iter().zip(v.row(i)).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        (got, err, r)
    }

    #[test]
    fn fixed_point_loss_is_two_minus_r_times_error() {
        let (got, err, r) = fixed_point(PositiveWeight::Unit);
        let want = (0..4).map(|i| (2.0 - r[i]) * err[i]).sum::<f64>() / 4.0;
        assert!((got - want).abs() < 1e-10 * want);
    }

    #[test]
    fn reward_weighted_fixed_point_is_plain_error() {
        let (got, err, _) = fixed_point(PositiveWeight::Reward);
        let want = err.iter().sum::<f64>() / 4.0;
        assert!((got - want).abs() < 1e-10 * want);
    }

    #[test]
    fn neutral_weights_keep_the_term_ratio() {
        // With r = 0.5 everywhere the loss is exactly pos + 0.5·neg (unit)
        // or 0.5·pos + 0.5·neg (reward), with no renormalization.
        let (theta, old) = (model(3, 1), model(3, 2));
        let b = batch(3, 4, 8);
        let (xt, v) = b.path_and_target().unwrap();
        let vo = old.predict(&xt, &b.t, &b.c).unwrap();
        let vn = theta.predict(&xt, &b.t, &b.c).unwrap();
        let (plus, minus) = implicit_policies(vo.data(), vn.data(), 0.1).unwrap();
        let sq = |p: &[f64]| p.iter().zip(v.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
        let (pos, neg) = (sq(&plus), sq(&minus));
        for (positive, wp) in [(PositiveWeight::Unit, 1.0), (PositiveWeight::Reward, 0.5)] {
            let p = NftParams { beta: 0.1, kl_weight: 0.0, positive };
            let got = nft_loss(&theta, &old, &b, &[0.5; 4], p).unwrap();
            let want = wp * pos + 0.5 * neg;
            assert!((got - want).abs() < 1e-10 * want, "{positive:?}");
        }
    }

    #[test]
    fn weights_outside_unit_interval_are_rejected() {
        let m = model(2, 0);
        let b = batch(2, 2, 0);
        for bad in [[-0.1, 0.5], [0.5, 1.5]] {
            assert!(matches!(nft_loss(&m, &m, &b, &bad, NftParams::default()), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn old_policy_outputs_carry_no_gradient() {
        let (theta, old) = (model(3, 1), model(3, 2));
        let b = batch(3, 4, 3);
        let mut tape = Tape::new();
        let bound = theta.net().bind(&mut tape);
        let terms = nft_loss_taped(&theta, &mut tape, &bound, &old, &b, &[0.5; 4], NftParams::default()).unwrap();
        assert!(!tape.requires_grad(terms.v_old));
        assert!(tape.requires_grad(terms.v_theta));
        tape.backward(terms.loss).unwrap();
        assert!(tape.grad(terms.v_old).is_none());
    }

    fn grad_norm(beta: f64) -> f64 {
        let (theta, old) = (model(3, 1), model(3, 2));
        let b = batch(3, 6, 4);
        let mut tape = Tape::new();
        let bound = theta.net().bind(&mut tape);
        let p = NftParams { beta, kl_weight: 0.0, ..NftParams::default() };
        let r = [0.1, 0.9, 0.5, 0.3, 0.7, 0.2];
        let terms = nft_loss_taped(&theta, &mut tape, &bound, &old, &b, &r, p).unwrap();
        tape.backward(terms.loss).unwrap();
        bound.grads(&tape).iter().map(|g| g.as_ref().unwrap().squared_norm()).sum::<f64>().sqrt()
    }

    #[test]
    fn gradient_vanishes_as_beta_goes_to_zero() {
        let small = grad_norm(1e-6);
        let base = grad_norm(0.1);
        assert!(small < 1e-3 * base, "{small} vs {base}");
    }

    #[test]
    fn identity_of_the_implicit_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let o: Vec<f64> = (0..16).map(|_| rng.random_range(-10.0..10.0)).collect();
            let n: Vec<f64> = (0..16).map(|_| rng.random_range(-10.0..10.0)).collect();
            let beta = rng.random_range(1e-6..1.0);
            let (p, m) = implicit_policies(&o, &n, beta).unwrap();
            for k in 0..16 {
                let lhs = p[k] + m[k];
                assert!((lhs - 2.0 * o[k]).abs() <= 4.0 * f64::EPSILON * (o[k].abs() + n[k].abs()).max(1.0));
            }
        }
    }

    fn tiny_policy() -> VelocityModel<f32> {
        VelocityModel::new(16, &[16], &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn rollouts_are_seeded_per_index() {
        let m = tiny_policy();
        let lr = ToyImage::constant(4, 4, 0.4);
        let a = sample_rollout_groups(&m, &[(0, &lr), (1, &lr)], 2, 6, 9).unwrap();
        let b = sample_rollout_groups(&m, &[(0, &lr), (1, &lr)], 2, 6, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].samples[0], a[0].samples[1]);
        assert_ne!(a[0].samples[0], a[1].samples[0]);
        assert!(matches!(sample_rollout_groups(&m, &[(0, &lr)], 1, 6, 9), Err(Error::Validation { .. })));
    }

    #[test]
    fn rollouts_ignore_the_current_policy() {
        // Only v_old is passed to the sampler; changing theta cannot matter.
        let base = tiny_policy();
        let mut pair = PolicyPair::new(base.clone(), NftParams::default(), 0.9).unwrap();
        let lr = ToyImage::constant(4, 4, 0.4);
        let before = sample_rollout_groups(&pair.old, &[(0, &lr)], 3, 6, 1).unwrap();
        pair.theta.net_mut().params_mut()[0].data_mut()[0] += 5.0;
        let after = sample_rollout_groups(&pair.old, &[(0, &lr)], 3, 6, 1).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_outer_iterations_leave_the_policy() {
        use crate::toyworld::{corpus::build_corpus_sized, Profile, SpecDistribution};
        let corpus = build_corpus_sized(20, &SpecDistribution::profile(Profile::Easy), 0, 4).unwrap();
        let base = tiny_policy();
        let mut pair = PolicyPair::new(base.clone(), NftParams::default(), 0.9).unwrap();
        let reg = RewardRegistry::parse("mean_intensity,contrast").unwrap();
        let cfg = FinetuneConfig {
            outer_iters: 0,
            ..FinetuneConfig::default()
        };
        let trace = finetune(&mut pair, &corpus, &reg, &RewardContext::default(), &cfg).unwrap();
        assert!(trace.rows.is_empty());
        assert_eq!(pair.theta, base);
    }

    #[test]
    fn finetune_is_reproducible() {
        use crate::toyworld::{corpus::build_corpus_sized, Profile, SpecDistribution};
        let corpus = build_corpus_sized(20, &SpecDistribution::profile(Profile::Easy), 0, 4).unwrap();
        let reg = RewardRegistry::parse("mean_intensity,contrast").unwrap();
        let cfg = FinetuneConfig {
            outer_iters: 2,
            inner_steps: 2,
            groups: 3,
            rollouts: 4,
            minibatch: 6,
            ..FinetuneConfig::default()
        };
        let run = || {
            let mut pair = PolicyPair::new(tiny_policy(), NftParams::default(), 0.9).unwrap();
            let t = finetune(&mut pair, &corpus, &reg, &RewardContext::default(), &cfg).unwrap();
            (pair.theta, t)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta.to_csv(), tb.to_csv());
        assert_eq!(ta.rows.len(), 2);
        assert_ne!(a, tiny_policy());
    }
}
