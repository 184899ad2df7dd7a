//! The whole loop at toy scale: base flow, consistency head, then
//! reward-weighted fine-tuning in each mode, scored on held-out inputs.
//!
//! cargo run --release --example reward_finetune

use flowpref::cli::{evaluate, init_head, init_policy, reward_context};
use flowpref::consistency::{train_projection, ConsistencyTrainConfig, Featurizer, DEFAULT_FEATURIZER_SEED};
use flowpref::flowcore::{train_flow, FlowTrainConfig};
use flowpref::nft::{finetune, FinetuneConfig, FinetuneMode, NftParams, PolicyPair};
use flowpref::rewards::RewardRegistry;
use flowpref::toyworld::{build_corpus, Profile, SpecDistribution, Split};

fn main() -> flowpref::Result<()> {
    let corpus = build_corpus(600, &SpecDistribution::profile(Profile::Easy), 0)?;
    let mut base = init_policy(corpus.pixel_count(), &[256, 256], 0)?;
    train_flow(&mut base, &corpus, &FlowTrainConfig { steps: 600, batch_size: 64, ..Default::default() })?;
    let mut head = init_head(0)?;
    let featurizer = Featurizer::new(DEFAULT_FEATURIZER_SEED);
    train_projection(&mut head, &featurizer, &corpus, &ConsistencyTrainConfig { steps: 1500, ..Default::default() })?;
    let ctx = reward_context(&corpus, Some(head), DEFAULT_FEATURIZER_SEED)?;

    let show = |label: &str, r: &flowpref::cli::EvalReport| {
        println!(
            "{label:>10}: quality {:.4}  consistency {:.4}  mse {:.5}",
            r.mean("quality").unwrap_or(f64::NAN),
            r.mean("consistency").unwrap_or(f64::NAN),
            r.mean("mse").unwrap_or(f64::NAN)
        );
    };
    show("base", &evaluate(&base, &corpus, Split::Test, None, &ctx, 6, 0)?);
    for mode in [FinetuneMode::IqaOnly, FinetuneMode::Scalar, FinetuneMode::Decoupled] {
        let mut pair = PolicyPair::new(base.clone(), NftParams::default(), 0.9)?;
        let cfg = FinetuneConfig {
            mode,
            outer_iters: 20,
            groups: 8,
            minibatch: 24,
            lr: 1e-4,
            ..Default::default()
        };
        let trace = finetune(&mut pair, &corpus, &RewardRegistry::default_pair(), &ctx, &cfg)?;
        let last = trace.rows.last().expect("at least one iteration");
        println!("{:>10}  (last rollouts: quality {:.4}, consistency {:.4})", mode.name(), last.mean_quality, last.mean_consistency);
        show(mode.name(), &evaluate(&pair.theta, &corpus, Split::Test, None, &ctx, 6, 0)?);
    }
    Ok(())
}
