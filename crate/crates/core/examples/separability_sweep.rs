//! How many distinct reward weights each advantage pipeline produces per
//! group as the rollout count grows.
//!
//! cargo run --release --example separability_sweep          # seconds, small policy
//! cargo run --release --example separability_sweep -- full  # default-size base
//!
//! The decoupled pipeline's extra spread shows up with a well-trained base;
//! the small policy's noisy rollouts already spread scalar-first weights.

use flowpref::advantage::AdvantageMode;
use flowpref::analysis::{separability_sweep, summary_csv, SweepConfig};
use flowpref::cli::{init_head, init_policy, reward_context};
use flowpref::config::HETEROGENEOUS_OBJECTIVES;
use flowpref::consistency::{train_projection, ConsistencyTrainConfig, Featurizer, DEFAULT_FEATURIZER_SEED};
use flowpref::flowcore::{train_flow, FlowTrainConfig, DEFAULT_HIDDEN};
use flowpref::rewards::RewardRegistry;
use flowpref::toyworld::{build_corpus, Profile, SpecDistribution, Split};

fn main() -> flowpref::Result<()> {
    let full = std::env::args().nth(1).as_deref() == Some("full");
    let corpus = build_corpus(if full { 2000 } else { 400 }, &SpecDistribution::profile(Profile::Easy), 0)?;
    let mut policy;
    if full {
        policy = init_policy(corpus.pixel_count(), &DEFAULT_HIDDEN, 0)?;
        train_flow(&mut policy, &corpus, &FlowTrainConfig::default())?;
    } else {
        policy = init_policy(corpus.pixel_count(), &[256], 0)?;
        train_flow(&mut policy, &corpus, &FlowTrainConfig { steps: 300, batch_size: 64, ..Default::default() })?;
    }
    let mut head = init_head(0)?;
    let featurizer = Featurizer::new(DEFAULT_FEATURIZER_SEED);
    train_projection(&mut head, &featurizer, &corpus, &ConsistencyTrainConfig { steps: 1500, ..Default::default() })?;
    let ctx = reward_context(&corpus, Some(head), DEFAULT_FEATURIZER_SEED)?;
    // Quality, consistency and a mean-intensity objective on a 10x scale.
    let registry = RewardRegistry::parse(&HETEROGENEOUS_OBJECTIVES.join(","))?;
    let inputs: Vec<_> = corpus.indices(Split::Test).into_iter().take(if full { 100 } else { 30 }).map(|i| (i, &corpus.pairs()[i].degraded)).collect();
    let report = separability_sweep(&inputs, &policy, &registry, &ctx, &SweepConfig::default())?;
    print!("{}", summary_csv(&report));
    for m in [2, 16] {
        let s = report.summary_for(AdvantageMode::ScalarFirst, m).expect("swept");
        let d = report.summary_for(AdvantageMode::Decoupled, m).expect("swept");
        println!("M={m}: distinct weights {:.2} vs {:.2}", s.mean_dagc, d.mean_dagc);
    }
    Ok(())
}
