//! Aligns the consistency projection head with symmetric InfoNCE and shows
//! how matched and content-swapped pairs separate.
//!
//! cargo run --release --example consistency_head

use flowpref::consistency::{evaluate_pairs, train_projection, ConsistencyModel, ConsistencyTrainConfig, Featurizer, DEFAULT_FEATURIZER_SEED};
use flowpref::numerics::Mlp;
use flowpref::toyworld::{build_corpus, Profile, SpecDistribution, Split};

fn main() -> flowpref::Result<()> {
    let corpus = build_corpus(600, &SpecDistribution::profile(Profile::Easy), 0)?;
    let featurizer = Featurizer::new(DEFAULT_FEATURIZER_SEED);
    let test: Vec<_> = corpus.indices(Split::Test).into_iter().map(|i| (i, &corpus.pairs()[i])).collect();
    let report = |label: &str, head: &Mlp<f32>| -> flowpref::Result<()> {
        let model = ConsistencyModel::new(featurizer.clone(), head.clone())?;
        let scores = evaluate_pairs(&model, &test)?;
        let n = scores.len() as f64;
        let matched = scores.iter().map(|s| s.matched).sum::<f64>() / n;
        let swapped = scores.iter().map(|s| s.swapped).sum::<f64>() / n;
        let wins = scores.iter().filter(|s| s.matched > s.swapped).count();
        println!("{label:>9}: matched {matched:.3}, swapped {swapped:.3}, matched wins {wins}/{}", scores.len());
        Ok(())
    };

    let mut head = flowpref::cli::init_head(0)?;
    report("untrained", &head)?;
    let trace = train_projection(&mut head, &featurizer, &corpus, &ConsistencyTrainConfig { steps: 1500, ..Default::default() })?;
    let s = trace.smoothed();
    println!("InfoNCE {:.3} -> {:.3}", s[0], s[s.len() - 1]);
    report("trained", &head)?;
    Ok(())
}
