//! Trains a small conditional flow model and restores held-out inputs with
//! the Euler sampler.
//!
//! cargo run --release --example flow_restoration          # ~40 s
//! cargo run --release --example flow_restoration -- full  # default size, a few minutes
//!
//! The quick run is too small to beat the degraded input; the default-size
//! model (two 1024-wide layers, 3000 steps) does.

use flowpref::flowcore::{sample_batch, train_flow, FlowTrainConfig, DEFAULT_HIDDEN, DEFAULT_SAMPLE_STEPS};
use flowpref::numerics::rng::derive_seed;
use flowpref::toyworld::{build_corpus, Profile, SpecDistribution, Split};

fn main() -> flowpref::Result<()> {
    let full = std::env::args().nth(1).as_deref() == Some("full");
    let (n, hidden, steps) = if full { (2000, &DEFAULT_HIDDEN[..], 3000) } else { (1000, &[512, 512][..], 1500) };
    let corpus = build_corpus(n, &SpecDistribution::profile(Profile::Easy), 0)?;
    let mut model = flowpref::cli::init_policy(corpus.pixel_count(), hidden, 0)?;
    let cfg = FlowTrainConfig {
        steps,
        ..FlowTrainConfig::default()
    };
    let trace = train_flow(&mut model, &corpus, &cfg)?;
    let smoothed = trace.smoothed();
    for step in (0..smoothed.len()).step_by(steps / 6) {
        println!("step {step:>4}  loss {:.3}", smoothed[step]);
    }

    let test = corpus.split_pairs(Split::Test);
    let conds: Vec<_> = test.iter().map(|p| &p.degraded).collect();
    let seeds: Vec<u64> = (0..conds.len() as u64).map(|i| derive_seed(0, &[i])).collect();
    for steps in [1, 3, DEFAULT_SAMPLE_STEPS, 12] {
        let out = sample_batch(&model, &conds, &seeds, steps)?;
        let mse = test.iter().zip(&out).map(|(p, o)| o.mse(&p.clean)).sum::<f64>() / test.len() as f64;
        println!("{steps:>2} Euler steps: restored MSE {mse:.5}");
    }
    let degraded = test.iter().map(|p| p.degraded.mse(&p.clean)).sum::<f64>() / test.len() as f64;
    println!("degraded input MSE {degraded:.5} over {} test pairs", test.len());
    Ok(())
}
