//! Builds a small synthetic corpus, prints what the degradations look like
//! and round-trips it through the binary format.
//!
//! cargo run --example toy_corpus

use flowpref::toyworld::{build_corpus, degrade, make_clean_image, Corpus, DegradationSpec, PatternFamily, Profile, SpecDistribution, Split};

fn main() -> flowpref::Result<()> {
    let clean = make_clean_image(PatternFamily::Checkerboard, 11);
    let spec = DegradationSpec {
        blur_sigma: 1.5,
        noise_sigma: 0.05,
        downsample_factor: 2,
        quant_levels: Some(16),
        seed: 11,
    };
    let lr = degrade(&clean, &spec)?;
    println!("checkerboard {}x{}: degraded MSE {:.5}, variance {:.4} -> {:.4}", clean.width(), clean.height(), lr.mse(&clean), clean.variance(), lr.variance());

    for profile in [Profile::Easy, Profile::Hard] {
        let corpus = build_corpus(200, &SpecDistribution::profile(profile), 0)?;
        let d = corpus.diversity();
        let mse = corpus.pairs().iter().map(|p| p.degraded.mse(&p.clean)).sum::<f64>() / corpus.len() as f64;
        println!(
            "{profile:?}: {} train / {} val / {} test, mean MSE {mse:.5}, stages blur {} down {} noise {} quant {}",
            corpus.indices(Split::Train).len(),
            corpus.indices(Split::Val).len(),
            corpus.indices(Split::Test).len(),
            d.blur,
            d.downsample,
            d.noise,
            d.quantize
        );
    }

    let corpus = build_corpus(50, &SpecDistribution::profile(Profile::Easy), 3)?;
    let path = std::env::temp_dir().join("flowpref_toy_corpus.fpcr");
    corpus.save(&path)?;
    let back = Corpus::load(&path)?;
    println!("round trip through {}: identical {}", path.display(), back == corpus);
    println!("regenerates from its seeds: {}", corpus.verify_reproducible()?);
    Ok(())
}
