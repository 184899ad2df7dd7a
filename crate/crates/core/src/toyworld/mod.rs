//! Synthetic restoration world: procedural clean images, a parameterized
//! degradation pipeline, and persistent corpora of (clean, degraded) pairs.

pub mod corpus;
pub mod degrade;
pub mod image;
pub mod pattern;

pub use corpus::{build_corpus, split_of, Corpus, DiversitySummary, Pair, Profile, SpecDistribution, Split};
pub use degrade::{box_resample, degrade, gaussian_blur, DegradationSpec};
pub use image::ToyImage;
pub use pattern::{make_clean_image, Pattern, PatternFamily};
