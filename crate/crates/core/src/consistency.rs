//! Consistency with the degraded input: a frozen handcrafted encoder, a trainable
//! projection head aligned with symmetric InfoNCE, and the cosine score
//! between a degraded input and a restoration.

use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flowcore::LossTrace;
use crate::numerics::rng::stream;
use crate::numerics::{Activation, AdamW, AdamWConfig, Mlp, Scalar, Tape, Tensor, Var};
use crate::toyworld::{Corpus, Pair, Split, ToyImage};

pub const EMBEDDING_DIM: usize = 64;
pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_FEATURIZER_SEED: u64 = 0x0e4c_0de5;

const BLOCK_SCALES: [usize; 3] = [2, 4, 8];
const HIST_BINS: usize = 8;
/// Gradient magnitudes above this land in the last histogram bin.
const GRAD_RANGE: f32 = 0.5;
pub const DESCRIPTOR_DIM: usize = 4 + 16 + 64 + 2 * HIST_BINS;

/// Multi-scale block means, gradient-magnitude histogram and intensity
/// histogram, each shifted so a mid-gray flat image maps near zero.
pub fn descriptor(img: &ToyImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(DESCRIPTOR_DIM);
    for s in BLOCK_SCALES {
        for by in 0..s {
            for bx in 0..s {
                let (y0, y1) = (by * h / s, ((by + 1) * h / s).max(by * h / s + 1).min(h));
                let (x0, x1) = (bx * w / s, ((bx + 1) * w / s).max(bx * w / s + 1).min(w));
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += img.get(x, y) as f64;
                    }
                }
                out.push(sum / ((y1 - y0) * (x1 - x0)) as f64 - 0.5);
            }
        }
    }
    let n = (w * h) as f64;
    let mut grad = [0.0f64; HIST_BINS];
    let mut inten = [0.0f64; HIST_BINS];
    for y in 0..h {
        for x in 0..w {
            let p = img.get(x, y);
            let dx = img.get((x + 1).min(w - 1), y) - p;
            let dy = img.get(x, (y + 1).min(h - 1)) - p;
            let g = (dx * dx + dy * dy).sqrt();
            grad[((g / GRAD_RANGE * HIST_BINS as f32) as usize).min(HIST_BINS - 1)] += 1.0;
            inten[((p * HIST_BINS as f32) as usize).min(HIST_BINS - 1)] += 1.0;
        }
    }
    let flat = 1.0 / HIST_BINS as f64;
    out.extend(grad.iter().map(|c| c / n - flat));
    out.extend(inten.iter().map(|c| c / n - flat));
    out
}

/// Frozen encoder `E`: the descriptor through a fixed Gaussian projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurizer {
    seed: u64,
    /// `[DESCRIPTOR_DIM, EMBEDDING_DIM]`, row-major.
    projection: Vec<f64>,
}

impl Featurizer {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(seed, &[0xfea7]);
        let scale = 1.0 / (DESCRIPTOR_DIM as f64).sqrt();
        let projection = (0..DESCRIPTOR_DIM * EMBEDDING_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Self { seed, projection }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed(&self, img: &ToyImage) -> Vec<f32> {
        let d = descriptor(img);
        let mut out = vec![0.0f64; EMBEDDING_DIM];
        for (i, &di) in d.iter().enumerate() {
            let row = &self.projection[i * EMBEDDING_DIM..(i + 1) * EMBEDDING_DIM];
            out.iter_mut().zip(row).for_each(|(o, &p)| *o += di * p);
        }
        // The projection is roughly norm-preserving; lift to unit-ish scale.
        out.into_iter().map(|v| (4.0 * v) as f32).collect()
    }

    pub fn embed_batch<'a>(&self, imgs: impl IntoIterator<Item = &'a ToyImage>) -> Result<Tensor<f32>> {
        let rows: Vec<Vec<f32>> = imgs.into_iter().map(|i| self.embed(i)).collect();
        Tensor::stack_rows(&rows)
    }

    /// SHA-256 over the frozen state.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in &self.projection {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `g`: two linear layers with a SiLU between them.
pub fn new_head(rng: &mut impl rand::Rng) -> Result<Mlp<f32>> {
    Mlp::new(&[EMBEDDING_DIM, EMBEDDING_DIM, EMBEDDING_DIM], Activation::Silu, rng)
}

/// Head outputs normalized to unit rows.
pub fn project<T: Scalar>(embeddings: &Tensor<T>, head: &Mlp<T>) -> Result<Tensor<T>> {
    let raw = head.forward(embeddings)?;
    let d = raw.last_dim();
    let mut data = raw.into_data();
    for (i, row) in data.chunks_mut(d).enumerate() {
        let n = row.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateEmbedding(format!("row {i} projects to zero")));
        }
        row.iter_mut().for_each(|v| *v = T::of(v.to_f64().unwrap() / n));
    }
    Tensor::matrix(data.len() / d, d, data)
}

/// Matched embedding pairs: row `i` of `lr` belongs with row `i` of `hr`.
#[derive(Clone, Debug)]
pub struct AlignmentBatch<T = f32> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature {tau} must be > 0")));
    }
    Ok(())
}

/// `½(L_lr→hr + L_hr→lr)` over cosine similarities of two `[B, d]` nodes.
pub fn info_nce_taped<T: Scalar>(tape: &mut Tape<T>, lr: Var, hr: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let a = tape.l2_normalize_rows(lr)?;
    let b = tape.l2_normalize_rows(hr)?;
    let sim = tape.matmul(a, b, true)?;
    let logits = tape.scale(sim, T::of(1.0 / tau));
    let fwd = tape.log_softmax_rows(logits)?;
    let fwd = tape.diag(fwd)?;
    let fwd = tape.mean(fwd);
    let logits_t = tape.transpose(logits)?;
    let back = tape.log_softmax_rows(logits_t)?;
    let back = tape.diag(back)?;
    let back = tape.mean(back);
    let both = tape.add(fwd, back)?;
    Ok(tape.scale(both, T::of(-0.5)))
}

pub fn info_nce_symmetric<T: Scalar>(batch: &AlignmentBatch<T>, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    batch.lr.same_shape(&batch.hr, "alignment batch")?;
    let mut tape = Tape::new();
    let lr = tape.constant(batch.lr.clone());
    let hr = tape.constant(batch.hr.clone());
    let loss = info_nce_taped(&mut tape, lr, hr, tau)?;
    Ok(tape.value(loss).item().to_f64().unwrap())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ConsistencyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            lr: 1e-4,
            tau: DEFAULT_TAU,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Aligns `head` on (degraded, clean) train pairs; the featurizer is only read.
pub fn train_projection(
    head: &mut Mlp<f32>,
    featurizer: &Featurizer,
    corpus: &Corpus,
    cfg: &ConsistencyTrainConfig,
) -> Result<LossTrace> {
    check_tau(cfg.tau)?;
    let train = corpus.split_pairs(Split::Train);
    if train.is_empty() {
        return Err(Error::validation("corpus", "no train split"));
    }
    if cfg.batch_size == 0 || cfg.batch_size > train.len() {
        return Err(Error::validation(
            "batch_size",
            format!("{} not in 1..={}", cfg.batch_size, train.len()),
        ));
    }
    let lr_emb: Vec<Vec<f32>> = train.iter().map(|p| featurizer.embed(&p.degraded)).collect();
    let hr_emb: Vec<Vec<f32>> = train.iter().map(|p| featurizer.embed(&p.clean)).collect();
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr));
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, &[0xc0, step as u64]);
        let idx = sample_indices(&mut rng, train.len(), cfg.batch_size);
        let pick = |src: &[Vec<f32>]| Tensor::stack_rows(&idx.iter().map(|i| &src[i][..]).collect::<Vec<_>>());
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape);
        let lr_in = tape.constant(pick(&lr_emb)?);
        let hr_in = tape.constant(pick(&hr_emb)?);
        let lr_out = head.forward_taped(&mut tape, &bound, lr_in)?;
        let hr_out = head.forward_taped(&mut tape, &bound, hr_in)?;
        let loss = info_nce_taped(&mut tape, lr_out, hr_out, cfg.tau)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        opt.step(&mut head.params_mut(), &grads)?;
        trace.losses.push(value);
    }
    Ok(trace)
}

/// Frozen encoder plus head; the scorer behind the consistency reward.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyModel {
    pub featurizer: Featurizer,
    pub head: Mlp<f32>,
}

impl ConsistencyModel {
    pub fn new(featurizer: Featurizer, head: Mlp<f32>) -> Result<Self> {
        if head.in_dim() != EMBEDDING_DIM {
            return Err(Error::Dimension {
                context: "consistency head input".into(),
                expected: EMBEDDING_DIM,
                found: head.in_dim(),
            });
        }
        Ok(Self { featurizer, head })
    }

    /// `g(E(x))` as a unit vector in f64.
    pub fn unit_embedding(&self, img: &ToyImage) -> Result<Vec<f64>> {
        let z = Tensor::matrix(1, EMBEDDING_DIM, self.featurizer.embed(img))?;
        let e = self.head.forward(&z)?;
        let e: Vec<f64> = e.data().iter().map(|&v| v as f64).collect();
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEmbedding(format!("embedding norm {n}")));
        }
        Ok(e.into_iter().map(|v| v / n).collect())
    }

    /// Cosine similarity `C` in `[-1, 1]`.
    pub fn score(&self, lr: &ToyImage, sr: &ToyImage) -> Result<f64> {
        let a = self.unit_embedding(lr)?;
        let b = self.unit_embedding(sr)?;
        Ok(cosine(&a, &b))
    }
}

/// Dot product of unit vectors, clamped against rounding past ±1.
/// Elementwise products commute, so swapping arguments is bit-identical.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

pub fn consistency_score(lr: &ToyImage, sr: &ToyImage, model: &ConsistencyModel) -> Result<f64> {
    model.score(lr, sr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub pair_id: usize,
    pub matched: f64,
    pub swapped: f64,
}

/// Scores each degraded input against its own clean image and against the
/// clean image of the next pair in the list (content swap).
pub fn evaluate_pairs(model: &ConsistencyModel, pairs: &[(usize, &Pair)]) -> Result<Vec<PairScore>> {
    if pairs.len() < 2 {
        return Err(Error::contract("swapped evaluation needs at least two pairs"));
    }
    let units: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .map(|(_, p)| Ok((model.unit_embedding(&p.degraded)?, model.unit_embedding(&p.clean)?)))
        .collect::<Result<_>>()?;
    Ok((0..pairs.len())
        .map(|i| PairScore {
            pair_id: pairs[i].0,
            matched: cosine(&units[i].0, &units[i].1),
            swapped: cosine(&units[i].0, &units[(i + 1) % pairs.len()].1),
        })
        .collect())
}

pub fn pair_scores_csv(scores: &[PairScore]) -> String {
    let mut s = String::from("pair_id,matched_score,swapped_score\n");
    for p in scores {
        s.push_str(&format!("{},{},{}\n", p.pair_id, p.matched, p.swapped));
    }
    s
}
