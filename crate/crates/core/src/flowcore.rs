//! Conditional rectified flow: linear paths from clean images (t = 0) to
//! Gaussian noise (t = 1), the velocity regression loss, and an explicit
//! Euler sampler integrating from noise back to an image.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::rng::{stream, StreamRng};
use crate::numerics::{Activation, AdamW, AdamWConfig, BoundMlp, Mlp, Scalar, Tape, Tensor, Var};
use crate::toyworld::{Corpus, Split, ToyImage};

pub const TIME_EMBED_DIM: usize = 8;

/// Hidden widths of the default velocity network.
pub const DEFAULT_HIDDEN: [usize; 2] = [1024, 1024];

/// Inference step count used for rollouts unless configured otherwise.
pub const DEFAULT_SAMPLE_STEPS: usize = 6;

const NOISE_STREAM: u64 = 0x7831;

pub const T_FLOOR: f64 = 0.05;

/// `[sin(πt), cos(πt), sin(2πt), cos(2πt), ..., cos(8πt)]`.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..TIME_EMBED_DIM / 2 {
        let w = std::f64::consts::PI * (1u32 << k) as f64;
        out[2 * k] = (w * t).sin();
        out[2 * k + 1] = (w * t).cos();
    }
    out
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `x_t = (1 - t)·x0 + t·x1`, exact at both endpoints.
pub fn interpolate<T: Scalar>(x0: &[T], x1: &[T], t: f64) -> Result<Vec<T>> {
    check_time(t)?;
    if x0.len() != x1.len() {
        return Err(Error::Dimension {
            context: "interpolate".into(),
            expected: x0.len(),
            found: x1.len(),
        });
    }
    if t == 0.0 {
        return Ok(x0.to_vec());
    }
    if t == 1.0 {
        return Ok(x1.to_vec());
    }
    let (a, b) = (T::of(1.0 - t), T::of(t));
    Ok(x0.iter().zip(x1).map(|(&p, &q)| a * p + b * q).collect())
}

/// `v = x1 - x0`.
pub fn velocity_target<T: Scalar>(x0: &[T], x1: &[T]) -> Result<Vec<T>> {
    if x0.len() != x1.len() {
        return Err(Error::Dimension {
            context: "velocity_target".into(),
            expected: x0.len(),
            found: x1.len(),
        });
    }
    Ok(x0.iter().zip(x1).map(|(&p, &q)| q - p).collect())
}

/// Anything the Euler sampler can integrate.
pub trait VelocityField {
    /// Velocity for a `[B, D]` state at a shared time, conditioned on `[B, D]`.
    fn velocity(&self, x: &Tensor<f32>, t: f64, c: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// `v_θ(x_t, t, c)` built on an MLP over `concat(x_t, c, time_embedding(t))`.
///
/// The network output is a clean estimate `x̂0` and the velocity is
/// `(x_t - x̂0) / t`. Along a straight path `x_t - x0 = t·v`, so a perfect
/// `x̂0` gives the exact target, and the last Euler step returns `x̂0`.
/// `t` is floored at [`T_FLOOR`] to keep the map bounded near `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel<T = f32> {
    net: Mlp<T>,
    x_dim: usize,
}

impl<T: Scalar> VelocityModel<T> {
    pub fn new(x_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut dims = vec![2 * x_dim + TIME_EMBED_DIM];
        dims.extend_from_slice(hidden);
        dims.push(x_dim);
        Ok(Self {
            net: Mlp::new(&dims, Activation::Silu, rng)?,
            x_dim,
        })
    }

    pub fn from_net(net: Mlp<T>) -> Result<Self> {
        let x_dim = net.out_dim();
        if net.in_dim() != 2 * x_dim + TIME_EMBED_DIM {
            return Err(Error::Dimension {
                context: "velocity network input (2·x_dim + time embedding)".into(),
                expected: 2 * x_dim + TIME_EMBED_DIM,
                found: net.in_dim(),
            });
        }
        Ok(Self { net, x_dim })
    }

    pub fn net(&self) -> &Mlp<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp<T> {
        &mut self.net
    }

    pub fn into_net(self) -> Mlp<T> {
        self.net
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn cast<U: Scalar>(&self) -> VelocityModel<U> {
        VelocityModel {
            net: self.net.cast(),
            x_dim: self.x_dim,
        }
    }

    /// Row `i` is `concat(x_t[i], c[i], time_embedding(t[i]))`.
    pub fn input_matrix(&self, x_t: &Tensor<T>, t: &[f64], c: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.x_dim;
        for (name, m) in [("x_t", x_t), ("c", c)] {
            if m.last_dim() != d {
                return Err(Error::Dimension {
                    context: format!("velocity model {name} width"),
                    expected: d,
                    found: m.last_dim(),
                });
            }
        }
        let b = x_t.rows();
        if c.rows() != b || t.len() != b {
            return Err(Error::Dimension {
                context: "velocity model batch".into(),
                expected: b,
                found: if c.rows() != b { c.rows() } else { t.len() },
            });
        }
        let w = 2 * d + TIME_EMBED_DIM;
        let mut data = Vec::with_capacity(b * w);
        for i in 0..b {
            data.extend_from_slice(x_t.row(i));
            data.extend_from_slice(c.row(i));
            data.extend(time_embedding(t[i]).iter().map(|&e| T::of(e)));
        }
        Tensor::matrix(b, w, data)
    }

    /// Network input and the per-element `1 / max(t, T_FLOOR)`.
    fn velocity_parts(&self, x_t: &Tensor<T>, t: &[f64], c: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let input = self.input_matrix(x_t, t, c)?;
        let d = self.x_dim;
        let inv_t = Tensor::from_fn(x_t.shape(), |i| T::of(1.0 / t[i / d].max(T_FLOOR)));
        Ok((input, inv_t))
    }

    /// Untracked clean estimate `x̂0`.
    pub fn predict_clean(&self, x_t: &Tensor<T>, t: &[f64], c: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.forward(&self.input_matrix(x_t, t, c)?)
    }

    pub fn predict(&self, x_t: &Tensor<T>, t: &[f64], c: &Tensor<T>) -> Result<Tensor<T>> {
        let (input, inv_t) = self.velocity_parts(x_t, t, c)?;
        let clean = self.net.forward(&input)?;
        let data = clean
            .data()
            .iter()
            .zip(x_t.data())
            .zip(inv_t.data())
            .map(|((&r, &x), &s)| (x - r) * s)
            .collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }

    pub fn predict_taped(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundMlp,
        x_t: &Tensor<T>,
        t: &[f64],
        c: &Tensor<T>,
    ) -> Result<Var> {
        let (input, inv_t) = self.velocity_parts(x_t, t, c)?;
        let input = tape.constant(input);
        let clean = self.net.forward_taped(tape, bound, input)?;
        let x = tape.constant(x_t.clone());
        let inv_t = tape.constant(inv_t);
        let diff = tape.sub(x, clean)?;
        tape.mul(diff, inv_t)
    }
}

impl VelocityField for VelocityModel<f32> {
    fn velocity(&self, x: &Tensor<f32>, t: f64, c: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(x, &vec![t; x.rows()], c)
    }
}

/// Aligned training batch; all tensors `[B, D]`.
#[derive(Clone, Debug)]
pub struct FlowBatch<T = f32> {
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub t: Vec<f64>,
    pub c: Tensor<T>,
}

impl<T: Scalar> FlowBatch<T> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.t.is_empty() {
            return Err(Error::contract("flow batch is empty"));
        }
        self.x0.same_shape(&self.x1, "flow batch x0/x1")?;
        self.x0.same_shape(&self.c, "flow batch x0/c")?;
        if self.x0.rows() != self.t.len() {
            return Err(Error::Dimension {
                context: "flow batch times".into(),
                expected: self.x0.rows(),
                found: self.t.len(),
            });
        }
        self.t.iter().try_for_each(|&t| check_time(t))
    }

    /// `(x_t, v)` for every row.
    pub fn path_and_target(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let d = self.x0.last_dim();
        let mut xt = Vec::with_capacity(self.x0.len());
        let mut v = Vec::with_capacity(self.x0.len());
        for (i, &t) in self.t.iter().enumerate() {
            xt.extend(interpolate(self.x0.row(i), self.x1.row(i), t)?);
            v.extend(velocity_target(self.x0.row(i), self.x1.row(i))?);
        }
        let b = self.t.len();
        Ok((Tensor::matrix(b, d, xt)?, Tensor::matrix(b, d, v)?))
    }
}

/// Flow-matching loss on the tape: mean over rows of `‖v - v_θ(x_t, t, c)‖²`.
pub fn fm_loss_taped<T: Scalar>(
    model: &VelocityModel<T>,
    tape: &mut Tape<T>,
    bound: &BoundMlp,
    batch: &FlowBatch<T>,
) -> Result<Var> {
    batch.validate()?;
    let (xt, v) = batch.path_and_target()?;
    let pred = model.predict_taped(tape, bound, &xt, &batch.t, &batch.c)?;
    let target = tape.constant(v);
    let diff = tape.sub(target, pred)?;
    let per_row = tape.row_sum_sq(diff)?;
    Ok(tape.mean(per_row))
}

/// Untracked flow-matching loss.
pub fn fm_loss<T: Scalar>(model: &VelocityModel<T>, batch: &FlowBatch<T>) -> Result<f64> {
    batch.validate()?;
    let (xt, v) = batch.path_and_target()?;
    let pred = model.predict(&xt, &batch.t, &batch.c)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(v.data())
        .map(|(&p, &q)| (q - p).to_f64().unwrap().powi(2))
        .sum();
    Ok(total / batch.len() as f64)
}

pub(crate) fn standard_normal(rng: &mut StreamRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 2e-3,
            batch_size: 128,
            weight_decay: 0.0,
            cosine_decay: true,
            seed: 0,
        }
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub const SMOOTHING: f64 = 0.9;

    /// Exponential moving average seeded with the first loss.
    pub fn smoothed(&self) -> Vec<f64> {
        let mut acc = None;
        self.losses
            .iter()
            .map(|&l| {
                let s = match acc {
                    None => l,
                    Some(prev) => Self::SMOOTHING * prev + (1.0 - Self::SMOOTHING) * l,
                };
                acc = Some(s);
                s
            })
            .collect()
    }

    pub fn initial_smoothed(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.smoothed().last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }
}

/// Random training batch of `(clean, degraded)` pairs with fresh noise and times.
pub fn draw_flow_batch(corpus: &Corpus, train: &[usize], batch_size: usize, rng: &mut StreamRng) -> Result<FlowBatch<f32>> {
    let d = corpus.pixel_count();
    let mut x0 = Vec::with_capacity(batch_size * d);
    let mut c = Vec::with_capacity(batch_size * d);
    let mut t = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let p = &corpus.pairs()[train[rng.random_range(0..train.len())]];
        x0.extend_from_slice(p.clean.pixels());
        c.extend_from_slice(p.degraded.pixels());
        t.push(rng.random_range(0.0..=1.0));
    }
    let x1 = standard_normal(rng, batch_size * d);
    Ok(FlowBatch {
        x0: Tensor::matrix(batch_size, d, x0)?,
        x1: Tensor::matrix(batch_size, d, x1)?,
        t,
        c: Tensor::matrix(batch_size, d, c)?,
    })
}

/// `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

/// Fits `model` to the corpus train split with AdamW.
pub fn train_flow(model: &mut VelocityModel<f32>, corpus: &Corpus, cfg: &FlowTrainConfig) -> Result<LossTrace> {
    let train = corpus.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::validation("corpus", "no train split"));
    }
    if model.x_dim() != corpus.pixel_count() {
        return Err(Error::Dimension {
            context: "velocity model vs corpus image size".into(),
            expected: model.x_dim(),
            found: corpus.pixel_count(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::validation("batch_size", "must be positive"));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        if cfg.cosine_decay {
            opt.config.lr = cosine_lr(cfg.lr, step, cfg.steps);
        }
        let mut rng = stream(cfg.seed, &[0x666d, step as u64]);
        let batch = draw_flow_batch(corpus, &train, cfg.batch_size, &mut rng)?;
        let mut tape = Tape::new();
        let bound = model.net().bind(&mut tape);
        let loss = fm_loss_taped(model, &mut tape, &bound, &batch)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        drop(tape);
        opt.step(&mut model.net_mut().params_mut(), &grads)?;
        trace.losses.push(value);
    }
    Ok(trace)
}

/// Seeded standard-normal starting state for one sample.
pub fn initial_noise(seed: u64, dim: usize) -> Vec<f32> {
    standard_normal(&mut stream(seed, &[NOISE_STREAM]), dim)
}

/// Euler integration of `dx/dt = v(x, t, c)` from `t = 1` to `t = 0` over a
/// `[B, D]` batch, without clamping.
pub fn integrate(field: &impl VelocityField, x1: Tensor<f32>, c: &Tensor<f32>, steps: usize) -> Result<Tensor<f32>> {
    if steps == 0 {
        return Err(Error::validation("steps", "sampler needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x1;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = field.velocity(&x, t, c)?;
        let h = dt as f32;
        x.data_mut().iter_mut().zip(v.data()).for_each(|(xi, &vi)| *xi -= h * vi);
        if !x.is_finite() {
            return Err(Error::Sampling { step: k });
        }
    }
    Ok(x)
}

/// Restores one image per `(condition, seed)`; outputs clamped to `[0, 1]`.
pub fn sample_batch(field: &impl VelocityField, conds: &[&ToyImage], seeds: &[u64], steps: usize) -> Result<Vec<ToyImage>> {
    debug_assert_eq!(conds.len(), seeds.len());
    let Some(first) = conds.first() else {
        return Ok(Vec::new());
    };
    let (w, h) = (first.width(), first.height());
    let d = w * h;
    let c = Tensor::stack_rows(&conds.iter().map(|img| img.pixels()).collect::<Vec<_>>())?;
    let mut x1 = Vec::with_capacity(conds.len() * d);
    for &s in seeds {
        x1.extend(initial_noise(s, d));
    }
    let x = integrate(field, Tensor::matrix(conds.len(), d, x1)?, &c, steps)?;
    (0..conds.len())
        .map(|i| ToyImage::from_clamped(w, h, x.row(i).to_vec()))
        .collect()
}

pub fn sample(field: &impl VelocityField, c: &ToyImage, steps: usize, seed: u64) -> Result<ToyImage> {
    Ok(sample_batch(field, &[c], &[seed], steps)?.remove(0))
}
