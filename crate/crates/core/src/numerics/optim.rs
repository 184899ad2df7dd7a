use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with decoupled weight decay.
///
/// The decay shrinks parameters directly (`p -= lr * wd * p`) and never
/// enters the moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            match g {
                None => return Err(Error::contract(format!("parameter {i} has no gradient"))),
                Some(g) => p.same_shape(g, "optimizer gradient")?,
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() {
            return Err(Error::contract("parameter set changed between optimizer steps"));
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = T::of(c.lr);
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let eps = T::of(c.eps);
        let decay = T::one() - T::of(c.lr * c.weight_decay);
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let one = T::one();

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let g = g.as_ref().expect("checked above");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters: `shadow = d·shadow + (1-d)·p`.
pub fn ema_update<T: Scalar>(shadow: &mut [&mut Tensor<T>], params: &[&Tensor<T>], decay: f64) {
    let d = T::of(decay);
    let rest = T::one() - d;
    for (s, p) in shadow.iter_mut().zip(params) {
        s.data_mut()
            .iter_mut()
            .zip(p.data())
            .for_each(|(sv, &pv)| *sv = d * *sv + rest * pv);
    }
}
