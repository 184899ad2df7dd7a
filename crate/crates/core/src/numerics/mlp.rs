use rand::Rng;

use super::tape::{silu, Tape, Var};
use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Nonlinearity applied between hidden layers. The final layer is linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Silu,
}

/// Affine layer with weight `[in, out]` and bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Fully-connected network.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = f32> {
    layers: Vec<Linear<T>>,
    activation: Activation,
}

/// Parameter leaves of an [`Mlp`] registered on a tape, in layer order.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
}

impl BoundMlp {
    /// Weight and bias handles interleaved: `[w0, b0, w1, b1, ...]`.
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Accumulated gradients in the same order as [`Mlp::params_mut`].
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Option<Tensor<T>>> {
        self.vars().map(|v| tape.grad(v).cloned()).collect()
    }
}

impl<T: Scalar> Mlp<T> {
    /// Randomly initialized network with layer widths `dims` (input first).
    ///
    /// Weights and biases are drawn from U(-1/√fan_in, 1/√fan_in).
    pub fn new(dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::validation("dims", "need at least input and output widths"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::validation("dims", "layer widths must be positive"));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = || T::of(rng.random_range(-bound..bound));
                let weight = Tensor::from_fn(&[fan_in, fan_out], |_| draw());
                let bias = Tensor::from_fn(&[fan_out], |_| draw());
                Linear { weight, bias }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<Linear<T>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::validation("layers", "network has no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.len() != l.out_dim() {
                return Err(Error::validation(
                    "layers",
                    format!("layer {i} weight/bias shapes disagree"),
                ));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Dimension {
                    context: format!("layer {} -> {} chaining", i, i + 1),
                    expected: w[0].out_dim(),
                    found: w[1].in_dim(),
                });
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in `[w0, b0, w1, b1, ...]` order.
    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            activation: self.activation,
        }
    }

    fn check_input(&self, last: usize) -> Result<()> {
        if last != self.in_dim() {
            return Err(Error::Dimension {
                context: "network input".into(),
                expected: self.in_dim(),
                found: last,
            });
        }
        Ok(())
    }

    /// Untracked evaluation. Input is `[..., in]`; output replaces the last
    /// extent with the network's output width.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input.last_dim())?;
        let rows = input.rows();
        let mut h = input.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, n) = (layer.in_dim(), layer.out_dim());
            let mut out = vec![T::zero(); rows * n];
            for row in out.chunks_mut(n) {
                row.copy_from_slice(layer.bias.data());
            }
            gemm(false, false, rows, k, n, &h, layer.weight.data(), &mut out, true);
            if i + 1 < self.layers.len() {
                match self.activation {
                    Activation::Silu => out.iter_mut().for_each(|v| *v = silu(*v)),
                }
            }
            h = out;
        }
        let mut shape = input.shape().to_vec();
        *shape.last_mut().expect("nonempty shape") = self.out_dim();
        Tensor::new(shape, h)
    }

    /// Registers the parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundMlp {
        self.bind_with(tape, true)
    }

    /// Registers the parameters as leaves; `trainable = false` makes them constants.
    pub fn bind_with(&self, tape: &mut Tape<T>, trainable: bool) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundMlp { vars }
    }

    /// Taped evaluation of a `[rows, in]` input.
    pub fn forward_taped(&self, tape: &mut Tape<T>, bound: &BoundMlp, input: Var) -> Result<Var> {
        self.check_input(tape.value(input).last_dim())?;
        let mut h = input;
        let last = bound.vars.len() - 1;
        for (i, &(w, b)) in bound.vars.iter().enumerate() {
            let z = tape.matmul(h, w, false)?;
            h = tape.add_bias(z, b)?;
            if i < last {
                h = match self.activation {
                    Activation::Silu => tape.silu(h),
                };
            }
        }
        Ok(h)
    }
}
